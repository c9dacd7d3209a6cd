#include <exprclone/error.hpp>
#include <exprclone/hashing.hpp>
#include <exprclone/model.hpp>

#include <cmath>

namespace exprclone {

namespace {

constexpr int k_feature_dim = 6;

std::mt19937_64 module_rng(std::uint64_t seed, std::uint64_t stream)
{
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream)};
    return std::mt19937_64(seq);
}

Eigen::MatrixXd clamped_sigmoid(const Eigen::MatrixXd& x, double eps)
{
    return nn::sigmoid(x).cwiseMax(eps).cwiseMin(1.0 - eps);
}

Eigen::MatrixXd clamped_sigmoid_backward(const Eigen::MatrixXd& pre, const Eigen::MatrixXd& grad, double eps)
{
    Eigen::MatrixXd g(pre.rows(), pre.cols());
    for (Eigen::Index i = 0; i < g.size(); ++i) {
        const double s = nn::sigmoid_scalar(pre.data()[i]);
        g.data()[i] = (s < eps || s > 1.0 - eps) ? 0.0 : grad.data()[i] * s * (1.0 - s);
    }
    return g;
}

} // namespace

nlohmann::json ModelConfig::to_json() const
{
    return {{"width", width},
            {"blocks", blocks},
            {"segments", segments},
            {"decoder_hidden", decoder_hidden},
            {"decoder_layers", decoder_layers},
            {"norm_groups", norm_groups},
            {"semantic_expression", semantic_expression},
            {"semantic_identity", semantic_identity},
            {"eigen_count", eigen_count},
            {"code_dim", k_code_dim},
            {"use_skinning_encoder", use_skinning_encoder},
            {"uniform_pooling", uniform_pooling},
            {"global_feature", to_string(global_feature)}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j)
{
    ModelConfig c;
    c.width = j.value("width", c.width);
    c.blocks = j.value("blocks", c.blocks);
    c.segments = j.value("segments", c.segments);
    c.decoder_hidden = j.value("decoder_hidden", c.decoder_hidden);
    c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
    c.norm_groups = j.value("norm_groups", c.norm_groups);
    c.semantic_expression = j.value("semantic_expression", c.semantic_expression);
    c.semantic_identity = j.value("semantic_identity", c.semantic_identity);
    c.eigen_count = j.value("eigen_count", c.eigen_count);
    c.use_skinning_encoder = j.value("use_skinning_encoder", c.use_skinning_encoder);
    c.uniform_pooling = j.value("uniform_pooling", c.uniform_pooling);
    if (j.contains("global_feature")) {
        c.global_feature = global_feature_mode_from_string(j.at("global_feature").get<std::string>());
    }
    if (j.contains("code_dim") && j.at("code_dim").get<int>() != k_code_dim) {
        throw InvalidInput("model code_dim must be " + std::to_string(k_code_dim));
    }
    c.validate();
    return c;
}

void ModelConfig::validate() const
{
    if (width <= 0 || blocks < 0) throw InvalidInput("model width must be positive and blocks nonnegative");
    if (segments < 1) throw InvalidInput("model segments must be >= 1");
    if (decoder_layers < 2) throw InvalidInput("decoder needs at least 2 layers");
    if (norm_groups < 1 || decoder_hidden % norm_groups != 0) {
        throw InvalidInput("decoder_hidden must be divisible by norm_groups");
    }
    if (semantic_expression < 1 || semantic_expression > k_code_dim || semantic_identity < 1 ||
        semantic_identity > k_code_dim) {
        throw InvalidInput("semantic code dims must lie in [1, 128]");
    }
    if (eigen_count < 1) throw InvalidInput("eigen_count must be >= 1");
}

SkinningBlock SkinningBlock::init(int segments, std::mt19937_64& rng)
{
    SkinningBlock b;
    b.layers.push_back(nn::Linear::init(segments, k_code_dim, rng));
    b.layers.push_back(nn::Linear::init(k_code_dim, k_code_dim, rng));
    b.layers.push_back(nn::Linear::init(k_code_dim, k_code_dim, rng));
    return b;
}

Eigen::MatrixXd SkinningBlock::forward(const Eigen::MatrixXd& probabilities, Cache* cache) const
{
    if (empty()) throw Error("skinning block is disabled in this model");
    if (cache != nullptr) {
        cache->inputs.clear();
        cache->pre.clear();
    }
    Eigen::MatrixXd x = probabilities;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        Eigen::MatrixXd pre = layers[l].forward(x);
        Eigen::MatrixXd next = l + 1 < layers.size() ? nn::relu(pre) : clamped_sigmoid(pre, eps);
        if (cache != nullptr) {
            cache->inputs.push_back(std::move(x));
            cache->pre.push_back(std::move(pre));
        }
        x = std::move(next);
    }
    return x;
}

Eigen::MatrixXd SkinningBlock::backward(const Cache& cache, const Eigen::MatrixXd& grad_weights,
                                        SkinningBlock* grad) const
{
    Eigen::MatrixXd g = clamped_sigmoid_backward(cache.pre.back(), grad_weights, eps);
    for (std::size_t l = layers.size(); l-- > 0;) {
        if (l + 1 < layers.size()) g = nn::relu_backward(cache.pre[l], g);
        g = layers[l].backward(cache.inputs[l], g, grad ? &grad->layers[l] : nullptr);
    }
    return g;
}

SkinningBlock SkinningBlock::zeros_like() const
{
    SkinningBlock b;
    for (const auto& l : layers) b.layers.push_back(l.zeros_like());
    return b;
}

void SkinningBlock::collect(const std::string& prefix, nn::ParamList& out)
{
    for (std::size_t l = 0; l < layers.size(); ++l) layers[l].collect(prefix + ".layer" + std::to_string(l), out);
}

Eigen::MatrixXd localize(const Eigen::MatrixXd& weights, const Eigen::VectorXd& z_ge)
{
    if (weights.cols() != z_ge.size()) {
        throw InvalidInput("localize: weights have " + std::to_string(weights.cols()) + " columns but code has " +
                           std::to_string(z_ge.size()) + " entries");
    }
    return weights.array().rowwise() * z_ge.transpose().array();
}

Decoder Decoder::init(int hidden, int layer_count, int groups, std::mt19937_64& rng)
{
    Decoder d;
    d.layers.push_back(nn::Linear::init(input_dim, hidden, rng));
    for (int l = 1; l + 1 < layer_count; ++l) d.layers.push_back(nn::Linear::init(hidden, hidden, rng));
    d.layers.push_back(nn::Linear::init(hidden, 3, rng));
    for (int l = 0; l + 1 < layer_count; ++l) d.norms.push_back(nn::GroupNorm::init(hidden, groups));
    return d;
}

Eigen::MatrixXd Decoder::forward(const Eigen::MatrixXd& features, const Eigen::VectorXd& c,
                                 const Eigen::VectorXd& z_id, const Eigen::MatrixXd& z_le, Cache* cache) const
{
    const Eigen::Index n = features.rows();
    if (features.cols() != k_feature_dim || c.size() != k_code_dim || z_id.size() != k_code_dim ||
        z_le.rows() != n || z_le.cols() != k_code_dim) {
        throw InvalidInput("decoder input shapes are inconsistent");
    }
    const auto& w0 = layers[0].weight;
    Eigen::VectorXd shared = layers[0].bias;
    shared.noalias() += w0.middleCols(k_feature_dim, k_code_dim) * c;
    shared.noalias() += w0.middleCols(k_feature_dim + k_code_dim, k_code_dim) * z_id;
    Eigen::MatrixXd pre = nn::matmul_nt(z_le, w0.rightCols(k_code_dim));
    pre.noalias() += features * w0.leftCols(k_feature_dim).transpose();
    pre.rowwise() += shared.transpose();

    if (cache != nullptr) {
        cache->pre.clear();
        cache->norm.assign(norms.size(), {});
        cache->normed.clear();
        cache->hidden.clear();
    }
    for (std::size_t l = 0; l < norms.size(); ++l) {
        Eigen::MatrixXd normed = norms[l].forward(pre, cache ? &cache->norm[l] : nullptr);
        Eigen::MatrixXd hidden = nn::relu(normed);
        Eigen::MatrixXd next = layers[l + 1].forward(hidden);
        if (cache != nullptr) {
            cache->pre.push_back(std::move(pre));
            cache->normed.push_back(std::move(normed));
            cache->hidden.push_back(std::move(hidden));
        }
        pre = std::move(next);
    }
    return pre;
}

Decoder::InputGradient Decoder::backward(const Cache& cache, const Eigen::MatrixXd& features, const Eigen::VectorXd& c,
                                         const Eigen::VectorXd& z_id, const Eigen::MatrixXd& z_le,
                                         const Eigen::MatrixXd& grad_out, Decoder* grad) const
{
    Eigen::MatrixXd g = grad_out;
    for (std::size_t l = norms.size(); l-- > 0;) {
        const Eigen::MatrixXd g_hidden = layers[l + 1].backward(cache.hidden[l], g, grad ? &grad->layers[l + 1] : nullptr);
        g = norms[l].backward(cache.norm[l], nn::relu_backward(cache.normed[l], g_hidden), grad ? &grad->norms[l] : nullptr);
    }
    const auto& w0 = layers[0].weight;
    const Eigen::VectorXd colsum = g.colwise().sum().transpose();
    if (grad != nullptr) {
        auto& gw = grad->layers[0].weight;
        gw.leftCols(k_feature_dim).noalias() += g.transpose() * features;
        gw.middleCols(k_feature_dim, k_code_dim).noalias() += colsum * c.transpose();
        gw.middleCols(k_feature_dim + k_code_dim, k_code_dim).noalias() += colsum * z_id.transpose();
        gw.rightCols(k_code_dim) += nn::matmul_tn(g, z_le);
        grad->layers[0].bias += colsum;
    }
    InputGradient out;
    out.c = w0.middleCols(k_feature_dim, k_code_dim).transpose() * colsum;
    out.z_id = w0.middleCols(k_feature_dim + k_code_dim, k_code_dim).transpose() * colsum;
    out.z_le = nn::matmul_nn(g, w0.rightCols(k_code_dim));
    return out;
}

Decoder Decoder::zeros_like() const
{
    Decoder d;
    for (const auto& l : layers) d.layers.push_back(l.zeros_like());
    for (const auto& n : norms) d.norms.push_back(n.zeros_like());
    return d;
}

void Decoder::collect(const std::string& prefix, nn::ParamList& out)
{
    for (std::size_t l = 0; l < layers.size(); ++l) layers[l].collect(prefix + ".layer" + std::to_string(l), out);
    for (std::size_t l = 0; l < norms.size(); ++l) norms[l].collect(prefix + ".norm" + std::to_string(l), out);
}

Mesh deform(const Mesh& target, const Eigen::MatrixXd& displacement)
{
    if (displacement.rows() != target.num_vertices() || displacement.cols() != 3) {
        throw InvalidInput("displacement has " + std::to_string(displacement.rows()) + " rows, target has " +
                           std::to_string(target.num_vertices()) + " vertices");
    }
    Vertices v = target.vertices() + displacement;
    return target.with_vertices(std::move(v));
}

Model Model::init(const ModelConfig& config, std::uint64_t seed)
{
    config.validate();
    Model m;
    m.config = config;
    auto rng = module_rng(seed, 0);
    m.descriptor = GlobalDescriptor::init(config.global_feature, rng);
    rng = module_rng(seed, 1);
    m.identity_encoder = GlobalEncoder::init(config.width, config.blocks, rng);
    m.identity_encoder.uniform_pooling = config.uniform_pooling;
    rng = module_rng(seed, 2);
    m.expression_encoder = GlobalEncoder::init(config.width, config.blocks, rng);
    m.expression_encoder.uniform_pooling = config.uniform_pooling;
    if (config.use_skinning_encoder) {
        rng = module_rng(seed, 3);
        m.skinning_encoder = SkinningEncoder::init(config.width, config.blocks, config.segments, rng);
        rng = module_rng(seed, 4);
        m.skinning_block = SkinningBlock::init(config.segments, rng);
    }
    rng = module_rng(seed, 5);
    m.decoder = Decoder::init(config.decoder_hidden, config.decoder_layers, config.norm_groups, rng);
    return m;
}

Model Model::zeros_like() const
{
    Model m;
    m.config = config;
    m.descriptor = descriptor.zeros_like();
    m.identity_encoder = identity_encoder.zeros_like();
    m.expression_encoder = expression_encoder.zeros_like();
    m.skinning_encoder = skinning_encoder.zeros_like();
    m.skinning_block = skinning_block.zeros_like();
    m.decoder = decoder.zeros_like();
    return m;
}

nn::ParamList Model::parameters()
{
    nn::ParamList out;
    descriptor.collect("descriptor", out);
    identity_encoder.collect("identity_encoder", out);
    expression_encoder.collect("expression_encoder", out);
    skinning_encoder.collect("skinning_encoder", out);
    skinning_block.collect("skinning_block", out);
    decoder.collect("decoder", out);
    return out;
}

std::size_t Model::parameter_count()
{
    std::size_t n = 0;
    for (const auto& p : parameters()) n += static_cast<std::size_t>(p.size());
    return n;
}

ArrayStore Model::to_store() const
{
    ArrayStore store;
    store.put_text("model_config", config.to_json().dump());
    for (const auto& p : const_cast<Model*>(this)->parameters()) {
        store.put("param/" + p.name, Eigen::MatrixXd(p.map()));
    }
    return store;
}

Model Model::from_store(const ArrayStore& store)
{
    if (!store.contains("model_config")) throw Error("checkpoint has no model_config entry");
    const auto config = ModelConfig::from_json(nlohmann::json::parse(store.text("model_config")));
    Model m = Model::init(config, 0);
    for (const auto& p : m.parameters()) {
        const std::string key = "param/" + p.name;
        if (!store.contains(key)) throw Error("checkpoint is missing parameter '" + p.name + "'");
        const Eigen::MatrixXd value = store.matrix(key);
        if (value.rows() != p.rows || value.cols() != p.cols) {
            throw Error("checkpoint parameter '" + p.name + "' has shape " + std::to_string(value.rows()) + "x" +
                        std::to_string(value.cols()) + ", expected " + std::to_string(p.rows) + "x" +
                        std::to_string(p.cols));
        }
        p.map() = value;
    }
    return m;
}

std::string Model::digest() const
{
    Fnv1a h;
    h.update(config.to_json().dump());
    for (const auto& p : const_cast<Model*>(this)->parameters()) {
        h.update(p.name);
        h.update_array(p.data, static_cast<std::size_t>(p.size()));
    }
    return h.hex();
}

Eigen::VectorXd Model::encode_identity(const MeshContext& ctx) const
{
    return identity_encoder.forward(ctx, descriptor.forward(ctx), nullptr);
}

Eigen::VectorXd Model::encode_expression(const MeshContext& ctx) const
{
    return expression_encoder.forward(ctx, descriptor.forward(ctx), nullptr);
}

SkinningField Model::encode_skinning(const MeshContext& ctx) const
{
    return skinning_encoder.forward(ctx, descriptor.forward(ctx), nullptr);
}

Eigen::MatrixXd Model::skinning_weights(const SkinningField& field) const
{
    return skinning_block.forward(field.probabilities, nullptr);
}

Eigen::MatrixXd Model::localized_code(const PreparedTarget& target, const Eigen::VectorXd& z_ge) const
{
    if (config.use_skinning_encoder) return localize(target.weights, z_ge);
    Eigen::MatrixXd z(target.context->num_vertices(), k_code_dim);
    z.rowwise() = z_ge.transpose();
    return z;
}

PreparedTarget Model::prepare_target(std::shared_ptr<const MeshContext> target) const
{
    PreparedTarget p;
    p.c = descriptor.forward(*target);
    p.z_id = identity_encoder.forward(*target, p.c, nullptr);
    if (config.use_skinning_encoder) {
        p.skinning = skinning_encoder.forward(*target, p.c, nullptr);
        p.weights = skinning_block.forward(p.skinning.probabilities, nullptr);
    }
    p.context = std::move(target);
    return p;
}

Eigen::MatrixXd Model::displacement(const PreparedTarget& target, const Eigen::VectorXd& z_ge) const
{
    return decoder.forward(target.context->features, target.c, target.z_id, localized_code(target, z_ge), nullptr);
}

Mesh Model::animate(const PreparedTarget& target, const Eigen::VectorXd& code) const
{
    const Eigen::VectorXd z = expand_expression_code(code, config.semantic_expression);
    if (!z.allFinite()) throw InvalidInput("expression code contains non-finite values");
    return deform(target.context->mesh, displacement(target, z));
}

Mesh Model::retarget(const MeshContext& source, const PreparedTarget& target) const
{
    return animate(target, encode_expression(source));
}

Mesh Model::retarget(const MeshContext& source, const MeshContext& target) const
{
    return retarget(source, prepare_target(std::make_shared<const MeshContext>(target)));
}

Eigen::VectorXd expand_expression_code(const Eigen::VectorXd& code, int semantic_dims)
{
    if (code.size() == k_code_dim) return code;
    if (code.size() == semantic_dims) {
        Eigen::VectorXd z = Eigen::VectorXd::Zero(k_code_dim);
        z.head(semantic_dims) = code;
        return z;
    }
    throw InvalidInput("expression code must have " + std::to_string(semantic_dims) + " or " +
                       std::to_string(k_code_dim) + " entries, got " + std::to_string(code.size()));
}

} // namespace exprclone
