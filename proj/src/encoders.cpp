#include <exprclone/encoders.hpp>
#include <exprclone/error.hpp>

#include <cmath>

namespace exprclone {

namespace {

constexpr int k_vertex_feature_dim = 6;
constexpr double k_min_time = 1e-4;
constexpr double k_max_time = 1e-1;

Eigen::VectorXd pooling_weights(const MeshContext& ctx, bool uniform)
{
    if (uniform) {
        return Eigen::VectorXd::Constant(ctx.num_vertices(), 1.0 / static_cast<double>(ctx.num_vertices()));
    }
    return ctx.pool_weights;
}

void check_context(const MeshContext& ctx)
{
    if (!ctx.ops || ctx.ops->num_vertices() != ctx.num_vertices()) {
        throw InvalidInput("spectral operators do not match the mesh vertex count");
    }
}

} // namespace

MeshContext make_context(const Mesh& mesh, std::shared_ptr<const SpectralOperators> ops)
{
    if (!ops || ops->num_vertices() != mesh.num_vertices()) {
        throw InvalidInput("spectral operators do not match the mesh vertex count");
    }
    MeshContext ctx{mesh, std::move(ops), vertex_features(mesh), {}, {}, nullptr};
    const auto& o = *ctx.ops;
    ctx.pool_weights = o.mass / o.mass.sum();
    ctx.stats = descriptor_stats(mesh.vertices(), o.mass);
    ctx.frames = std::make_shared<DeformationFrames>(mesh);
    return ctx;
}

MeshContext make_context(const Mesh& mesh, OperatorCache& cache)
{
    return make_context(mesh, cache.get(mesh));
}

ContextCache::ContextCache(std::shared_ptr<OperatorCache> operators) : m_operators(std::move(operators))
{
    if (!m_operators) throw InvalidInput("context cache needs an operator cache");
}

std::shared_ptr<const MeshContext> ContextCache::get(const Mesh& mesh)
{
    const std::string key = mesh.content_hash();
    {
        std::lock_guard lock(m_mutex);
        if (auto it = m_entries.find(key); it != m_entries.end()) return it->second;
    }
    auto ctx = std::make_shared<const MeshContext>(make_context(mesh, *m_operators));
    std::lock_guard lock(m_mutex);
    return m_entries.emplace(key, std::move(ctx)).first->second;
}

std::size_t ContextCache::size() const
{
    std::lock_guard lock(m_mutex);
    return m_entries.size();
}

Eigen::VectorXd descriptor_stats(const Vertices& vertices, const Eigen::VectorXd& mass)
{
    const double total = mass.sum();
    const Eigen::RowVector3d centroid = (mass.transpose() * vertices) / total;
    const Eigen::RowVector3d lo = vertices.colwise().minCoeff();
    const Eigen::RowVector3d hi = vertices.colwise().maxCoeff();
    const Eigen::RowVector3d center = 0.5 * (lo + hi);
    const Vertices centered = vertices.rowwise() - centroid;
    const Eigen::Matrix3d cov = centered.transpose() * mass.asDiagonal() * centered / total;
    Eigen::VectorXd s(k_descriptor_stats);
    s.head<3>() = (centroid - center).transpose();
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) s[3 + 3 * r + c] = cov(r, c);
    }
    return s;
}

std::string to_string(GlobalFeatureMode mode)
{
    return mode == GlobalFeatureMode::zero ? "zero" : "pooled-descriptor";
}

GlobalFeatureMode global_feature_mode_from_string(const std::string& s)
{
    if (s == "zero") return GlobalFeatureMode::zero;
    if (s == "pooled-descriptor") return GlobalFeatureMode::pooled_descriptor;
    throw InvalidInput("unknown global feature mode '" + s + "' (expected zero or pooled-descriptor)");
}

GlobalDescriptor GlobalDescriptor::init(GlobalFeatureMode mode, std::mt19937_64& rng)
{
    GlobalDescriptor d;
    d.mode = mode;
    if (mode == GlobalFeatureMode::pooled_descriptor) d.map = nn::Linear::init(k_descriptor_stats, k_code_dim, rng);
    return d;
}

Eigen::VectorXd GlobalDescriptor::forward(const MeshContext& ctx) const
{
    if (mode == GlobalFeatureMode::zero) return Eigen::VectorXd::Zero(k_code_dim);
    return map.forward_vector(ctx.stats);
}

void GlobalDescriptor::backward(const MeshContext& ctx, const Eigen::VectorXd& grad_c, GlobalDescriptor* grad) const
{
    if (mode == GlobalFeatureMode::zero || grad == nullptr) return;
    map.backward_vector(ctx.stats, grad_c, &grad->map);
}

GlobalDescriptor GlobalDescriptor::zeros_like() const
{
    GlobalDescriptor d;
    d.mode = mode;
    if (!map.empty()) d.map = map.zeros_like();
    return d;
}

void GlobalDescriptor::collect(const std::string& prefix, nn::ParamList& out)
{
    if (!map.empty()) map.collect(prefix + ".map", out);
}

Eigen::VectorXd DiffusionBlock::diffusion_times() const
{
    return time_param.unaryExpr([](double v) { return nn::softplus(v); });
}

Eigen::MatrixXd spectral_diffuse(const MeshContext& ctx, const Eigen::MatrixXd& x, const Eigen::VectorXd& times)
{
    check_context(ctx);
    const auto& lambda = ctx.ops->eigenvalues;
    Eigen::MatrixXd spectral = ctx.ops->eigenvectors.transpose() * (ctx.ops->mass.asDiagonal() * x);
    for (Eigen::Index c = 0; c < spectral.cols(); ++c) {
        spectral.col(c).array() *= (-lambda.array() * times[c]).exp();
    }
    return ctx.ops->eigenvectors * spectral;
}

Backbone Backbone::init(int input_features, int cond_dim, int width, int block_count, std::mt19937_64& rng)
{
    Backbone b;
    b.lift = nn::Linear::init(input_features + cond_dim, width, rng);
    for (int i = 0; i < block_count; ++i) {
        DiffusionBlock blk;
        blk.time_param.resize(width);
        for (int c = 0; c < width; ++c) {
            const double u = width > 1 ? static_cast<double>(c) / (width - 1) : 0.0;
            const double t = std::exp(std::log(k_min_time) + u * (std::log(k_max_time) - std::log(k_min_time)));
            blk.time_param[c] = nn::softplus_inverse(t);
        }
        blk.mix1 = nn::Linear::init(2 * width, width, rng);
        blk.mix2 = nn::Linear::init(width, width, rng);
        b.blocks.push_back(std::move(blk));
    }
    b.head = nn::Linear::init(width, width, rng);
    return b;
}

Eigen::MatrixXd Backbone::forward(const MeshContext& ctx, const Eigen::VectorXd& c, Cache* cache) const
{
    check_context(ctx);
    const Eigen::Index n = ctx.num_vertices();
    const Eigen::Index cond = lift.in_features() - k_vertex_feature_dim;
    if (c.size() != cond) throw InvalidInput("backbone conditioning vector has the wrong length");
    Eigen::MatrixXd input(n, lift.in_features());
    input.leftCols(k_vertex_feature_dim) = ctx.features;
    input.rightCols(cond).rowwise() = c.transpose();

    Eigen::MatrixXd x = lift.forward(input);
    if (cache != nullptr) {
        cache->blocks.clear();
        cache->blocks.reserve(blocks.size());
    }
    const auto& lambda = ctx.ops->eigenvalues;
    const Eigen::Index w = x.cols();
    for (const auto& blk : blocks) {
        const Eigen::VectorXd times = blk.diffusion_times();
        Eigen::MatrixXd spectral(ctx.ops->k(), w);
        spectral.noalias() = ctx.ops->eigenvectors.transpose() * (ctx.ops->mass.asDiagonal() * x);
        Eigen::MatrixXd decay(spectral.rows(), w);
        for (Eigen::Index ch = 0; ch < w; ++ch) decay.col(ch) = (-lambda.array() * times[ch]).exp().matrix();
        Eigen::MatrixXd concat(n, 2 * w);
        concat.leftCols(w) = x;
        concat.rightCols(w).noalias() = ctx.ops->eigenvectors * decay.cwiseProduct(spectral);
        Eigen::MatrixXd hidden_pre = blk.mix1.forward(concat);
        Eigen::MatrixXd hidden = nn::relu(hidden_pre);
        Eigen::MatrixXd next = x + blk.mix2.forward(hidden);
        if (cache != nullptr) {
            cache->blocks.push_back({std::move(x), std::move(spectral), std::move(decay), std::move(concat),
                                     std::move(hidden_pre), std::move(hidden)});
        }
        x = std::move(next);
    }
    Eigen::MatrixXd out = head.forward(x);
    if (cache != nullptr) {
        cache->input = std::move(input);
        cache->trunk = std::move(x);
    }
    return out;
}

void Backbone::backward(const MeshContext& ctx, const Cache& cache, const Eigen::MatrixXd& grad_out, Backbone* grad,
                        Eigen::VectorXd* grad_c) const
{
    const auto& lambda = ctx.ops->eigenvalues;
    Eigen::MatrixXd g = head.backward(cache.trunk, grad_out, grad ? &grad->head : nullptr);
    const Eigen::Index w = g.cols();
    for (std::size_t bi = blocks.size(); bi-- > 0;) {
        const auto& blk = blocks[bi];
        const auto& bc = cache.blocks[bi];
        DiffusionBlock* gblk = grad ? &grad->blocks[bi] : nullptr;
        const Eigen::MatrixXd g_hidden = blk.mix2.backward(bc.hidden, g, gblk ? &gblk->mix2 : nullptr);
        const Eigen::MatrixXd g_pre = nn::relu_backward(bc.hidden_pre, g_hidden);
        const Eigen::MatrixXd g_concat = blk.mix1.backward(bc.concat, g_pre, gblk ? &gblk->mix1 : nullptr);
        g += g_concat.leftCols(w);
        Eigen::MatrixXd g_decayed(bc.spectral.rows(), w);
        g_decayed.noalias() = ctx.ops->eigenvectors.transpose() * g_concat.rightCols(w);
        if (gblk != nullptr) {
            const Eigen::MatrixXd prod = g_decayed.cwiseProduct(bc.spectral).cwiseProduct(bc.decay);
            const Eigen::VectorXd g_times = -(prod.transpose() * lambda);
            for (Eigen::Index ch = 0; ch < w; ++ch) {
                gblk->time_param[ch] += g_times[ch] * nn::sigmoid_scalar(blk.time_param[ch]);
            }
        }
        g += ctx.ops->mass.asDiagonal() * (ctx.ops->eigenvectors * g_decayed.cwiseProduct(bc.decay));
    }
    const Eigen::MatrixXd g_input = lift.backward(cache.input, g, grad ? &grad->lift : nullptr);
    if (grad_c != nullptr) {
        const Eigen::Index cond = lift.in_features() - k_vertex_feature_dim;
        *grad_c += g_input.rightCols(cond).colwise().sum().transpose();
    }
}

Backbone Backbone::zeros_like() const
{
    Backbone b;
    b.lift = lift.zeros_like();
    for (const auto& blk : blocks) {
        b.blocks.push_back({Eigen::VectorXd::Zero(blk.time_param.size()), blk.mix1.zeros_like(), blk.mix2.zeros_like()});
    }
    b.head = head.zeros_like();
    return b;
}

void Backbone::collect(const std::string& prefix, nn::ParamList& out)
{
    lift.collect(prefix + ".lift", out);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string p = prefix + ".block" + std::to_string(i);
        nn::add_param(out, p + ".time", blocks[i].time_param);
        blocks[i].mix1.collect(p + ".mix1", out);
        blocks[i].mix2.collect(p + ".mix2", out);
    }
    head.collect(prefix + ".head", out);
}

GlobalEncoder GlobalEncoder::init(int width, int block_count, std::mt19937_64& rng)
{
    GlobalEncoder e;
    e.backbone = Backbone::init(k_vertex_feature_dim, k_code_dim, width, block_count, rng);
    e.head = nn::Linear::init(width, k_code_dim, rng);
    return e;
}

Eigen::VectorXd GlobalEncoder::forward(const MeshContext& ctx, const Eigen::VectorXd& c, Cache* cache) const
{
    const Eigen::MatrixXd feats = backbone.forward(ctx, c, cache ? &cache->backbone : nullptr);
    Eigen::VectorXd pooled = feats.transpose() * pooling_weights(ctx, uniform_pooling);
    Eigen::VectorXd code = head.forward_vector(pooled);
    if (cache != nullptr) cache->pooled = std::move(pooled);
    return code;
}

void GlobalEncoder::backward(const MeshContext& ctx, const Cache& cache, const Eigen::VectorXd& grad_code,
                             GlobalEncoder* grad, Eigen::VectorXd* grad_c) const
{
    const Eigen::VectorXd g_pooled = head.backward_vector(cache.pooled, grad_code, grad ? &grad->head : nullptr);
    const Eigen::MatrixXd g_feats = pooling_weights(ctx, uniform_pooling) * g_pooled.transpose();
    backbone.backward(ctx, cache.backbone, g_feats, grad ? &grad->backbone : nullptr, grad_c);
}

GlobalEncoder GlobalEncoder::zeros_like() const
{
    return {backbone.zeros_like(), head.zeros_like(), uniform_pooling};
}

void GlobalEncoder::collect(const std::string& prefix, nn::ParamList& out)
{
    backbone.collect(prefix + ".backbone", out);
    head.collect(prefix + ".head", out);
}

SkinningField SkinningField::from_logits(Eigen::MatrixXd logits)
{
    SkinningField f;
    f.probabilities = nn::sigmoid(logits).cwiseMax(eps).cwiseMin(1.0 - eps);
    f.logits = std::move(logits);
    return f;
}

Eigen::MatrixXd SkinningField::logits_gradient(const Eigen::MatrixXd& grad_probabilities) const
{
    Eigen::MatrixXd g(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < g.size(); ++i) {
        const double s = nn::sigmoid_scalar(logits.data()[i]);
        const bool clamped = s < eps || s > 1.0 - eps;
        g.data()[i] = clamped ? 0.0 : grad_probabilities.data()[i] * s * (1.0 - s);
    }
    return g;
}

SkinningEncoder SkinningEncoder::init(int width, int block_count, int segments, std::mt19937_64& rng)
{
    SkinningEncoder e;
    e.backbone = Backbone::init(k_vertex_feature_dim, k_code_dim, width, block_count, rng);
    e.head = nn::Linear::init(width, segments, rng);
    return e;
}

SkinningField SkinningEncoder::forward(const MeshContext& ctx, const Eigen::VectorXd& c, Cache* cache) const
{
    if (empty()) throw Error("skinning encoder is disabled in this model");
    Eigen::MatrixXd trunk = backbone.forward(ctx, c, cache ? &cache->backbone : nullptr);
    auto field = SkinningField::from_logits(head.forward(trunk));
    if (cache != nullptr) cache->trunk = std::move(trunk);
    return field;
}

void SkinningEncoder::backward(const MeshContext& ctx, const Cache& cache, const Eigen::MatrixXd& grad_logits,
                               SkinningEncoder* grad, Eigen::VectorXd* grad_c) const
{
    const Eigen::MatrixXd g_trunk = head.backward(cache.trunk, grad_logits, grad ? &grad->head : nullptr);
    backbone.backward(ctx, cache.backbone, g_trunk, grad ? &grad->backbone : nullptr, grad_c);
}

SkinningEncoder SkinningEncoder::zeros_like() const
{
    if (empty()) return {};
    return {backbone.zeros_like(), head.zeros_like()};
}

void SkinningEncoder::collect(const std::string& prefix, nn::ParamList& out)
{
    if (empty()) return;
    backbone.collect(prefix + ".backbone", out);
    head.collect(prefix + ".head", out);
}

} // namespace exprclone
