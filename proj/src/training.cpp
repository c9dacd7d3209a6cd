#include <exprclone/alignment.hpp>
#include <exprclone/error.hpp>
#include <exprclone/hashing.hpp>
#include <exprclone/training.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <iostream>
#include <map>
#include <random>

namespace exprclone {

namespace {

std::mt19937_64 step_rng(std::uint64_t seed, long step)
{
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(static_cast<std::uint64_t>(step) >> 32),
                      0xba7cu};
    return std::mt19937_64(seq);
}

bool valid_segment_count(int l)
{
    return l == 6 || l == 14 || l == 20 || l == 24;
}

struct TargetPass {
    Eigen::VectorXd c;
    GlobalEncoder::Cache identity_cache;
    Eigen::VectorXd z_id;
    SkinningEncoder::Cache skinning_cache;
    SkinningField field;
    SkinningBlock::Cache block_cache;
    Eigen::MatrixXd weights;
};

LossReport mean_report(const std::vector<LossReport>& reports)
{
    LossReport r;
    r.branch = Branch::non_ict;
    for (const auto& x : reports) {
        if (x.branch == Branch::ict) r.branch = Branch::ict;
    }
    r.terms = average_terms(reports);
    return r;
}

std::string checkpoint_name(long step)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "step_%06ld.exna", step);
    return buf;
}

} // namespace

nlohmann::json TrainConfig::to_json() const
{
    return {{"seed", seed},
            {"steps", steps},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"adam", {{"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}}},
            {"use_skinning_encoder", use_skinning_encoder},
            {"use_bp", use_bp},
            {"use_br", use_br},
            {"supervision_fraction", supervision_fraction},
            {"ict_scan_ratio", ict_scan_ratio},
            {"cross_identity", cross_identity},
            {"nll_mode", to_string(nll_mode)},
            {"fast_gemm", fast_gemm},
            {"weights", weights.to_json()},
            {"model", model.to_json()},
            {"checkpoint_every", checkpoint_every},
            {"validate_every", validate_every},
            {"validation_samples", validation_samples},
            {"early_stop", early_stop},
            {"patience", patience}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j)
{
    TrainConfig c;
    c.seed = j.value("seed", c.seed);
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    if (j.contains("adam")) {
        const auto& a = j.at("adam");
        c.adam.beta1 = a.value("beta1", c.adam.beta1);
        c.adam.beta2 = a.value("beta2", c.adam.beta2);
        c.adam.eps = a.value("eps", c.adam.eps);
    }
    c.use_skinning_encoder = j.value("use_skinning_encoder", c.use_skinning_encoder);
    c.use_bp = j.value("use_bp", c.use_bp);
    c.use_br = j.value("use_br", c.use_br);
    c.supervision_fraction = j.value("supervision_fraction", c.supervision_fraction);
    c.ict_scan_ratio = j.value("ict_scan_ratio", c.ict_scan_ratio);
    c.cross_identity = j.value("cross_identity", c.cross_identity);
    if (j.contains("nll_mode")) c.nll_mode = nll_mode_from_string(j.at("nll_mode").get<std::string>());
    c.fast_gemm = j.value("fast_gemm", c.fast_gemm);
    if (j.contains("weights")) c.weights = LossWeights::from_json(j.at("weights"));
    if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
    c.model.use_skinning_encoder = c.use_skinning_encoder;
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.validate_every = j.value("validate_every", c.validate_every);
    c.validation_samples = j.value("validation_samples", c.validation_samples);
    c.early_stop = j.value("early_stop", c.early_stop);
    c.patience = j.value("patience", c.patience);
    c.validate();
    return c;
}

void TrainConfig::validate() const
{
    if (steps <= 0) throw InvalidInput("steps must be positive");
    if (batch_size <= 0) throw InvalidInput("batch_size must be positive");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw InvalidInput("learning_rate must be >= 0");
    if (!(supervision_fraction >= 0.0 && supervision_fraction <= 1.0)) {
        throw InvalidInput("supervision_fraction must lie in [0, 1]");
    }
    if (!(ict_scan_ratio > 0.0)) throw InvalidInput("ict_scan_ratio must be positive");
    if (!valid_segment_count(model.segments)) {
        throw InvalidInput("segment count " + std::to_string(model.segments) + " is not one of 6, 14, 20, 24");
    }
    if (model.use_skinning_encoder != use_skinning_encoder) {
        throw InvalidInput("model.use_skinning_encoder disagrees with use_skinning_encoder");
    }
    if (checkpoint_every < 0 || validate_every < 0 || validation_samples < 0 || patience < 1) {
        throw InvalidInput("cadences must be nonnegative and patience positive");
    }
    weights.validate();
    model.validate();
}

std::string TrainConfig::digest() const
{
    auto j = to_json();
    for (const char* k : {"steps", "checkpoint_every", "validate_every", "validation_samples", "early_stop", "patience"}) {
        j.erase(k);
    }
    Fnv1a h;
    h.update(j.dump());
    return h.hex();
}

GradientSettings gradient_settings(const TrainConfig& config, const Eigen::MatrixXd& basis)
{
    GradientSettings s;
    s.weights = config.weights;
    s.nll_mode = config.nll_mode;
    s.use_bp = config.use_bp;
    s.use_br = config.use_br;
    s.basis = &basis;
    return s;
}

std::vector<bool> supervised_mask(const Dataset& dataset, double fraction)
{
    if (!(fraction >= 0.0 && fraction <= 1.0)) throw InvalidInput("supervision fraction must lie in [0, 1]");
    std::vector<std::pair<std::uint64_t, std::size_t>> keyed;
    for (std::size_t i : dataset.samples_in(Split::train)) {
        if (!dataset.samples[i].has_blendshape_gt) continue;
        // FNV-1a barely moves the high bits for ids that differ in the last characters.
        std::uint64_t x = Fnv1a().update(dataset.samples[i].id).value();
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        x ^= x >> 31;
        keyed.emplace_back(x, i);
    }
    std::sort(keyed.begin(), keyed.end());
    const auto take = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(keyed.size())));
    std::vector<bool> mask(dataset.samples.size(), false);
    for (std::size_t k = 0; k < take; ++k) mask[keyed[k].second] = true;
    return mask;
}

std::vector<LossReport> accumulate_gradients(const Model& model, const std::vector<TrainingExample>& batch,
                                             const GradientSettings& s, Model& grad)
{
    if (batch.empty()) throw InvalidInput("batch holds no examples");
    const bool skin = model.config.use_skinning_encoder;
    const double scale = 1.0 / static_cast<double>(batch.size());
    const auto& w = s.weights;
    const bool need_basis = s.use_bp || s.use_br;
    if (need_basis && s.basis == nullptr) throw InvalidInput("L_BP/L_BR need the expression basis");

    std::vector<const MeshContext*> targets;
    std::map<const MeshContext*, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto* t = batch[i].target.get();
        if (t == nullptr || batch[i].source == nullptr) throw InvalidInput("example " + batch[i].id + " lacks meshes");
        if (!groups.count(t)) targets.push_back(t);
        groups[t].push_back(i);
    }

    std::vector<LossReport> reports(batch.size());
    for (const MeshContext* tp : targets) {
        const MeshContext& T = *tp;
        const Eigen::Index n = T.num_vertices();
        TargetPass tgt;
        tgt.c = model.descriptor.forward(T);
        tgt.z_id = model.identity_encoder.forward(T, tgt.c, &tgt.identity_cache);
        if (skin) {
            tgt.field = model.skinning_encoder.forward(T, tgt.c, &tgt.skinning_cache);
            tgt.weights = model.skinning_block.forward(tgt.field.probabilities, &tgt.block_cache);
        }
        Eigen::VectorXd g_c = Eigen::VectorXd::Zero(k_code_dim);
        Eigen::VectorXd g_id = Eigen::VectorXd::Zero(k_code_dim);
        Eigen::MatrixXd g_weights;
        Eigen::MatrixXd g_logits;
        if (skin) {
            g_weights.setZero(n, k_code_dim);
            g_logits.setZero(n, tgt.field.logits.cols());
        }

        for (std::size_t idx : groups[tp]) {
            const auto& ex = batch[idx];
            const MeshContext& S = *ex.source;
            if (ex.gt.rows() != n) throw InvalidInput("example " + ex.id + " ground truth does not match its target");
            const Eigen::VectorXd c_s = model.descriptor.forward(S);
            GlobalEncoder::Cache expr_cache;
            const Eigen::VectorXd z_ge = model.expression_encoder.forward(S, c_s, &expr_cache);
            Eigen::MatrixXd z_le;
            if (skin) {
                z_le = localize(tgt.weights, z_ge);
            } else {
                z_le.resize(n, k_code_dim);
                z_le.rowwise() = z_ge.transpose();
            }
            Decoder::Cache dcache;
            const Eigen::MatrixXd disp = model.decoder.forward(T.features, tgt.c, tgt.z_id, z_le, &dcache);
            const Vertices pred = T.mesh.vertices() + disp;

            LossTerms terms;
            Vertices g_pred;
            terms.dec = loss_decoder(pred, ex.gt, T.mesh, *T.frames, w, &g_pred);
            Eigen::MatrixXd g_main = Eigen::MatrixXd::Zero(n, 3);
            if (s.terms.dec) g_main = scale * g_pred;
            Eigen::MatrixXd g_br;
            Eigen::VectorXd g_ge = Eigen::VectorXd::Zero(k_code_dim);
            Eigen::VectorXd g;
            if (ex.branch() == Branch::ict) {
                if (!ex.w_id) throw InvalidInput("example " + ex.id + " has expression but no identity ground truth");
                terms.expression = loss_expression(z_ge, *ex.w_exp, &g);
                if (s.terms.enc) g_ge += scale * g;
                terms.identity = loss_identity(tgt.z_id, *ex.w_id, &g);
                if (s.terms.enc) g_id += scale * g;
                if (s.use_bp) {
                    terms.bp = loss_bp(z_ge, *ex.w_exp, *s.basis, &g);
                    if (s.terms.bp) g_ge += (scale * w.bp) * g;
                }
                if (s.use_br) {
                    Eigen::MatrixXd gd;
                    terms.br = loss_br(z_ge, disp, *s.basis, &gd);
                    if (s.terms.br) g_br = (scale * w.br) * gd;
                }
                if (skin && ex.labels) {
                    Eigen::MatrixXd gl;
                    terms.nll = loss_nll(tgt.field, *ex.labels, s.nll_mode, &gl);
                    if (s.terms.nll) g_logits += (scale * w.nll) * gl;
                }
            } else {
                terms.reg_expression = loss_reg(z_ge, &g);
                if (s.terms.enc) g_ge += scale * g;
                terms.reg_identity = loss_reg(tgt.z_id, &g);
                if (s.terms.enc) g_id += scale * g;
            }
            reports[idx] = loss_total(terms, ex.branch(), w);

            // L_BR reaches decoder parameters and the skinning path only; z_GE, z_ID and c see g_main alone.
            Decoder::InputGradient main_in;
            Eigen::MatrixXd g_zle_weights;
            if (g_br.size() != 0) {
                const auto full = model.decoder.backward(dcache, T.features, tgt.c, tgt.z_id, z_le, g_main + g_br,
                                                         &grad.decoder);
                main_in = model.decoder.backward(dcache, T.features, tgt.c, tgt.z_id, z_le, g_main, nullptr);
                g_zle_weights = full.z_le;
            } else {
                main_in = model.decoder.backward(dcache, T.features, tgt.c, tgt.z_id, z_le, g_main, &grad.decoder);
                g_zle_weights = main_in.z_le;
            }
            g_c += main_in.c;
            g_id += main_in.z_id;
            if (skin) {
                g_ge += main_in.z_le.cwiseProduct(tgt.weights).colwise().sum().transpose();
                g_weights += (g_zle_weights.array().rowwise() * z_ge.transpose().array()).matrix();
            } else {
                g_ge += main_in.z_le.colwise().sum().transpose();
            }
            Eigen::VectorXd g_c_s = Eigen::VectorXd::Zero(k_code_dim);
            model.expression_encoder.backward(S, expr_cache, g_ge, &grad.expression_encoder, &g_c_s);
            model.descriptor.backward(S, g_c_s, &grad.descriptor);
        }

        if (skin) {
            const Eigen::MatrixXd g_probs = model.skinning_block.backward(tgt.block_cache, g_weights, &grad.skinning_block);
            g_logits += tgt.field.logits_gradient(g_probs);
            model.skinning_encoder.backward(T, tgt.skinning_cache, g_logits, &grad.skinning_encoder, &g_c);
        }
        model.identity_encoder.backward(T, tgt.identity_cache, g_id, &grad.identity_encoder, &g_c);
        model.descriptor.backward(T, g_c, &grad.descriptor);
    }
    return reports;
}

AdamState::AdamState(const Model& model) : m_first(model.zeros_like()), m_second(model.zeros_like()) {}

void AdamState::apply(Model& model, Model& grad, double lr, const AdamOptions& o, long step)
{
    auto params = model.parameters();
    auto grads = grad.parameters();
    auto first = m_first.parameters();
    auto second = m_second.parameters();
    if (params.size() != grads.size() || params.size() != first.size() || params.size() != second.size()) {
        throw Error("optimizer state does not match the model");
    }
    const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i].map().array();
        auto g = grads[i].map().array();
        auto m = first[i].map().array();
        auto v = second[i].map().array();
        m = o.beta1 * m + (1.0 - o.beta1) * g;
        v = o.beta2 * v + (1.0 - o.beta2) * g.square();
        p -= lr * (m / c1) / ((v / c2).sqrt() + o.eps);
    }
}

void AdamState::save(ArrayStore& store) const
{
    for (const auto& p : const_cast<Model&>(m_first).parameters()) store.put("adam.m/" + p.name, Eigen::MatrixXd(p.map()));
    for (const auto& p : const_cast<Model&>(m_second).parameters()) store.put("adam.v/" + p.name, Eigen::MatrixXd(p.map()));
}

void AdamState::load(const ArrayStore& store)
{
    const std::pair<Model*, std::string> parts[] = {{&m_first, "adam.m/"}, {&m_second, "adam.v/"}};
    for (const auto& [model, prefix] : parts) {
        for (const auto& p : model->parameters()) {
            const std::string key = prefix + p.name;
            if (!store.contains(key)) throw Error("checkpoint is missing optimizer entry '" + key + "'");
            const Eigen::MatrixXd value = store.matrix(key);
            if (value.rows() != p.rows || value.cols() != p.cols) throw Error("optimizer entry '" + key + "' has the wrong shape");
            p.map() = value;
        }
    }
}

ArrayStore TrainState::to_store() const
{
    ArrayStore store = model.to_store();
    adam.save(store);
    store.put("step", std::vector<std::int64_t>{step});
    store.put_text("train_config", config.to_json().dump());
    store.put_text("config_digest", config.digest());
    store.put_text("dataset_digest", dataset_digest);
    nlohmann::json manifest = {{"step", step},
                               {"config_digest", config.digest()},
                               {"dataset_digest", dataset_digest},
                               {"model_digest", model.digest()},
                               {"model", model.config.to_json()},
                               {"parameter_count", const_cast<Model&>(model).parameter_count()}};
    store.put_text("manifest.json", manifest.dump(2));
    return store;
}

TrainState TrainState::from_store(const ArrayStore& store)
{
    TrainState s;
    s.config = TrainConfig::from_json(nlohmann::json::parse(store.text("train_config")));
    s.model = Model::from_store(store);
    s.adam = AdamState(s.model);
    s.adam.load(store);
    s.step = static_cast<long>(store.ints("step").at(0));
    s.dataset_digest = store.text("dataset_digest");
    if (store.text("config_digest") != s.config.digest()) throw Error("checkpoint config digest is inconsistent");
    return s;
}

TrainState init_train_state(const TrainConfig& config, const std::string& dataset_digest)
{
    config.validate();
    TrainState s;
    s.config = config;
    s.model = Model::init(config.model, config.seed);
    s.adam = AdamState(s.model);
    s.dataset_digest = dataset_digest;
    return s;
}

LossReport training_step(TrainState& state, const std::vector<TrainingExample>& batch, const Eigen::MatrixXd& basis)
{
    const nn::GemmPrecisionScope precision(state.config.fast_gemm ? nn::GemmPrecision::f32 : nn::GemmPrecision::f64);
    Model grad = state.model.zeros_like();
    const auto reports = accumulate_gradients(state.model, batch, gradient_settings(state.config, basis), grad);
    LossReport mean = mean_report(reports);
    if (!std::isfinite(mean.total())) {
        nlohmann::json dump = nlohmann::json::array();
        for (std::size_t i = 0; i < reports.size(); ++i) {
            auto j = reports[i].to_json();
            j["example"] = batch[i].id;
            dump.push_back(j);
        }
        throw Error("non-finite loss at step " + std::to_string(state.step) + ": " + dump.dump());
    }
    state.adam.apply(state.model, grad, state.config.learning_rate, state.config.adam, state.step + 1);
    ++state.step;
    return mean;
}

TrainingExample make_self_example(const Dataset& dataset, const Sample& sample, ContextCache& contexts, bool supervised)
{
    TrainingExample ex;
    ex.id = sample.id;
    ex.source = contexts.get(dataset.sample_mesh(sample));
    ex.target = contexts.get(dataset.neutral_mesh(sample.identity));
    ex.gt = dataset.sample_vertices(sample);
    if (sample.has_blendshape_gt) {
        ex.w_exp = sample.w_exp;
        ex.w_id = dataset.identity(sample.identity);
        if (supervised) ex.labels = dataset.segmentation.labels;
    }
    return ex;
}

std::vector<TrainingExample> make_batch(const Dataset& dataset, const TrainConfig& config, long step,
                                        ContextCache& contexts)
{
    const auto train_ids = dataset.identities_in(Split::train);
    std::vector<std::size_t> ict;
    std::vector<std::size_t> scan;
    for (std::size_t i : dataset.samples_in(Split::train)) {
        (dataset.samples[i].has_blendshape_gt ? ict : scan).push_back(i);
    }
    if (ict.empty() && scan.empty()) throw InvalidInput("training split holds no samples");
    const double p_scan = scan.empty() ? 0.0 : (ict.empty() ? 1.0 : 1.0 / (1.0 + config.ict_scan_ratio));

    const std::vector<bool> supervised_samples = supervised_mask(dataset, config.supervision_fraction);
    auto rng = step_rng(config.seed, step);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const int step_target = train_ids[std::uniform_int_distribution<std::size_t>(0, train_ids.size() - 1)(rng)];
    std::vector<TrainingExample> batch;
    for (int b = 0; b < config.batch_size; ++b) {
        const bool use_scan = unit(rng) < p_scan;
        const auto& pool = use_scan ? scan : ict;
        const std::size_t index = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
        const auto& sample = dataset.samples[index];
        const bool supervised = supervised_samples[index];
        if (use_scan || !config.cross_identity || step_target == sample.identity) {
            batch.push_back(make_self_example(dataset, sample, contexts, supervised));
            continue;
        }
        TrainingExample ex;
        ex.id = sample.id;
        ex.source = contexts.get(dataset.sample_mesh(sample));
        ex.target = contexts.get(dataset.neutral_mesh(step_target));
        ex.gt = dataset.expression_vertices(step_target, sample.w_exp);
        ex.w_exp = sample.w_exp;
        ex.w_id = dataset.identity(step_target);
        if (supervised) ex.labels = dataset.segmentation.labels;
        batch.push_back(std::move(ex));
    }
    return batch;
}

double validation_mse(const Model& model, const Dataset& dataset, Split split, int count, ContextCache& contexts)
{
    std::vector<std::size_t> pool;
    for (std::size_t i : dataset.samples_in(split)) {
        if (dataset.samples[i].has_blendshape_gt) pool.push_back(i);
    }
    if (pool.empty() || count <= 0) return std::nan("");
    const std::size_t take = std::min(pool.size(), static_cast<std::size_t>(count));
    std::map<int, PreparedTarget> prepared;
    double sum = 0.0;
    for (std::size_t k = 0; k < take; ++k) {
        const auto& sample = dataset.samples[pool[k * pool.size() / take]];
        auto it = prepared.find(sample.identity);
        if (it == prepared.end()) {
            it = prepared.emplace(sample.identity, model.prepare_target(contexts.get(dataset.neutral_mesh(sample.identity))))
                     .first;
        }
        const Mesh out = model.retarget(*contexts.get(dataset.sample_mesh(sample)), it->second);
        sum += mse(out.vertices(), dataset.sample_vertices(sample));
    }
    return sum / static_cast<double>(take);
}

TrainResult train(const Dataset& dataset, const TrainConfig& config, ContextCache& contexts, const TrainOptions& options)
{
    config.validate();
    if (config.model.segments != dataset.segmentation.num_segments()) {
        throw InvalidInput("model expects " + std::to_string(config.model.segments) + " segments, dataset has " +
                           std::to_string(dataset.segmentation.num_segments()));
    }
    if (config.model.semantic_expression != dataset.rig.num_expression() ||
        config.model.semantic_identity != dataset.rig.num_identity()) {
        throw InvalidInput("model semantic dims do not match the rig (K=" + std::to_string(dataset.rig.num_expression()) +
                           ", J=" + std::to_string(dataset.rig.num_identity()) + ")");
    }
    const std::string data_digest = dataset.digest();
    TrainResult result;
    if (options.resume_from) {
        result.state = TrainState::from_store(ArrayStore::load(*options.resume_from));
        if (result.state.config.digest() != config.digest()) {
            throw Error("config digest mismatch on resume: checkpoint " + result.state.config.digest() + ", config " +
                        config.digest());
        }
        if (result.state.dataset_digest != data_digest) {
            throw Error("dataset digest mismatch on resume: checkpoint " + result.state.dataset_digest + ", dataset " +
                        data_digest);
        }
        result.state.config = config;
    } else {
        result.state = init_train_state(config, data_digest);
    }
    auto& state = result.state;

    std::ofstream log;
    if (options.output_dir) {
        std::filesystem::create_directories(*options.output_dir / "checkpoints");
        log.open(*options.output_dir / "train_log.jsonl", options.resume_from ? std::ios::app : std::ios::trunc);
        if (!log) throw Error("cannot write training log in " + options.output_dir->string());
    }
    auto emit = [&](const nlohmann::json& j) {
        result.log.push_back(j);
        if (log.is_open()) log << j.dump() << "\n" << std::flush;
        if (!options.quiet) std::cerr << j.dump() << "\n";
    };
    auto save = [&](const std::filesystem::path& path) {
        state.to_store().save(path);
        return path;
    };

    const Eigen::MatrixXd& basis = dataset.rig.expression_deltas;
    double best_val = std::numeric_limits<double>::infinity();
    int stale = 0;
    while (state.step < config.steps) {
        const auto batch = make_batch(dataset, config, state.step, contexts);
        const LossReport report = training_step(state, batch, basis);
        nlohmann::json line = report.to_json();
        line["step"] = state.step;
        emit(line);
        if (options.on_step) options.on_step(state.step, report);

        if (config.validate_every > 0 && state.step % config.validate_every == 0 &&
            !dataset.identities_in(Split::val).empty()) {
            const double v = validation_mse(state.model, dataset, Split::val, config.validation_samples, contexts);
            emit({{"step", state.step}, {"val_mse", v}});
            if (v < best_val) {
                best_val = v;
                stale = 0;
            } else if (config.early_stop && ++stale >= config.patience) {
                emit({{"step", state.step}, {"early_stop", true}});
                break;
            }
        }
        if (options.output_dir && config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0) {
            save(*options.output_dir / "checkpoints" / checkpoint_name(state.step));
        }
    }
    if (options.output_dir) result.final_checkpoint = save(*options.output_dir / "final.exna");
    return result;
}

std::string to_string(Variant v)
{
    switch (v) {
    case Variant::no_skinning: return "no-skinning";
    case Variant::no_bp: return "no-bp";
    case Variant::no_br: return "no-br";
    case Variant::full: return "full";
    }
    return "full";
}

const std::vector<Variant>& all_variants()
{
    static const std::vector<Variant> v{Variant::no_skinning, Variant::no_bp, Variant::no_br, Variant::full};
    return v;
}

TrainConfig variant_config(const TrainConfig& base, Variant v)
{
    TrainConfig c = base;
    c.use_skinning_encoder = v != Variant::no_skinning;
    c.model.use_skinning_encoder = c.use_skinning_encoder;
    c.use_bp = v != Variant::no_bp;
    c.use_br = v != Variant::no_br;
    return c;
}

std::vector<AblationRun> ablation_suite(const Dataset& dataset, const TrainConfig& base, ContextCache& contexts,
                                        const std::optional<std::filesystem::path>& output_dir)
{
    std::vector<AblationRun> runs;
    for (Variant v : all_variants()) {
        TrainOptions opts;
        if (output_dir) opts.output_dir = *output_dir / to_string(v);
        auto r = train(dataset, variant_config(base, v), contexts, opts);
        runs.push_back({v, std::move(r.state), r.final_checkpoint});
    }
    return runs;
}

} // namespace exprclone
