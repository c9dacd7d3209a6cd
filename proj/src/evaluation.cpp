#include <exprclone/alignment.hpp>
#include <exprclone/error.hpp>
#include <exprclone/evaluation.hpp>
#include <exprclone/hashing.hpp>

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <set>
#include <sstream>

namespace exprclone {

namespace {

constexpr double k_bound_slack = 1e-9;
constexpr double k_box_tolerance = 1e-12;
constexpr int k_box_max_iterations = 200000;

std::vector<std::size_t> pick(const std::vector<std::size_t>& pool, int max_samples)
{
    if (max_samples <= 0 || pool.size() <= static_cast<std::size_t>(max_samples)) return pool;
    std::vector<std::size_t> out;
    const std::size_t take = static_cast<std::size_t>(max_samples);
    for (std::size_t k = 0; k < take; ++k) out.push_back(pool[k * pool.size() / take]);
    return out;
}

class TargetTable {
public:
    TargetTable(const Model& model, const Dataset& dataset, ContextCache& contexts)
        : m_model(model), m_dataset(dataset), m_contexts(contexts)
    {
    }

    const PreparedTarget& get(int identity)
    {
        auto it = m_prepared.find(identity);
        if (it == m_prepared.end()) {
            auto ctx = m_contexts.get(m_dataset.neutral_mesh(identity));
            it = m_prepared.emplace(identity, m_model.prepare_target(std::move(ctx))).first;
        }
        return it->second;
    }

private:
    const Model& m_model;
    const Dataset& m_dataset;
    ContextCache& m_contexts;
    std::map<int, PreparedTarget> m_prepared;
};

double ratio_of(double encoder, double oracle)
{
    if (oracle > 0.0) return encoder / oracle;
    return encoder > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
}

nlohmann::json finite_or_null(double v)
{
    return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

} // namespace

double retarget_error(const Vertices& pred, const Vertices& gt, bool align)
{
    if (pred.rows() != gt.rows()) throw InvalidInput("prediction and ground truth differ in vertex count");
    if (!align) return mse(pred, gt);
    return mse(procrustes_align(pred, gt).aligned, gt);
}

SelfRetargetReport eval_self_retarget(const Model& model, const Dataset& dataset, Split split, ContextCache& contexts,
                                      const EvalOptions& options)
{
    SelfRetargetReport report;
    report.aligned = options.align;
    TargetTable targets(model, dataset, contexts);
    for (std::size_t i : pick(dataset.samples_in(split), options.max_samples)) {
        const Sample& sample = dataset.samples[i];
        const Mesh out = model.retarget(*contexts.get(dataset.sample_mesh(sample)), targets.get(sample.identity));
        const Vertices gt = dataset.sample_vertices(sample);
        SampleError e;
        e.id = sample.id;
        e.identity = sample.identity;
        e.unaligned_mse = mse(out.vertices(), gt);
        e.mse = options.align ? retarget_error(out.vertices(), gt, true) : e.unaligned_mse;
        report.samples.push_back(std::move(e));
    }
    if (report.samples.empty()) throw InvalidInput("split " + to_string(split) + " holds no samples");
    for (const auto& e : report.samples) report.mean += e.mse;
    report.mean /= static_cast<double>(report.samples.size());
    return report;
}

nlohmann::json SegmentReport::to_json() const
{
    return {{"per_segment", std::vector<double>(per_segment.data(), per_segment.data() + per_segment.size())},
            {"segment_mean", segment_mean},
            {"whole_mesh", whole_mesh},
            {"aligned", aligned}};
}

SegmentReport eval_segment_mse(const Vertices& pred, const Vertices& gt, const SegmentationMap& seg, bool align)
{
    if (pred.rows() != gt.rows()) throw InvalidInput("prediction and ground truth differ in vertex count");
    seg.validate(gt.rows());
    const Vertices p = align ? procrustes_align(pred, gt).aligned : pred;
    const int segments = seg.num_segments();
    Eigen::VectorXd sums = Eigen::VectorXd::Zero(segments);
    Eigen::VectorXd counts = Eigen::VectorXd::Zero(segments);
    for (Eigen::Index v = 0; v < gt.rows(); ++v) {
        const auto l = static_cast<Eigen::Index>(seg.labels[static_cast<std::size_t>(v)]);
        sums[l] += (p.row(v) - gt.row(v)).squaredNorm();
        counts[l] += 1.0;
    }
    SegmentReport r;
    r.aligned = align;
    r.per_segment = sums.cwiseQuotient(counts);
    r.segment_mean = r.per_segment.mean();
    r.whole_mesh = mse(p, gt);
    return r;
}

InvRigSolver::InvRigSolver(const BlendshapeRig& rig) : m_rig(&rig), m_cod(rig.expression_deltas)
{
    m_rank = m_cod.rank();
    m_gram = rig.expression_deltas.transpose() * rig.expression_deltas;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m_gram, Eigen::EigenvaluesOnly);
    m_lipschitz = eig.eigenvalues().maxCoeff();
}

InvRigSolution InvRigSolver::solve(const Vertices& target, const Eigen::VectorXd& w_id, bool box) const
{
    const BlendshapeRig& rig = *m_rig;
    if (target.rows() != rig.num_vertices()) {
        throw InvalidInput("inverse rig target has " + std::to_string(target.rows()) + " vertices, rig has " +
                           std::to_string(rig.num_vertices()));
    }
    const Eigen::Index k = rig.num_expression();
    const Vertices neutral_id = evaluate_rig(rig, w_id, Eigen::VectorXd::Zero(k));
    const Eigen::VectorXd b = column_from_offsets(target - neutral_id);

    InvRigSolution s;
    s.rank_deficient = rank_deficient();
    s.w = m_cod.solve(b);
    if (box) {
        const Eigen::VectorXd btb = rig.expression_deltas.transpose() * b;
        auto objective = [&](const Eigen::VectorXd& w) { return w.dot(m_gram * w) - 2.0 * w.dot(btb); };
        s.w = s.w.cwiseMax(0.0).cwiseMin(1.0);
        const double n = static_cast<double>(rig.num_vertices());
        double f = objective(s.w);
        const double step = m_lipschitz > 0.0 ? 1.0 / m_lipschitz : 0.0;
        while (step > 0.0 && s.iterations < k_box_max_iterations) {
            const Eigen::VectorXd next = (s.w - step * (m_gram * s.w - btb)).cwiseMax(0.0).cwiseMin(1.0);
            const double f_next = objective(next);
            ++s.iterations;
            if (f_next > f) break;
            const double improvement = (f - f_next) / n;
            s.w = next;
            f = f_next;
            if (improvement < k_box_tolerance) break;
        }
    }
    s.mse = mse(neutral_id + expression_offsets(rig, s.w), target);
    return s;
}

InvRigSolution least_squares_invrig(const BlendshapeRig& rig, const Vertices& target, const Eigen::VectorXd& w_id,
                                    bool box)
{
    return InvRigSolver(rig).solve(target, w_id, box);
}

nlohmann::json InvRigReport::to_json() const
{
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& s : samples) rows.push_back({{"id", s.id}, {"encoder_mse", s.encoder_mse}, {"oracle_mse", s.oracle_mse}});
    return {{"encoder_mse", encoder_mse},
            {"oracle_mse", oracle_mse},
            {"ratio", finite_or_null(ratio)},
            {"bound_holds", bound_holds},
            {"rank_deficient", rank_deficient},
            {"samples", rows}};
}

Vertices encoder_reconstruction(const Model& model, const BlendshapeRig& rig, const MeshContext& source,
                                const Eigen::VectorXd& w_id)
{
    const Eigen::VectorXd z = model.encode_expression(source);
    const Eigen::Index k = rig.num_expression();
    if (z.size() < k) throw InvalidInput("expression code is shorter than the rig basis");
    return evaluate_rig(rig, w_id, z.head(k));
}

InvRigReport eval_inverse_rig(const Model& model, const Dataset& dataset, Split split, ContextCache& contexts,
                              const EvalOptions& options, bool box)
{
    const auto pool = dataset.samples_in(split);
    for (std::size_t i : pool) {
        if (!dataset.samples[i].has_blendshape_gt) {
            throw InvalidInput("inverse rigging needs blendshape ground truth; split " + to_string(split) +
                               " holds scan-style sample " + dataset.samples[i].id);
        }
    }
    if (pool.empty()) throw InvalidInput("split " + to_string(split) + " holds no samples");
    const InvRigSolver solver(dataset.rig);
    InvRigReport report;
    report.rank_deficient = solver.rank_deficient();
    for (std::size_t i : pick(pool, options.max_samples)) {
        const Sample& sample = dataset.samples[i];
        const Vertices source = dataset.sample_vertices(sample);
        const Eigen::VectorXd w_id = dataset.identity(sample.identity);
        InvRigSample row;
        row.id = sample.id;
        row.encoder_mse =
            mse(encoder_reconstruction(model, dataset.rig, *contexts.get(dataset.sample_mesh(sample)), w_id), source);
        row.oracle_mse = solver.solve(source, w_id, box).mse;
        if (row.oracle_mse > row.encoder_mse + k_bound_slack) report.bound_holds = false;
        report.encoder_mse += row.encoder_mse;
        report.oracle_mse += row.oracle_mse;
        report.samples.push_back(std::move(row));
    }
    const double count = static_cast<double>(report.samples.size());
    report.encoder_mse /= count;
    report.oracle_mse /= count;
    report.ratio = ratio_of(report.encoder_mse, report.oracle_mse);
    return report;
}

const AblationRow& AblationTable::row(const std::string& variant) const
{
    for (const auto& r : rows) {
        if (r.variant == variant) return r;
    }
    throw InvalidInput("ablation table has no row '" + variant + "'");
}

nlohmann::json AblationTable::to_json() const
{
    nlohmann::json out_rows = nlohmann::json::array();
    Fnv1a h;
    for (const auto& r : rows) {
        h.update(r.checkpoint_digest);
        out_rows.push_back({{"variant", r.variant},
                            {"checkpoint-digest", r.checkpoint_digest},
                            {"self_retarget_mse", r.self_retarget_mse},
                            {"segment_mean_mse", r.segment_mean_mse},
                            {"invrig_mse", r.invrig_mse}});
    }
    return {{"protocol", "ablation"},
            {"checkpoint-digest", h.hex()},
            {"split", split},
            {"columns", {"self_retarget_mse", "segment_mean_mse", "invrig_mse"}},
            {"rows", out_rows}};
}

std::string AblationTable::to_text() const
{
    std::ostringstream out;
    char line[160];
    std::snprintf(line, sizeof line, "%-12s %16s %16s %16s\n", "variant", "self-retarget", "segment-mean", "invrig");
    out << line;
    for (const auto& r : rows) {
        std::snprintf(line, sizeof line, "%-12s %16.6e %16.6e %16.6e\n", r.variant.c_str(), r.self_retarget_mse,
                      r.segment_mean_mse, r.invrig_mse);
        out << line;
    }
    return out.str();
}

AblationRow ablation_row(const std::string& variant, const Model& model, const Dataset& dataset, Split split,
                         ContextCache& contexts, const EvalOptions& options)
{
    AblationRow row;
    row.variant = variant;
    row.checkpoint_digest = model.digest();
    TargetTable targets(model, dataset, contexts);
    const auto chosen = pick(dataset.samples_in(split), options.max_samples);
    if (chosen.empty()) throw InvalidInput("split " + to_string(split) + " holds no samples");
    for (std::size_t i : chosen) {
        const Sample& sample = dataset.samples[i];
        const Mesh out = model.retarget(*contexts.get(dataset.sample_mesh(sample)), targets.get(sample.identity));
        const Vertices gt = dataset.sample_vertices(sample);
        row.self_retarget_mse += retarget_error(out.vertices(), gt, options.align);
        row.segment_mean_mse += eval_segment_mse(out.vertices(), gt, dataset.segmentation, options.align).segment_mean;
    }
    row.self_retarget_mse /= static_cast<double>(chosen.size());
    row.segment_mean_mse /= static_cast<double>(chosen.size());
    row.invrig_mse = eval_inverse_rig(model, dataset, split, contexts, options).encoder_mse;
    return row;
}

AblationTable compare_ablations(const std::vector<AblationRun>& runs, const Dataset& dataset, Split split,
                                ContextCache& contexts, const EvalOptions& options)
{
    if (runs.size() != all_variants().size()) {
        throw InvalidInput("ablation comparison needs " + std::to_string(all_variants().size()) + " runs, got " +
                           std::to_string(runs.size()));
    }
    const AblationRun* full = nullptr;
    std::set<Variant> seen;
    for (const auto& r : runs) {
        if (!seen.insert(r.variant).second) throw InvalidInput("variant " + to_string(r.variant) + " appears twice");
        if (r.variant == Variant::full) full = &r;
    }
    const std::string data_digest = dataset.digest();
    for (const auto& r : runs) {
        if (r.state.dataset_digest != data_digest) {
            throw Error("checkpoint for " + to_string(r.variant) + " was trained on dataset " + r.state.dataset_digest +
                        ", evaluating on " + data_digest);
        }
        const std::string expected = variant_config(full->state.config, r.variant).digest();
        if (r.state.config.digest() != expected) {
            throw Error("config digest mismatch for " + to_string(r.variant) + ": " + r.state.config.digest() +
                        " vs expected " + expected);
        }
    }
    AblationTable table;
    table.split = to_string(split);
    for (Variant v : all_variants()) {
        for (const auto& r : runs) {
            if (r.variant == v) table.rows.push_back(ablation_row(to_string(v), r.state.model, dataset, split, contexts, options));
        }
    }
    return table;
}

nlohmann::json evaluation_report(const Model& model, const std::string& checkpoint_digest, const Dataset& dataset,
                                 Split split, ContextCache& contexts, const EvalOptions& options)
{
    const auto self = eval_self_retarget(model, dataset, split, contexts, options);
    TargetTable targets(model, dataset, contexts);
    nlohmann::json rows = nlohmann::json::array();
    double segment_mean = 0.0;
    for (const auto& e : self.samples) {
        const auto it = std::find_if(dataset.samples.begin(), dataset.samples.end(),
                                     [&](const Sample& s) { return s.id == e.id; });
        const Mesh out = model.retarget(*contexts.get(dataset.sample_mesh(*it)), targets.get(it->identity));
        const auto seg = eval_segment_mse(out.vertices(), dataset.sample_vertices(*it), dataset.segmentation, options.align);
        segment_mean += seg.segment_mean;
        rows.push_back({{"id", e.id},
                        {"identity", e.identity},
                        {"self_retarget_mse", e.mse},
                        {"unaligned_mse", e.unaligned_mse},
                        {"segment", seg.to_json()}});
    }
    nlohmann::json report = {{"protocol", "self-retarget"},
                             {"checkpoint-digest", checkpoint_digest},
                             {"split", to_string(split)},
                             {"aligned", options.align},
                             {"mean_self_retarget_mse", self.mean},
                             {"mean_segment_mse", segment_mean / static_cast<double>(self.samples.size())},
                             {"rows", rows}};
    bool ict_only = true;
    for (std::size_t i : dataset.samples_in(split)) ict_only = ict_only && dataset.samples[i].has_blendshape_gt;
    if (ict_only) report["inverse_rig"] = eval_inverse_rig(model, dataset, split, contexts, options).to_json();
    return report;
}

} // namespace exprclone
