#pragma once

#include <exprclone/dataset.hpp>
#include <exprclone/encoders.hpp>
#include <exprclone/model.hpp>
#include <exprclone/rig.hpp>
#include <exprclone/training.hpp>

#include <Eigen/Core>
#include <Eigen/QR>
#include <json.hpp>

#include <string>
#include <vector>

namespace exprclone {

struct EvalOptions {
    bool align = true;
    /// Evaluate at most this many samples, evenly spaced over the split; 0 means all.
    int max_samples = 0;
};

/// Vertex MSE after an optional Procrustes fit of `pred` onto `gt`.
double retarget_error(const Vertices& pred, const Vertices& gt, bool align);

struct SampleError {
    std::string id;
    int identity = 0;
    double mse = 0.0;
    double unaligned_mse = 0.0;
};

struct SelfRetargetReport {
    bool aligned = true;
    std::vector<SampleError> samples;
    double mean = 0.0;
};

/// Retargets every sample onto its own identity's neutral and scores it against the sample mesh.
SelfRetargetReport eval_self_retarget(const Model& model, const Dataset& dataset, Split split, ContextCache& contexts,
                                      const EvalOptions& options = {});

struct SegmentReport {
    Eigen::VectorXd per_segment;
    double segment_mean = 0.0;
    double whole_mesh = 0.0;
    bool aligned = false;

    nlohmann::json to_json() const;
};

/// Alignment, when on, is fitted on all vertices before the per-segment split.
SegmentReport eval_segment_mse(const Vertices& pred, const Vertices& gt, const SegmentationMap& seg, bool align);

struct InvRigSolution {
    Eigen::VectorXd w;
    bool rank_deficient = false;
    /// Projected-gradient iterations; 0 for the unconstrained solve.
    int iterations = 0;
    /// Vertex MSE of the reconstruction.
    double mse = 0.0;
};

/// Least squares over the expression basis of one rig. Factorizes once, solves many.
class InvRigSolver {
public:
    explicit InvRigSolver(const BlendshapeRig& rig);

    /// min_w |neutral_id + B w - target|^2, optionally with w in [0, 1]^K.
    InvRigSolution solve(const Vertices& target, const Eigen::VectorXd& w_id, bool box = false) const;
    bool rank_deficient() const { return m_rank < m_rig->num_expression(); }

private:
    const BlendshapeRig* m_rig;
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> m_cod;
    Eigen::MatrixXd m_gram;
    double m_lipschitz = 0.0;
    Eigen::Index m_rank = 0;
};

InvRigSolution least_squares_invrig(const BlendshapeRig& rig, const Vertices& target, const Eigen::VectorXd& w_id,
                                    bool box = false);

struct InvRigSample {
    std::string id;
    double encoder_mse = 0.0;
    double oracle_mse = 0.0;
};

struct InvRigReport {
    double encoder_mse = 0.0;
    double oracle_mse = 0.0;
    /// encoder / oracle; +inf when the oracle is exact.
    double ratio = 0.0;
    /// oracle <= encoder + 1e-9 held on every sample.
    bool bound_holds = true;
    bool rank_deficient = false;
    std::vector<InvRigSample> samples;

    nlohmann::json to_json() const;
};

/// Reconstruction from the semantic slice of z_GE applied to the rig basis.
Vertices encoder_reconstruction(const Model& model, const BlendshapeRig& rig, const MeshContext& source,
                                const Eigen::VectorXd& w_id);

/// ICT-style samples only; throws if the split holds scan-style samples.
InvRigReport eval_inverse_rig(const Model& model, const Dataset& dataset, Split split, ContextCache& contexts,
                              const EvalOptions& options = {}, bool box = false);

struct AblationRow {
    std::string variant;
    std::string checkpoint_digest;
    double self_retarget_mse = 0.0;
    double segment_mean_mse = 0.0;
    double invrig_mse = 0.0;
};

struct AblationTable {
    std::string split;
    std::vector<AblationRow> rows;

    const AblationRow& row(const std::string& variant) const;
    nlohmann::json to_json() const;
    std::string to_text() const;
};

/// Scores one checkpoint under the three ablation protocols.
AblationRow ablation_row(const std::string& variant, const Model& model, const Dataset& dataset, Split split,
                         ContextCache& contexts, const EvalOptions& options = {});

/// Requires one run per variant, all trained on `dataset` from configs that differ only by the variant flags.
AblationTable compare_ablations(const std::vector<AblationRun>& runs, const Dataset& dataset, Split split,
                                ContextCache& contexts, const EvalOptions& options = {});

/// eval-report.json for a single checkpoint: per-sample self-retarget, segment and inverse-rig errors.
nlohmann::json evaluation_report(const Model& model, const std::string& checkpoint_digest, const Dataset& dataset,
                                 Split split, ContextCache& contexts, const EvalOptions& options = {});

} // namespace exprclone
