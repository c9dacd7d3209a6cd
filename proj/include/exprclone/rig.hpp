#pragma once

#include <exprclone/mesh.hpp>

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace exprclone {

inline constexpr int k_ict_identity_count = 100;
inline constexpr int k_ict_expression_count = 53;

///
/// Delta-blendshape rig: v = v0 + sum_j w_j (v_j - v0) + sum_k w_k (v_k - v0).
///
/// Deltas are stored as 3N x count matrices with vertex-major xyz interleaving, so
/// column k reshaped to N x 3 is the offset field of basis k.
///
struct BlendshapeRig {
    Mesh neutral;
    Eigen::MatrixXd identity_deltas;
    Eigen::MatrixXd expression_deltas;
    std::vector<std::string> expression_names;

    int num_identity() const { return static_cast<int>(identity_deltas.cols()); }
    int num_expression() const { return static_cast<int>(expression_deltas.cols()); }
    Eigen::Index num_vertices() const { return neutral.num_vertices(); }

    /// Checks finiteness, magnitude bound and name uniqueness.
    void validate() const;

    /// Digest over neutral, deltas and names.
    std::string digest() const;
};

struct SegmentationMap {
    std::vector<int> labels;
    std::vector<std::string> names;

    int num_segments() const { return static_cast<int>(names.size()); }
    std::vector<int> counts() const;
    void validate(Eigen::Index num_vertices) const;
};

struct ToyRigOptions {
    std::uint64_t seed = 1;
    int subdivision = 3;
    int identity_count = k_ict_identity_count;
    int expression_count = k_ict_expression_count;
    int segment_count = 20;
};

/// Procedural head-shaped rig with localized overlapping expression bases.
std::pair<BlendshapeRig, SegmentationMap> make_toy_rig(const ToyRigOptions& options);

/// Delta-blendshape evaluation. Lengths must match the rig.
Vertices evaluate_rig(const BlendshapeRig& rig, const Eigen::VectorXd& w_id, const Eigen::VectorXd& w_exp);

/// Reshape a 3N column into N x 3.
Vertices offsets_from_column(const Eigen::VectorXd& column);
Eigen::VectorXd column_from_offsets(const Vertices& offsets);

/// Expression offset field (N x 3) for coefficients applied to the expression basis.
Vertices expression_offsets(const BlendshapeRig& rig, const Eigen::VectorXd& w_exp);

Eigen::VectorXd sample_expression_uniform(int count, std::mt19937_64& rng);
Eigen::VectorXd sample_expression_onehot(int count, int index);
Eigen::VectorXd sample_identity_normal(int count, std::mt19937_64& rng, double sigma = 1.0);

/// Default FACS-style names for the first 53 expression dims.
const std::vector<std::string>& default_expression_names();

/// Rig container directory: neutral.obj, identity_deltas.exna, expression_deltas.exna,
/// manifest.json and labels.exna.
void export_rig(const BlendshapeRig& rig, const SegmentationMap& seg, const std::filesystem::path& dir);
std::pair<BlendshapeRig, SegmentationMap> load_external_rig(const std::filesystem::path& dir);

} // namespace exprclone
