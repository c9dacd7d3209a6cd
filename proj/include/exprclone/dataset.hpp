#pragma once

#include <exprclone/rig.hpp>

#include <Eigen/Core>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace exprclone {

inline constexpr int k_default_train_identities = 100;
inline constexpr int k_default_val_identities = 1;
inline constexpr int k_default_test_identities = 10;

struct DatasetConfig {
    std::uint64_t seed = 1;
    int train_identities = k_default_train_identities;
    int val_identities = k_default_val_identities;
    int test_identities = k_default_test_identities;
    int uniform_per_identity = 147;
    bool include_onehot = true;
    int scan_per_identity = 0;
    double identity_sigma = 1.0;
    double scan_amplitude = 0.01;
    /// Counts that do not add up to the 111-identity default are rejected unless set.
    bool allow_custom_counts = false;

    nlohmann::json to_json() const;
    static DatasetConfig from_json(const nlohmann::json& j);
    void validate() const;
    int total_identities() const { return train_identities + val_identities + test_identities; }
};

enum class Split { train, val, test };

std::string to_string(Split split);
Split split_from_string(const std::string& s);

enum class SampleKind { uniform, onehot, scan };

struct Sample {
    std::string id;
    int identity = 0;
    SampleKind kind = SampleKind::uniform;
    Eigen::VectorXd w_exp;
    /// False for scan-style samples, which carry no blendshape ground truth.
    bool has_blendshape_gt = true;
};

struct Dataset {
    BlendshapeRig rig;
    SegmentationMap segmentation;
    DatasetConfig config;
    Eigen::MatrixXd identity_coefficients; // identities x J
    std::vector<Split> split;              // per identity
    std::vector<Sample> samples;
    Eigen::MatrixXd scan_basis;            // N x 8 smooth noise basis, empty without scan samples

    int num_identities() const { return static_cast<int>(split.size()); }
    Eigen::VectorXd identity(int index) const;
    std::vector<int> identities_in(Split s) const;
    std::vector<std::size_t> samples_in(Split s) const;

    Vertices neutral_vertices(int identity) const;
    /// Rig evaluation for an identity and expression (no scan perturbation).
    Vertices expression_vertices(int identity, const Eigen::VectorXd& w_exp) const;
    /// The sample's own mesh vertices, including the scan perturbation when applicable.
    Vertices sample_vertices(const Sample& sample) const;
    Mesh neutral_mesh(int identity) const;
    Mesh sample_mesh(const Sample& sample) const;

    /// Deterministic description of the sample list and split.
    nlohmann::json manifest() const;
    std::string digest() const;
};

Dataset build_dataset(const BlendshapeRig& rig, const SegmentationMap& seg, const DatasetConfig& config);

/// Writes rig/ (see export_rig), dataset.json and coefficients.exna under `dir`.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

} // namespace exprclone
