#pragma once

#include <exprclone/array_store.hpp>
#include <exprclone/encoders.hpp>
#include <exprclone/nn.hpp>

#include <Eigen/Core>
#include <json.hpp>

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace exprclone {

struct ModelConfig {
    int width = 128;
    int blocks = 4;
    int segments = 20;
    int decoder_hidden = 256;
    int decoder_layers = 8;
    int norm_groups = 8;
    int semantic_expression = 53;
    int semantic_identity = 100;
    int eigen_count = k_default_eigen_count;
    bool use_skinning_encoder = true;
    bool uniform_pooling = false;
    GlobalFeatureMode global_feature = GlobalFeatureMode::zero;

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    void validate() const;
};

/// Per-vertex MLP L -> 128 -> 128 -> 128 mapping skinning probabilities to weights in (0, 1).
struct SkinningBlock {
    std::vector<nn::Linear> layers;

    static constexpr double eps = 1e-7;

    struct Cache {
        std::vector<Eigen::MatrixXd> inputs; // input of each layer
        std::vector<Eigen::MatrixXd> pre;    // pre-activation of each layer
    };

    static SkinningBlock init(int segments, std::mt19937_64& rng);
    bool empty() const { return layers.empty(); }

    Eigen::MatrixXd forward(const Eigen::MatrixXd& probabilities, Cache* cache) const;
    /// Returns dL/dprobabilities.
    Eigen::MatrixXd backward(const Cache& cache, const Eigen::MatrixXd& grad_weights, SkinningBlock* grad) const;

    SkinningBlock zeros_like() const;
    void collect(const std::string& prefix, nn::ParamList& out);
};

/// z_LE[i] = omega[i] (elementwise) z_GE.
Eigen::MatrixXd localize(const Eigen::MatrixXd& weights, const Eigen::VectorXd& z_ge);

/// Eight-layer per-vertex MLP over [features | c | z_ID | z_LE] with group norm and ReLU on hidden layers.
struct Decoder {
    std::vector<nn::Linear> layers;
    std::vector<nn::GroupNorm> norms;

    struct Cache {
        std::vector<Eigen::MatrixXd> pre;      // pre-norm activations of hidden layers
        std::vector<nn::GroupNorm::Cache> norm;
        std::vector<Eigen::MatrixXd> normed;   // post-norm, pre-ReLU
        std::vector<Eigen::MatrixXd> hidden;   // post-ReLU, input of the next layer
    };

    struct InputGradient {
        Eigen::VectorXd c;
        Eigen::VectorXd z_id;
        Eigen::MatrixXd z_le;
    };

    static Decoder init(int hidden, int layer_count, int groups, std::mt19937_64& rng);
    static constexpr int input_dim = 6 + 3 * k_code_dim;

    Eigen::MatrixXd forward(const Eigen::MatrixXd& features, const Eigen::VectorXd& c, const Eigen::VectorXd& z_id,
                            const Eigen::MatrixXd& z_le, Cache* cache) const;
    /// Parameter gradients go to `grad` when non-null; input gradients are always returned.
    InputGradient backward(const Cache& cache, const Eigen::MatrixXd& features, const Eigen::VectorXd& c,
                           const Eigen::VectorXd& z_id, const Eigen::MatrixXd& z_le, const Eigen::MatrixXd& grad_out,
                           Decoder* grad) const;

    Decoder zeros_like() const;
    void collect(const std::string& prefix, nn::ParamList& out);
};

Mesh deform(const Mesh& target, const Eigen::MatrixXd& displacement);

/// Target-side quantities reused across animate calls.
struct PreparedTarget {
    std::shared_ptr<const MeshContext> context;
    Eigen::VectorXd c;
    Eigen::VectorXd z_id;
    SkinningField skinning;  // empty without a skinning encoder
    Eigen::MatrixXd weights; // N x 128, empty without a skinning encoder
};

struct Model {
    ModelConfig config;
    GlobalDescriptor descriptor;
    GlobalEncoder identity_encoder;
    GlobalEncoder expression_encoder;
    SkinningEncoder skinning_encoder;
    SkinningBlock skinning_block;
    Decoder decoder;

    static Model init(const ModelConfig& config, std::uint64_t seed);

    Model zeros_like() const;
    nn::ParamList parameters();
    std::size_t parameter_count();

    ArrayStore to_store() const;
    static Model from_store(const ArrayStore& store);
    std::string digest() const;

    Eigen::VectorXd global_feature(const MeshContext& ctx) const { return descriptor.forward(ctx); }
    Eigen::VectorXd encode_identity(const MeshContext& ctx) const;
    Eigen::VectorXd encode_expression(const MeshContext& ctx) const;
    SkinningField encode_skinning(const MeshContext& ctx) const;
    Eigen::MatrixXd skinning_weights(const SkinningField& field) const;

    /// z_LE for a target; broadcasts z_GE when the skinning encoder is disabled.
    Eigen::MatrixXd localized_code(const PreparedTarget& target, const Eigen::VectorXd& z_ge) const;

    PreparedTarget prepare_target(std::shared_ptr<const MeshContext> target) const;
    Eigen::MatrixXd displacement(const PreparedTarget& target, const Eigen::VectorXd& z_ge) const;

    /// Code of length 53 (zero-padded) or 128.
    Mesh animate(const PreparedTarget& target, const Eigen::VectorXd& code) const;
    Mesh retarget(const MeshContext& source, const PreparedTarget& target) const;
    Mesh retarget(const MeshContext& source, const MeshContext& target) const;
};

/// Pads a 53-dim semantic code with zeros to 128; passes 128-dim codes through; rejects other lengths.
Eigen::VectorXd expand_expression_code(const Eigen::VectorXd& code, int semantic_dims);

} // namespace exprclone
