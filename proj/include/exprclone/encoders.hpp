#pragma once

#include <exprclone/deformation.hpp>
#include <exprclone/mesh.hpp>
#include <exprclone/nn.hpp>
#include <exprclone/spectral.hpp>

#include <Eigen/Core>

#include <memory>
#include <mutex>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace exprclone {

inline constexpr int k_code_dim = 128;
inline constexpr int k_descriptor_stats = 12;

/// Everything the network needs about one mesh that does not depend on parameters.
struct MeshContext {
    Mesh mesh;
    std::shared_ptr<const SpectralOperators> ops;
    Eigen::MatrixXd features;         // N x 6, [position | normal]
    Eigen::VectorXd pool_weights;     // N, sums to 1 (mass-weighted)
    Eigen::VectorXd stats;            // 12 centered position statistics
    std::shared_ptr<const DeformationFrames> frames;

    Eigen::Index num_vertices() const { return mesh.num_vertices(); }
};

MeshContext make_context(const Mesh& mesh, std::shared_ptr<const SpectralOperators> ops);
MeshContext make_context(const Mesh& mesh, OperatorCache& cache);

/// Thread-safe memo of contexts keyed by mesh content; operators come from the wrapped cache.
class ContextCache {
public:
    explicit ContextCache(std::shared_ptr<OperatorCache> operators);

    std::shared_ptr<const MeshContext> get(const Mesh& mesh);
    OperatorCache& operators() { return *m_operators; }
    std::size_t size() const;

private:
    std::shared_ptr<OperatorCache> m_operators;
    mutable std::mutex m_mutex;
    std::unordered_map<std::string, std::shared_ptr<const MeshContext>> m_entries;
};

/// Mass-weighted centroid offset from the bounding-box center (3) and position covariance (9).
Eigen::VectorXd descriptor_stats(const Vertices& vertices, const Eigen::VectorXd& mass);

enum class GlobalFeatureMode { zero, pooled_descriptor };

std::string to_string(GlobalFeatureMode mode);
GlobalFeatureMode global_feature_mode_from_string(const std::string& s);

/// Replacement for the rendered-image feature slot c: zero, or a learned map of descriptor_stats.
struct GlobalDescriptor {
    GlobalFeatureMode mode = GlobalFeatureMode::zero;
    nn::Linear map; // 12 -> 128, empty in zero mode

    static GlobalDescriptor init(GlobalFeatureMode mode, std::mt19937_64& rng);
    Eigen::VectorXd forward(const MeshContext& ctx) const;
    void backward(const MeshContext& ctx, const Eigen::VectorXd& grad_c, GlobalDescriptor* grad) const;
    GlobalDescriptor zeros_like() const;
    void collect(const std::string& prefix, nn::ParamList& out);
};

struct DiffusionBlock {
    Eigen::VectorXd time_param; // per channel; diffusion time = softplus(time_param)
    nn::Linear mix1;            // 2C -> C
    nn::Linear mix2;            // C -> C

    Eigen::VectorXd diffusion_times() const;
};

/// Spectral-diffusion backbone: lift, B residual diffusion blocks, linear head.
struct Backbone {
    nn::Linear lift;
    std::vector<DiffusionBlock> blocks;
    nn::Linear head;

    struct BlockCache {
        Eigen::MatrixXd input;
        Eigen::MatrixXd spectral; // k x C coefficients before decay
        Eigen::MatrixXd decay;    // k x C
        Eigen::MatrixXd concat;   // N x 2C
        Eigen::MatrixXd hidden_pre;
        Eigen::MatrixXd hidden;
    };
    struct Cache {
        Eigen::MatrixXd input; // N x (6 + cond)
        std::vector<BlockCache> blocks;
        Eigen::MatrixXd trunk; // N x C before head
    };

    static Backbone init(int input_features, int cond_dim, int width, int block_count, std::mt19937_64& rng);

    int width() const { return static_cast<int>(lift.out_features()); }

    Eigen::MatrixXd forward(const MeshContext& ctx, const Eigen::VectorXd& c, Cache* cache) const;
    /// Accumulates parameter gradients into `grad` (if non-null) and dL/dc into `grad_c` (if non-null).
    void backward(const MeshContext& ctx, const Cache& cache, const Eigen::MatrixXd& grad_out, Backbone* grad,
                  Eigen::VectorXd* grad_c) const;

    Backbone zeros_like() const;
    void collect(const std::string& prefix, nn::ParamList& out);
};

/// Heat diffusion of each column of x for its own time in the truncated eigenbasis.
Eigen::MatrixXd spectral_diffuse(const MeshContext& ctx, const Eigen::MatrixXd& x, const Eigen::VectorXd& times);

/// Identity and expression encoders: pooled backbone features followed by a linear head.
struct GlobalEncoder {
    Backbone backbone;
    nn::Linear head;
    bool uniform_pooling = false;

    struct Cache {
        Backbone::Cache backbone;
        Eigen::VectorXd pooled;
    };

    static GlobalEncoder init(int width, int block_count, std::mt19937_64& rng);

    Eigen::VectorXd forward(const MeshContext& ctx, const Eigen::VectorXd& c, Cache* cache) const;
    void backward(const MeshContext& ctx, const Cache& cache, const Eigen::VectorXd& grad_code, GlobalEncoder* grad,
                  Eigen::VectorXd* grad_c) const;

    GlobalEncoder zeros_like() const;
    void collect(const std::string& prefix, nn::ParamList& out);
};

struct SkinningField {
    Eigen::MatrixXd logits;        // N x L
    Eigen::MatrixXd probabilities; // N x L, clamped to [eps, 1 - eps]

    static constexpr double eps = 1e-7;
    static SkinningField from_logits(Eigen::MatrixXd logits);
    /// dL/dlogits given dL/dprobabilities; zero where the clamp is active.
    Eigen::MatrixXd logits_gradient(const Eigen::MatrixXd& grad_probabilities) const;
};

/// Per-vertex skinning logits, no pooling.
struct SkinningEncoder {
    Backbone backbone;
    nn::Linear head; // C -> L

    struct Cache {
        Backbone::Cache backbone;
        Eigen::MatrixXd trunk;
    };

    static SkinningEncoder init(int width, int block_count, int segments, std::mt19937_64& rng);
    bool empty() const { return head.empty(); }

    SkinningField forward(const MeshContext& ctx, const Eigen::VectorXd& c, Cache* cache) const;
    void backward(const MeshContext& ctx, const Cache& cache, const Eigen::MatrixXd& grad_logits, SkinningEncoder* grad,
                  Eigen::VectorXd* grad_c) const;

    SkinningEncoder zeros_like() const;
    void collect(const std::string& prefix, nn::ParamList& out);
};

} // namespace exprclone
