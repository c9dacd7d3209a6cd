#pragma once

#include <exprclone/array_store.hpp>
#include <exprclone/dataset.hpp>
#include <exprclone/encoders.hpp>
#include <exprclone/losses.hpp>
#include <exprclone/model.hpp>

#include <Eigen/Core>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace exprclone {

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainConfig {
    std::uint64_t seed = 1;
    int steps = 2000;
    int batch_size = 2;
    double learning_rate = 1e-3;
    AdamOptions adam;
    bool use_skinning_encoder = true;
    bool use_bp = true;
    bool use_br = true;
    /// Fraction of ICT-style samples (chosen by sample-id hash) that carry L_nll.
    double supervision_fraction = 1.0;
    /// ICT-style to scan-style draw ratio when both are present.
    double ict_scan_ratio = 4.0;
    /// Train on pairs whose target identity differs from the source identity.
    bool cross_identity = true;
    NllMode nll_mode = NllMode::bernoulli;
    /// Round the operands of the large products to float during training steps.
    bool fast_gemm = true;
    LossWeights weights;
    ModelConfig model;
    int checkpoint_every = 500;
    int validate_every = 100;
    int validation_samples = 16;
    bool early_stop = false;
    int patience = 10;

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
    void validate() const;
    /// Digest over every field that changes the optimization trajectory, except `steps`.
    std::string digest() const;
};

/// One (source, target) pair with ground truth. ICT-style iff w_exp is set.
struct TrainingExample {
    std::string id;
    std::shared_ptr<const MeshContext> source;
    std::shared_ptr<const MeshContext> target;
    Vertices gt;
    std::optional<Eigen::VectorXd> w_exp;
    std::optional<Eigen::VectorXd> w_id;
    std::optional<std::vector<int>> labels;

    Branch branch() const { return w_exp ? Branch::ict : Branch::non_ict; }
};

/// Which terms contribute gradient. Report values are computed either way.
struct GradientTerms {
    bool dec = true;
    bool enc = true;
    bool bp = true;
    bool br = true;
    bool nll = true;
};

struct GradientSettings {
    LossWeights weights;
    NllMode nll_mode = NllMode::bernoulli;
    bool use_bp = true;
    bool use_br = true;
    GradientTerms terms;
    /// Expression basis (3N x K) of the active rig; required for L_BP and L_BR.
    const Eigen::MatrixXd* basis = nullptr;
};

GradientSettings gradient_settings(const TrainConfig& config, const Eigen::MatrixXd& basis);

/// Forward and backward over a batch. Gradients of the batch-mean loss are added to `grad`.
/// Returns one report per example, in order.
std::vector<LossReport> accumulate_gradients(const Model& model, const std::vector<TrainingExample>& batch,
                                             const GradientSettings& settings, Model& grad);

/// Per-sample flags for the training-split ICT-style samples that carry L_nll: the round(fraction * count)
/// samples whose id hashes lowest. Selections are nested as the fraction grows.
std::vector<bool> supervised_mask(const Dataset& dataset, double fraction);

class AdamState {
public:
    AdamState() = default;
    explicit AdamState(const Model& model);

    /// Applies one update in place; `step` is the 1-based update count.
    void apply(Model& model, Model& grad, double lr, const AdamOptions& options, long step);
    void save(ArrayStore& store) const;
    void load(const ArrayStore& store);

private:
    Model m_first;
    Model m_second;
};

struct TrainState {
    TrainConfig config;
    Model model;
    AdamState adam;
    long step = 0;
    std::string dataset_digest;

    ArrayStore to_store() const;
    static TrainState from_store(const ArrayStore& store);
};

TrainState init_train_state(const TrainConfig& config, const std::string& dataset_digest);

/// One optimizer update over the batch; throws with a per-term dump on a non-finite loss.
LossReport training_step(TrainState& state, const std::vector<TrainingExample>& batch, const Eigen::MatrixXd& basis);

/// Deterministic batch for a step, derived from (seed, step) only.
std::vector<TrainingExample> make_batch(const Dataset& dataset, const TrainConfig& config, long step,
                                        ContextCache& contexts);

/// Self-retargeting example for a sample (source identity == target identity).
TrainingExample make_self_example(const Dataset& dataset, const Sample& sample, ContextCache& contexts,
                                  bool supervised);

struct TrainOptions {
    std::optional<std::filesystem::path> output_dir;
    std::optional<std::filesystem::path> resume_from;
    /// Called after every step with the mean report.
    std::function<void(long, const LossReport&)> on_step;
    bool quiet = true;
};

struct TrainResult {
    TrainState state;
    std::vector<nlohmann::json> log;
    std::optional<std::filesystem::path> final_checkpoint;
};

TrainResult train(const Dataset& dataset, const TrainConfig& config, ContextCache& contexts,
                  const TrainOptions& options = {});

/// Mean unaligned self-retarget MSE over the first `count` samples of a split.
double validation_mse(const Model& model, const Dataset& dataset, Split split, int count, ContextCache& contexts);

enum class Variant { no_skinning, no_bp, no_br, full };

std::string to_string(Variant v);
TrainConfig variant_config(const TrainConfig& base, Variant v);
const std::vector<Variant>& all_variants();

struct AblationRun {
    Variant variant;
    TrainState state;
    std::optional<std::filesystem::path> checkpoint;
};

/// Trains the four variants with identical seeds and budgets.
std::vector<AblationRun> ablation_suite(const Dataset& dataset, const TrainConfig& base, ContextCache& contexts,
                                        const std::optional<std::filesystem::path>& output_dir = std::nullopt);

} // namespace exprclone
