#pragma once

#include <exprclone/deformation.hpp>
#include <exprclone/encoders.hpp>
#include <exprclone/mesh.hpp>

#include <Eigen/Core>
#include <json.hpp>

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace exprclone {

struct LossWeights {
    double v = 10.0;
    double n = 1.0;
    double g = 1.0;
    double bp = 1.0;
    double br = 1.0;
    double nll = 1.0;

    nlohmann::json to_json() const;
    static LossWeights from_json(const nlohmann::json& j);
    void validate() const;
};

struct DecoderLoss {
    double v = 0.0;
    double n = 0.0;
    double g = 0.0;
    double total = 0.0;
};

/// Vertex, normal and Jacobian terms; all means over vertices (or faces for L_g).
DecoderLoss loss_decoder(const Vertices& pred, const Vertices& gt, const Mesh& rest, const DeformationFrames& frames,
                         const LossWeights& weights, Vertices* grad_pred = nullptr);
DecoderLoss loss_decoder(const Vertices& pred, const Vertices& gt, const Mesh& rest, const LossWeights& weights = {});

/// mean((z[:s] - gt)^2) + mean(z[s:]^2) with s = gt.size().
double loss_code(const Eigen::VectorXd& z, const Eigen::VectorXd& gt, Eigen::VectorXd* grad = nullptr);
double loss_identity(const Eigen::VectorXd& z_id, const Eigen::VectorXd& w_id_gt, Eigen::VectorXd* grad = nullptr);
double loss_expression(const Eigen::VectorXd& z_ge, const Eigen::VectorXd& w_exp_gt, Eigen::VectorXd* grad = nullptr);

/// Mean of the piecewise-linear penalty outside [0, 1]; subgradient 0 at the kinks.
double loss_reg(const Eigen::VectorXd& z, Eigen::VectorXd* grad = nullptr);

/// Per-vertex mean squared distance between B z[:K] and B gt. basis is 3N x K.
double loss_bp(const Eigen::VectorXd& z_ge, const Eigen::VectorXd& w_exp_gt, const Eigen::MatrixXd& basis,
               Eigen::VectorXd* grad = nullptr);

/// Per-vertex mean squared distance between the decoder displacement and B z[:K], with z held constant.
double loss_br(const Eigen::VectorXd& z_ge, const Eigen::MatrixXd& displacement, const Eigen::MatrixXd& basis,
               Eigen::MatrixXd* grad_displacement = nullptr);

enum class NllMode { bernoulli, categorical };

std::string to_string(NllMode mode);
NllMode nll_mode_from_string(const std::string& s);

/// Bernoulli: -(1/N) sum_i sum_l [y log p + (1 - y) log(1 - p)] on the clamped probabilities.
/// Categorical: -(1/N) sum_i log softmax(logits_i)[y_i].
double loss_nll(const SkinningField& field, const std::vector<int>& labels, NllMode mode = NllMode::bernoulli,
                Eigen::MatrixXd* grad_logits = nullptr);

enum class Branch { ict, non_ict };

std::string to_string(Branch branch);

/// Per-sample term values; unset optionals are terms that were not evaluated.
struct LossTerms {
    DecoderLoss dec;
    std::optional<double> identity;
    std::optional<double> expression;
    std::optional<double> reg_expression;
    std::optional<double> reg_identity;
    std::optional<double> bp;
    std::optional<double> br;
    std::optional<double> nll;
};

struct LossReport {
    Branch branch = Branch::ict;
    std::map<std::string, double> terms; // only evaluated terms, including "L_total"

    double total() const { return terms.at("L_total"); }
    bool has(const std::string& name) const { return terms.count(name) != 0; }
    nlohmann::json to_json() const;
};

LossReport loss_total(const LossTerms& terms, Branch branch, const LossWeights& weights);

/// Mean of several reports; a term is kept if any report has it, averaged over reports that do.
std::map<std::string, double> average_terms(const std::vector<LossReport>& reports);

} // namespace exprclone
