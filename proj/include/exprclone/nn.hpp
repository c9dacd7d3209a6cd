#pragma once

#include <Eigen/Core>

#include <random>
#include <string>
#include <vector>

namespace exprclone::nn {

/// Non-owning view of one parameter tensor; `data` points into a module.
struct ParamRef {
    std::string name;
    double* data = nullptr;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;

    Eigen::Index size() const { return rows * cols; }
    Eigen::Map<Eigen::MatrixXd> map() const { return {data, rows, cols}; }
};

using ParamList = std::vector<ParamRef>;

inline void add_param(ParamList& out, const std::string& name, Eigen::MatrixXd& m)
{
    out.push_back({name, m.data(), m.rows(), m.cols()});
}

inline void add_param(ParamList& out, const std::string& name, Eigen::VectorXd& v)
{
    out.push_back({name, v.data(), v.size(), 1});
}

enum class GemmPrecision { f64, f32 };

/// Precision of the large matrix products on the calling thread. Parameters and
/// everything else stay in double; f32 only rounds the operands of each product.
GemmPrecision gemm_precision();
void set_gemm_precision(GemmPrecision p);

/// Restores the previous precision on scope exit.
class GemmPrecisionScope {
public:
    explicit GemmPrecisionScope(GemmPrecision p) : m_previous(gemm_precision()) { set_gemm_precision(p); }
    ~GemmPrecisionScope() { set_gemm_precision(m_previous); }
    GemmPrecisionScope(const GemmPrecisionScope&) = delete;
    GemmPrecisionScope& operator=(const GemmPrecisionScope&) = delete;

private:
    GemmPrecision m_previous;
};

using ConstRef = Eigen::Ref<const Eigen::MatrixXd>;

/// a * b^T, a^T * b or a * b at the thread's precision.
Eigen::MatrixXd matmul_nt(ConstRef a, ConstRef b);
Eigen::MatrixXd matmul_tn(ConstRef a, ConstRef b);
Eigen::MatrixXd matmul_nn(ConstRef a, ConstRef b);

/// y = x W^T + b applied row-wise (rows are vertices).
struct Linear {
    Eigen::MatrixXd weight; // out x in
    Eigen::VectorXd bias;   // out

    /// PyTorch-style uniform(-1/sqrt(in), 1/sqrt(in)) init for weight and bias.
    static Linear init(Eigen::Index in, Eigen::Index out, std::mt19937_64& rng);

    Eigen::Index in_features() const { return weight.cols(); }
    Eigen::Index out_features() const { return weight.rows(); }
    bool empty() const { return weight.size() == 0; }

    Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const;
    Eigen::VectorXd forward_vector(const Eigen::VectorXd& x) const;

    /// Accumulates parameter gradients into `grad` when non-null; returns dL/dx.
    Eigen::MatrixXd backward(const Eigen::MatrixXd& x, const Eigen::MatrixXd& grad_y, Linear* grad) const;
    Eigen::VectorXd backward_vector(const Eigen::VectorXd& x, const Eigen::VectorXd& grad_y, Linear* grad) const;

    Linear zeros_like() const;
    void collect(const std::string& prefix, ParamList& out);
};

/// Per-row group normalization with a learned per-channel affine.
struct GroupNorm {
    int groups = 8;
    double eps = 1e-5;
    Eigen::VectorXd gamma;
    Eigen::VectorXd beta;

    struct Cache {
        Eigen::MatrixXd normalized;
        Eigen::MatrixXd inv_std; // rows x groups
    };

    static GroupNorm init(Eigen::Index channels, int groups, double eps = 1e-5);

    Eigen::MatrixXd forward(const Eigen::MatrixXd& x, Cache* cache) const;
    Eigen::MatrixXd backward(const Cache& cache, const Eigen::MatrixXd& grad_y, GroupNorm* grad) const;

    GroupNorm zeros_like() const;
    void collect(const std::string& prefix, ParamList& out);
};

inline Eigen::MatrixXd relu(const Eigen::MatrixXd& x)
{
    return x.cwiseMax(0.0);
}

/// dL/dx for y = relu(x), gated on the pre-activation.
inline Eigen::MatrixXd relu_backward(const Eigen::MatrixXd& pre, const Eigen::MatrixXd& grad_y)
{
    return (pre.array() > 0.0).select(grad_y, 0.0);
}

Eigen::MatrixXd sigmoid(const Eigen::MatrixXd& x);

inline double softplus(double x)
{
    return x > 30.0 ? x : std::log1p(std::exp(x));
}

inline double softplus_inverse(double y)
{
    return y > 30.0 ? y : std::log(std::expm1(y));
}

inline double sigmoid_scalar(double x)
{
    return 1.0 / (1.0 + std::exp(-x));
}

} // namespace exprclone::nn
