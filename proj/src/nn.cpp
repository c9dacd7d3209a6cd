#include <exprclone/error.hpp>
#include <exprclone/nn.hpp>

#include <cmath>

namespace exprclone::nn {

namespace {

thread_local GemmPrecision t_precision = GemmPrecision::f64;

bool use_f32()
{
    return t_precision == GemmPrecision::f32;
}

} // namespace

GemmPrecision gemm_precision()
{
    return t_precision;
}

void set_gemm_precision(GemmPrecision p)
{
    t_precision = p;
}

Eigen::MatrixXd matmul_nt(ConstRef a, ConstRef b)
{
    if (use_f32()) {
        const Eigen::MatrixXf af = a.cast<float>();
        const Eigen::MatrixXf bf = b.cast<float>();
        Eigen::MatrixXf r(af.rows(), bf.rows());
        r.noalias() = af * bf.transpose();
        return r.cast<double>();
    }
    Eigen::MatrixXd r(a.rows(), b.rows());
    r.noalias() = a * b.transpose();
    return r;
}

Eigen::MatrixXd matmul_tn(ConstRef a, ConstRef b)
{
    if (use_f32()) {
        const Eigen::MatrixXf af = a.cast<float>();
        const Eigen::MatrixXf bf = b.cast<float>();
        Eigen::MatrixXf r(af.cols(), bf.cols());
        r.noalias() = af.transpose() * bf;
        return r.cast<double>();
    }
    Eigen::MatrixXd r(a.cols(), b.cols());
    r.noalias() = a.transpose() * b;
    return r;
}

Eigen::MatrixXd matmul_nn(ConstRef a, ConstRef b)
{
    if (use_f32()) {
        const Eigen::MatrixXf af = a.cast<float>();
        const Eigen::MatrixXf bf = b.cast<float>();
        Eigen::MatrixXf r(af.rows(), bf.cols());
        r.noalias() = af * bf;
        return r.cast<double>();
    }
    Eigen::MatrixXd r(a.rows(), b.cols());
    r.noalias() = a * b;
    return r;
}

Linear Linear::init(Eigen::Index in, Eigen::Index out, std::mt19937_64& rng)
{
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    Linear l;
    l.weight.resize(out, in);
    l.bias.resize(out);
    for (Eigen::Index r = 0; r < out; ++r) {
        for (Eigen::Index c = 0; c < in; ++c) l.weight(r, c) = u(rng);
    }
    for (Eigen::Index r = 0; r < out; ++r) l.bias[r] = u(rng);
    return l;
}

Eigen::MatrixXd Linear::forward(const Eigen::MatrixXd& x) const
{
    if (x.cols() != in_features()) {
        throw InvalidInput("linear layer expects " + std::to_string(in_features()) + " inputs, got " +
                           std::to_string(x.cols()));
    }
    Eigen::MatrixXd y = matmul_nt(x, weight);
    y.rowwise() += bias.transpose();
    return y;
}

Eigen::VectorXd Linear::forward_vector(const Eigen::VectorXd& x) const
{
    if (x.size() != in_features()) {
        throw InvalidInput("linear layer expects " + std::to_string(in_features()) + " inputs, got " +
                           std::to_string(x.size()));
    }
    Eigen::VectorXd y = bias;
    y.noalias() += weight * x;
    return y;
}

Eigen::MatrixXd Linear::backward(const Eigen::MatrixXd& x, const Eigen::MatrixXd& grad_y, Linear* grad) const
{
    if (grad != nullptr) {
        grad->weight += matmul_tn(grad_y, x);
        grad->bias += grad_y.colwise().sum().transpose();
    }
    return matmul_nn(grad_y, weight);
}

Eigen::VectorXd Linear::backward_vector(const Eigen::VectorXd& x, const Eigen::VectorXd& grad_y, Linear* grad) const
{
    if (grad != nullptr) {
        grad->weight.noalias() += grad_y * x.transpose();
        grad->bias += grad_y;
    }
    Eigen::VectorXd gx(in_features());
    gx.noalias() = weight.transpose() * grad_y;
    return gx;
}

Linear Linear::zeros_like() const
{
    return {Eigen::MatrixXd::Zero(weight.rows(), weight.cols()), Eigen::VectorXd::Zero(bias.size())};
}

void Linear::collect(const std::string& prefix, ParamList& out)
{
    add_param(out, prefix + ".weight", weight);
    add_param(out, prefix + ".bias", bias);
}

GroupNorm GroupNorm::init(Eigen::Index channels, int groups, double eps)
{
    if (groups <= 0 || channels % groups != 0) {
        throw InvalidInput("group norm: " + std::to_string(channels) + " channels not divisible into " +
                           std::to_string(groups) + " groups");
    }
    GroupNorm g;
    g.groups = groups;
    g.eps = eps;
    g.gamma = Eigen::VectorXd::Ones(channels);
    g.beta = Eigen::VectorXd::Zero(channels);
    return g;
}

Eigen::MatrixXd GroupNorm::forward(const Eigen::MatrixXd& x, Cache* cache) const
{
    const Eigen::Index channels = gamma.size();
    if (x.cols() != channels) throw InvalidInput("group norm channel mismatch");
    const Eigen::Index width = channels / groups;
    Eigen::MatrixXd xhat(x.rows(), channels);
    Eigen::MatrixXd inv_std(x.rows(), groups);
    for (int g = 0; g < groups; ++g) {
        const auto block = x.middleCols(g * width, width);
        const Eigen::VectorXd mean = block.rowwise().mean();
        Eigen::MatrixXd centered = block.colwise() - mean;
        const Eigen::VectorXd var = centered.array().square().rowwise().mean();
        const Eigen::VectorXd istd = (var.array() + eps).rsqrt();
        inv_std.col(g) = istd;
        xhat.middleCols(g * width, width) = centered.array().colwise() * istd.array();
    }
    Eigen::MatrixXd y = xhat.array().rowwise() * gamma.transpose().array();
    y.rowwise() += beta.transpose();
    if (cache != nullptr) {
        cache->normalized = std::move(xhat);
        cache->inv_std = std::move(inv_std);
    }
    return y;
}

Eigen::MatrixXd GroupNorm::backward(const Cache& cache, const Eigen::MatrixXd& grad_y, GroupNorm* grad) const
{
    const Eigen::Index channels = gamma.size();
    const Eigen::Index width = channels / groups;
    if (grad != nullptr) {
        grad->gamma += (grad_y.array() * cache.normalized.array()).colwise().sum().transpose().matrix();
        grad->beta += grad_y.colwise().sum().transpose();
    }
    const Eigen::MatrixXd gxhat = grad_y.array().rowwise() * gamma.transpose().array();
    Eigen::MatrixXd gx(grad_y.rows(), channels);
    for (int g = 0; g < groups; ++g) {
        const auto gh = gxhat.middleCols(g * width, width);
        const auto xh = cache.normalized.middleCols(g * width, width);
        const Eigen::VectorXd mean_g = gh.rowwise().mean();
        const Eigen::VectorXd mean_gx = (gh.array() * xh.array()).rowwise().mean();
        Eigen::MatrixXd t = gh.colwise() - mean_g;
        t -= (xh.array().colwise() * mean_gx.array()).matrix();
        gx.middleCols(g * width, width) = t.array().colwise() * cache.inv_std.col(g).array();
    }
    return gx;
}

GroupNorm GroupNorm::zeros_like() const
{
    GroupNorm g = *this;
    g.gamma.setZero();
    g.beta.setZero();
    return g;
}

void GroupNorm::collect(const std::string& prefix, ParamList& out)
{
    add_param(out, prefix + ".gamma", gamma);
    add_param(out, prefix + ".beta", beta);
}

Eigen::MatrixXd sigmoid(const Eigen::MatrixXd& x)
{
    return x.unaryExpr([](double v) { return sigmoid_scalar(v); });
}

} // namespace exprclone::nn
