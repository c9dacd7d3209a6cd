#include "support.hpp"

#include <exprclone/error.hpp>
#include <exprclone/losses.hpp>

#include <doctest.h>

#include <cmath>

using namespace exprclone;
using testing::bumpy_grid;
using testing::central_difference;
using testing::gradient_close;

namespace {

double naive_code_loss(const Eigen::VectorXd& z, const Eigen::VectorXd& gt)
{
    double a = 0.0, b = 0.0;
    for (Eigen::Index i = 0; i < gt.size(); ++i) a += (z[i] - gt[i]) * (z[i] - gt[i]);
    for (Eigen::Index i = gt.size(); i < z.size(); ++i) b += z[i] * z[i];
    return a / static_cast<double>(gt.size()) + b / static_cast<double>(z.size() - gt.size());
}

std::vector<int> random_labels(Eigen::Index n, int l, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> pick(0, l - 1);
    std::vector<int> out(static_cast<std::size_t>(n));
    for (auto& y : out) y = pick(rng);
    return out;
}

/// Random values whose distance to 0 and 1 is at least 0.05.
Eigen::VectorXd away_from_kinks(Eigen::Index n, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 2.0);
    Eigen::VectorXd z(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double x = u(rng);
        while (std::abs(x) < 0.05 || std::abs(x - 1.0) < 0.05) x = u(rng);
        z[i] = x;
    }
    return z;
}

} // namespace

TEST_CASE("decoder loss examples")
{
    const Mesh rest = bumpy_grid();
    const Vertices gt = testing::jitter(rest.vertices(), 0.01, 1);
    const DecoderLoss zero = loss_decoder(gt, gt, rest);
    CHECK(zero.v == 0.0);
    CHECK(zero.n == 0.0);
    CHECK(zero.g == 0.0);
    CHECK(zero.total == 0.0);

    const Vertices shifted = gt.rowwise() + Eigen::RowVector3d(1.0, 0.0, 0.0);
    const DecoderLoss t = loss_decoder(shifted, gt, rest);
    CHECK(t.v == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(t.n <= 1e-20);
    CHECK(t.g <= 1e-20);
    CHECK(t.total == doctest::Approx(10.0).epsilon(1e-12));

    const Vertices pred = testing::jitter(gt, 0.02, 2);
    LossWeights w;
    w.v = 2.5;
    w.n = 0.7;
    w.g = 1.3;
    const DecoderLoss r = loss_decoder(pred, gt, rest, w);
    CHECK(std::abs(r.total - (2.5 * r.v + 0.7 * r.n + 1.3 * r.g)) <= 1e-12);
    double naive_v = 0.0;
    for (Eigen::Index i = 0; i < gt.rows(); ++i) naive_v += (pred.row(i) - gt.row(i)).squaredNorm();
    CHECK(r.v == doctest::Approx(naive_v / static_cast<double>(gt.rows())).epsilon(1e-12));
    CHECK(r.n > 0.0);
    CHECK(r.g > 0.0);

    CHECK_THROWS_AS(loss_decoder(pred.topRows(10), gt, rest), InvalidInput);
}

TEST_CASE("decoder loss gradient matches central differences on a 30-vertex mesh")
{
    const Mesh rest = bumpy_grid();
    REQUIRE(rest.num_vertices() == 30);
    const DeformationFrames frames(rest);
    const Vertices gt = testing::jitter(rest.vertices(), 0.02, 3);
    Vertices pred = testing::jitter(rest.vertices(), 0.02, 4);
    const LossWeights w;
    Vertices grad;
    loss_decoder(pred, gt, rest, frames, w, &grad);
    auto f = [&] { return loss_decoder(pred, gt, rest, frames, w, nullptr).total; };
    for (Eigen::Index i = 0; i < pred.size(); ++i) {
        CHECK(gradient_close(central_difference(f, pred.data()[i]), grad.data()[i]));
    }
}

TEST_CASE("identity and expression code losses")
{
    const Eigen::VectorXd gt_id = testing::random_matrix(100, 1, 1.0, 1);
    Eigen::VectorXd z = Eigen::VectorXd::Zero(k_code_dim);
    z.head(100) = gt_id;
    CHECK(loss_identity(z, gt_id) == 0.0);
    z.tail(28).setOnes();
    CHECK(loss_identity(z, gt_id) == doctest::Approx(1.0).epsilon(1e-15));

    const Eigen::VectorXd gt_exp = testing::random_matrix(53, 1, 0.5, 2);
    Eigen::VectorXd ze = Eigen::VectorXd::Zero(k_code_dim);
    ze.head(53) = gt_exp;
    CHECK(loss_expression(ze, gt_exp) == 0.0);
    ze.tail(75).setOnes();
    CHECK(loss_expression(ze, gt_exp) == doctest::Approx(1.0).epsilon(1e-15));

    Eigen::VectorXd r = testing::random_matrix(k_code_dim, 1, 1.0, 3);
    CHECK(std::abs(loss_identity(r, gt_id) - naive_code_loss(r, gt_id)) <= 1e-12);
    CHECK(std::abs(loss_expression(r, gt_exp) - naive_code_loss(r, gt_exp)) <= 1e-12);

    Eigen::VectorXd g;
    loss_expression(r, gt_exp, &g);
    auto f = [&] { return loss_expression(r, gt_exp); };
    for (Eigen::Index i = 0; i < r.size(); ++i) CHECK(gradient_close(central_difference(f, r[i]), g[i]));

    CHECK_THROWS_AS(loss_identity(r, Eigen::VectorXd::Zero(129)), InvalidInput);
}

TEST_CASE("range regularizer")
{
    CHECK(loss_reg(Eigen::VectorXd::Constant(1, 0.5)) == 0.0);
    CHECK(loss_reg(Eigen::VectorXd::Constant(1, -0.25)) == 0.25);
    CHECK(loss_reg(Eigen::VectorXd::Constant(1, 1.5)) == 0.5);
    Eigen::Vector3d v(-1.0, 0.5, 2.0);
    CHECK(loss_reg(v) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));

    const Eigen::VectorXd a = testing::random_matrix(50, 1, 1.5, 4);
    const Eigen::VectorXd b = testing::random_matrix(50, 1, 1.5, 5);
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        const auto one = [](double x) { return loss_reg(Eigen::VectorXd::Constant(1, x)); };
        CHECK(one(0.5 * (a[i] + b[i])) <= 0.5 * (one(a[i]) + one(b[i])) + 1e-15);
    }

    Eigen::VectorXd z = away_from_kinks(40, 6);
    Eigen::VectorXd g;
    loss_reg(z, &g);
    auto f = [&] { return loss_reg(z); };
    for (Eigen::Index i = 0; i < z.size(); ++i) CHECK(gradient_close(central_difference(f, z[i]), g[i]));

    Eigen::Vector2d kinks(0.0, 1.0);
    loss_reg(kinks, &g);
    CHECK(g.isZero(0.0));
}

TEST_CASE("basis-projection loss")
{
    const Eigen::MatrixXd basis = testing::random_matrix(3 * 30, 53, 0.05, 1);
    const Eigen::VectorXd gt = testing::random_matrix(53, 1, 0.5, 2);
    Eigen::VectorXd z = testing::random_matrix(k_code_dim, 1, 0.5, 3);
    Eigen::VectorXd exact = z;
    exact.head(53) = gt;
    CHECK(loss_bp(exact, gt, basis) == 0.0);
    CHECK(loss_bp(z, gt, Eigen::MatrixXd::Zero(90, 53)) == 0.0);

    const Eigen::VectorXd p = basis * z.head(53);
    const Eigen::VectorXd q = basis * gt;
    double naive = 0.0;
    for (Eigen::Index i = 0; i < 30; ++i) {
        for (int c = 0; c < 3; ++c) naive += (p[3 * i + c] - q[3 * i + c]) * (p[3 * i + c] - q[3 * i + c]);
    }
    CHECK(std::abs(loss_bp(z, gt, basis) - naive / 30.0) <= 1e-10);

    Eigen::VectorXd g;
    loss_bp(z, gt, basis, &g);
    CHECK(g.tail(k_code_dim - 53).isZero(0.0));
    auto f = [&] { return loss_bp(z, gt, basis); };
    for (Eigen::Index i = 0; i < 53; ++i) CHECK(gradient_close(central_difference(f, z[i]), g[i]));

    CHECK_THROWS_AS(loss_bp(z, gt.head(50), basis), InvalidInput);
}

TEST_CASE("basis-reconstruction loss")
{
    const Eigen::MatrixXd basis = testing::random_matrix(3 * 30, 53, 0.05, 1);
    const Eigen::VectorXd z = testing::random_matrix(k_code_dim, 1, 0.5, 3);
    const Eigen::VectorXd flat = basis * z.head(53);
    Eigen::MatrixXd disp(30, 3);
    for (Eigen::Index i = 0; i < 30; ++i) disp.row(i) << flat[3 * i], flat[3 * i + 1], flat[3 * i + 2];
    CHECK(loss_br(z, disp, basis) == 0.0);

    Eigen::MatrixXd pred = disp + testing::random_matrix(30, 3, 0.01, 4);
    CHECK(loss_br(z, pred, basis) == doctest::Approx((pred - disp).squaredNorm() / 30.0).epsilon(1e-12));
    Eigen::MatrixXd g;
    loss_br(z, pred, basis, &g);
    auto f = [&] { return loss_br(z, pred, basis); };
    for (Eigen::Index i = 0; i < pred.size(); ++i) CHECK(gradient_close(central_difference(f, pred.data()[i]), g.data()[i]));

    CHECK_THROWS_AS(loss_br(z, pred.topRows(29), basis), InvalidInput);
}

TEST_CASE("skinning NLL closed forms and oracle")
{
    const int n = 30, l = 20;
    const std::vector<int> labels = random_labels(n, l, 1);

    Eigen::MatrixXd confident = Eigen::MatrixXd::Constant(n, l, -50.0);
    for (int i = 0; i < n; ++i) confident(i, labels[static_cast<std::size_t>(i)]) = 50.0;
    CHECK(loss_nll(SkinningField::from_logits(confident), labels) <= l * -std::log1p(-1e-7) * (1.0 + 1e-9));

    const double half = loss_nll(SkinningField::from_logits(Eigen::MatrixXd::Zero(n, l)), labels);
    CHECK(half == doctest::Approx(l * std::log(2.0)).epsilon(1e-12));

    const SkinningField field = SkinningField::from_logits(testing::random_matrix(n, l, 2.0, 2));
    double naive = 0.0;
    for (int i = 0; i < n; ++i) {
        for (int c = 0; c < l; ++c) {
            const double p = field.probabilities(i, c);
            const double y = labels[static_cast<std::size_t>(i)] == c ? 1.0 : 0.0;
            naive -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
        }
    }
    CHECK(std::abs(loss_nll(field, labels) - naive / n) <= 1e-10);

    std::vector<int> bad = labels;
    bad[3] = l;
    CHECK_THROWS_AS(loss_nll(field, bad), InvalidInput);
    CHECK_THROWS_AS(loss_nll(field, std::vector<int>(5, 0)), InvalidInput);
}

TEST_CASE("skinning NLL gradients in both modes")
{
    const int n = 12, l = 6;
    const std::vector<int> labels = random_labels(n, l, 3);
    Eigen::MatrixXd logits = testing::random_matrix(n, l, 1.5, 4);
    for (NllMode mode : {NllMode::bernoulli, NllMode::categorical}) {
        INFO(to_string(mode));
        Eigen::MatrixXd g;
        loss_nll(SkinningField::from_logits(logits), labels, mode, &g);
        auto f = [&] { return loss_nll(SkinningField::from_logits(logits), labels, mode); };
        for (Eigen::Index i = 0; i < logits.size(); ++i) {
            CHECK(gradient_close(central_difference(f, logits.data()[i]), g.data()[i]));
        }
    }
    CHECK(nll_mode_from_string("categorical") == NllMode::categorical);
    CHECK_THROWS_AS(nll_mode_from_string("softmax"), InvalidInput);
}

TEST_CASE("total loss switches on the branch")
{
    LossTerms zero;
    zero.identity = 0.0;
    zero.expression = 0.0;
    zero.bp = 0.0;
    zero.br = 0.0;
    zero.nll = 0.0;
    CHECK(loss_total(zero, Branch::ict, {}).total() == 0.0);

    LossTerms t;
    t.dec = {0.1, 0.2, 0.3, 10 * 0.1 + 0.2 + 0.3};
    t.identity = 0.7;
    t.expression = 0.11;
    t.bp = 0.05;
    t.br = 0.02;
    t.nll = 1.3;
    t.reg_expression = 0.4;
    t.reg_identity = 0.6;
    LossWeights w;
    w.bp = 2.0;
    w.br = 3.0;
    w.nll = 0.5;
    const LossReport ict = loss_total(t, Branch::ict, w);
    CHECK(std::abs(ict.total() - (1.5 + 0.7 + 0.11 + 2.0 * 0.05 + 3.0 * 0.02 + 0.5 * 1.3)) <= 1e-10);
    CHECK(!ict.has("L_reg"));
    for (const char* k : {"L_v", "L_n", "L_g", "L_dec", "L_ID", "L_Exp", "L_BP", "L_BR", "L_nll"}) CHECK(ict.has(k));

    const LossReport non = loss_total(t, Branch::non_ict, w);
    CHECK(std::abs(non.total() - (1.5 + 0.4 + 0.6)) <= 1e-10);
    for (const char* k : {"L_ID", "L_Exp", "L_BP", "L_BR", "L_nll"}) CHECK(!non.has(k));
    CHECK(non.terms.at("L_reg") == doctest::Approx(1.0));
    CHECK(non.to_json().at("branch") == "non-ict");

    // Flipping the branch changes only the branch-specific terms.
    for (const char* k : {"L_v", "L_n", "L_g", "L_dec"}) CHECK(ict.terms.at(k) == non.terms.at(k));

    LossTerms missing = t;
    missing.identity.reset();
    CHECK_THROWS_AS(loss_total(missing, Branch::ict, w), InvalidInput);

    LossTerms partial = t;
    partial.bp.reset();
    CHECK(!loss_total(partial, Branch::ict, w).has("L_BP"));
}

TEST_CASE("averaging reports keeps terms present in any report")
{
    LossReport a, b;
    a.terms = {{"L_total", 1.0}, {"L_BP", 0.5}};
    b.terms = {{"L_total", 3.0}, {"L_reg", 0.2}};
    const auto avg = average_terms({a, b});
    CHECK(avg.at("L_total") == 2.0);
    CHECK(avg.at("L_BP") == 0.5);
    CHECK(avg.at("L_reg") == 0.2);
}

TEST_CASE("loss weights validation")
{
    LossWeights w;
    CHECK(w.v == 10.0);
    CHECK(w.n == 1.0);
    CHECK(w.g == 1.0);
    w.br = -1.0;
    CHECK_THROWS_AS(w.validate(), InvalidInput);
    CHECK(LossWeights::from_json({{"nll", 0.25}}).nll == 0.25);
}
