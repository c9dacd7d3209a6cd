#include "support.hpp"

#include <exprclone/dataset.hpp>
#include <exprclone/error.hpp>
#include <exprclone/rig.hpp>

#include <doctest.h>

#include <fstream>
#include <set>

using namespace exprclone;

namespace {

const std::pair<BlendshapeRig, SegmentationMap>& toy()
{
    static const auto rig = make_toy_rig(ToyRigOptions{});
    return rig;
}

Vertices naive_rig(const BlendshapeRig& rig, const Eigen::VectorXd& w_id, const Eigen::VectorXd& w_exp)
{
    Vertices v = rig.neutral.vertices();
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
        for (int c = 0; c < 3; ++c) {
            for (Eigen::Index j = 0; j < w_id.size(); ++j) v(i, c) += w_id[j] * rig.identity_deltas(3 * i + c, j);
            for (Eigen::Index k = 0; k < w_exp.size(); ++k) v(i, c) += w_exp[k] * rig.expression_deltas(3 * i + c, k);
        }
    }
    return v;
}

DatasetConfig small_dataset()
{
    DatasetConfig dc;
    dc.train_identities = 3;
    dc.val_identities = 1;
    dc.test_identities = 1;
    dc.uniform_per_identity = 4;
    dc.allow_custom_counts = true;
    return dc;
}

} // namespace

TEST_CASE("toy rig has the default dimensions and is deterministic")
{
    const auto& [rig, seg] = toy();
    CHECK(rig.num_identity() == 100);
    CHECK(rig.num_expression() == 53);
    CHECK(rig.num_vertices() == 642);
    CHECK(seg.num_segments() == 20);
    CHECK_NOTHROW(rig.validate());
    CHECK(make_toy_rig(ToyRigOptions{}).first.digest() == rig.digest());
    ToyRigOptions other;
    other.seed = 2;
    CHECK(make_toy_rig(other).first.digest() != rig.digest());

    const std::set<std::string> names(rig.expression_names.begin(), rig.expression_names.end());
    CHECK(names.size() == rig.expression_names.size());
    const Eigen::RowVector3d extent = rig.neutral.vertices().colwise().maxCoeff() - rig.neutral.vertices().colwise().minCoeff();
    CHECK(rig.expression_deltas.cwiseAbs().maxCoeff() <= 0.5 * extent.norm());
}

TEST_CASE("toy rig expression bases overlap")
{
    const auto& rig = toy().first;
    int overlapping_pairs = 0;
    for (int a = 0; a < rig.num_expression() && overlapping_pairs == 0; ++a) {
        const Vertices da = offsets_from_column(rig.expression_deltas.col(a));
        for (int b = a + 1; b < rig.num_expression(); ++b) {
            const Vertices db = offsets_from_column(rig.expression_deltas.col(b));
            for (Eigen::Index v = 0; v < da.rows(); ++v) {
                if (da.row(v).norm() > 1e-4 && db.row(v).norm() > 1e-4) {
                    ++overlapping_pairs;
                    break;
                }
            }
        }
    }
    CHECK(overlapping_pairs >= 1);
}

TEST_CASE("segmentation covers every vertex and every segment")
{
    const auto& [rig, seg] = toy();
    CHECK_NOTHROW(seg.validate(rig.num_vertices()));
    const auto counts = seg.counts();
    int total = 0;
    for (int c : counts) {
        CHECK(c > 0);
        total += c;
    }
    CHECK(total == rig.num_vertices());
    for (int l : {6, 14, 24}) {
        ToyRigOptions o;
        o.segment_count = l;
        CHECK(make_toy_rig(o).second.num_segments() == l);
    }
}

TEST_CASE("delta blendshape evaluation")
{
    const auto& rig = toy().first;
    const Eigen::VectorXd zid = Eigen::VectorXd::Zero(rig.num_identity());
    const Eigen::VectorXd zexp = Eigen::VectorXd::Zero(rig.num_expression());
    CHECK(evaluate_rig(rig, zid, zexp) == rig.neutral.vertices());

    const Eigen::VectorXd e7 = sample_expression_onehot(rig.num_expression(), 7);
    const Vertices expected = rig.neutral.vertices() + offsets_from_column(rig.expression_deltas.col(7));
    CHECK((evaluate_rig(rig, zid, e7) - expected).cwiseAbs().maxCoeff() <= 1e-12);

    std::mt19937_64 rng(11);
    const Eigen::VectorXd w_id = sample_identity_normal(rig.num_identity(), rng);
    const Eigen::VectorXd w_exp = sample_expression_uniform(rig.num_expression(), rng);
    CHECK((evaluate_rig(rig, w_id, w_exp) - naive_rig(rig, w_id, w_exp)).cwiseAbs().maxCoeff() <= 1e-12);

    CHECK_THROWS_AS(evaluate_rig(rig, zid.head(3), zexp), InvalidInput);
}

TEST_CASE("rig linearity and identity/expression separability")
{
    const auto& rig = toy().first;
    std::mt19937_64 rng(5);
    const Eigen::VectorXd zid = Eigen::VectorXd::Zero(rig.num_identity());
    const Eigen::VectorXd w1 = sample_expression_uniform(rig.num_expression(), rng);
    const Eigen::VectorXd w2 = sample_expression_uniform(rig.num_expression(), rng);
    const Vertices n = rig.neutral.vertices();
    const Vertices lhs = evaluate_rig(rig, zid, 0.3 * w1 + 1.7 * w2);
    const Vertices rhs = n + 0.3 * (evaluate_rig(rig, zid, w1) - n) + 1.7 * (evaluate_rig(rig, zid, w2) - n);
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() <= 1e-10);

    const Eigen::VectorXd a = sample_identity_normal(rig.num_identity(), rng);
    const Eigen::VectorXd b = sample_identity_normal(rig.num_identity(), rng);
    const Eigen::VectorXd z0 = Eigen::VectorXd::Zero(rig.num_expression());
    const Vertices da = evaluate_rig(rig, a, w1) - evaluate_rig(rig, a, z0);
    const Vertices db = evaluate_rig(rig, b, w1) - evaluate_rig(rig, b, z0);
    CHECK((da - db).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("coefficient samplers")
{
    std::mt19937_64 a(3), b(3);
    CHECK(sample_expression_uniform(53, a) == sample_expression_uniform(53, b));

    std::mt19937_64 rng(9);
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(53);
    bool in_range = true;
    for (int i = 0; i < 10000; ++i) {
        const Eigen::VectorXd w = sample_expression_uniform(53, rng);
        in_range = in_range && w.minCoeff() >= 0.0 && w.maxCoeff() <= 1.0;
        sum += w;
    }
    CHECK(in_range);
    const Eigen::VectorXd mean = sum / 10000.0;
    CHECK(mean.minCoeff() >= 0.47);
    CHECK(mean.maxCoeff() <= 0.53);

    Eigen::VectorXd ones = Eigen::VectorXd::Zero(53);
    for (int k = 0; k < 53; ++k) ones += sample_expression_onehot(53, k);
    CHECK(ones == Eigen::VectorXd::Ones(53));
    CHECK(sample_expression_onehot(53, 0)[0] == 1.0);
    CHECK_THROWS_AS(sample_expression_onehot(53, 53), InvalidInput);

    const double sigma = 1.5;
    double s = 0.0, s2 = 0.0;
    const int n = 10000;
    for (int i = 0; i < n / 100; ++i) {
        const Eigen::VectorXd w = sample_identity_normal(100, rng, sigma);
        s += w.sum();
        s2 += w.squaredNorm();
    }
    const double var = (s2 - s * s / n) / (n - 1);
    CHECK(std::abs(var - sigma * sigma) <= 0.05 * sigma * sigma);
    CHECK_THROWS_AS(sample_identity_normal(10, rng, 0.0), InvalidInput);
}

TEST_CASE("dataset defaults, splits and determinism")
{
    const auto& [rig, seg] = toy();
    DatasetConfig dc;
    CHECK(dc.total_identities() == 111);
    CHECK_NOTHROW(dc.validate());
    DatasetConfig custom = small_dataset();
    custom.allow_custom_counts = false;
    CHECK_THROWS_AS(custom.validate(), InvalidInput);

    const Dataset d = build_dataset(rig, seg, small_dataset());
    CHECK(d.identities_in(Split::train).size() == 3);
    CHECK(d.identities_in(Split::val).size() == 1);
    CHECK(d.identities_in(Split::test).size() == 1);
    std::set<int> seen;
    for (Split s : {Split::train, Split::val, Split::test}) {
        for (int id : d.identities_in(s)) CHECK(seen.insert(id).second);
    }
    CHECK(seen.size() == 5);

    for (int id : d.identities_in(Split::train)) {
        int onehot = 0, uniform = 0;
        for (const auto& s : d.samples) {
            if (s.identity != id) continue;
            if (s.kind == SampleKind::onehot) {
                ++onehot;
                CHECK(s.w_exp.sum() == 1.0);
                CHECK(s.w_exp.maxCoeff() == 1.0);
            }
            if (s.kind == SampleKind::uniform) ++uniform;
        }
        CHECK(onehot == rig.num_expression());
        CHECK(uniform == 4);
    }

    const Dataset again = build_dataset(rig, seg, small_dataset());
    CHECK(again.manifest() == d.manifest());
    CHECK(again.digest() == d.digest());
    DatasetConfig other = small_dataset();
    other.seed = 2;
    CHECK(build_dataset(rig, seg, other).digest() != d.digest());
}

TEST_CASE("scan-style samples carry a bounded smooth perturbation")
{
    const auto& [rig, seg] = toy();
    DatasetConfig dc = small_dataset();
    dc.scan_per_identity = 2;
    const Dataset d = build_dataset(rig, seg, dc);
    int scans = 0;
    for (const auto& s : d.samples) {
        if (s.kind != SampleKind::scan) continue;
        ++scans;
        CHECK(!s.has_blendshape_gt);
        const Vertices noise = d.sample_vertices(s) - d.expression_vertices(s.identity, s.w_exp);
        CHECK(noise.rowwise().norm().maxCoeff() == doctest::Approx(dc.scan_amplitude).epsilon(1e-9));
        CHECK(d.sample_vertices(s) == d.sample_vertices(s));
    }
    CHECK(scans == 2 * dc.total_identities());
}

TEST_CASE("rig export and dataset save round trip")
{
    testing::TempDir dir("rig");
    const auto& [rig, seg] = toy();
    export_rig(rig, seg, dir.path / "rig");
    const auto [back, back_seg] = load_external_rig(dir.path / "rig");
    CHECK(back.expression_deltas == rig.expression_deltas);
    CHECK(back.identity_deltas == rig.identity_deltas);
    CHECK(back.digest() == rig.digest());
    CHECK(back_seg.labels == seg.labels);

    const Dataset d = build_dataset(rig, seg, small_dataset());
    save_dataset(d, dir.path / "data");
    const Dataset loaded = load_dataset(dir.path / "data");
    CHECK(loaded.digest() == d.digest());
    CHECK(loaded.samples.size() == d.samples.size());
}

TEST_CASE("rig loader reports manifest mismatches and missing labels")
{
    testing::TempDir dir("rigerr");
    const auto& [rig, seg] = toy();
    export_rig(rig, seg, dir.path);
    nlohmann::json manifest;
    std::ifstream(dir.path / "manifest.json") >> manifest;
    manifest["K"] = 52;
    std::ofstream(dir.path / "manifest.json") << manifest.dump();
    CHECK_THROWS_WITH_AS(load_external_rig(dir.path), doctest::Contains("'K'"), Error);

    manifest["K"] = 53;
    std::ofstream(dir.path / "manifest.json") << manifest.dump();
    std::filesystem::remove(dir.path / "labels.exna");
    CHECK_THROWS_WITH_AS(load_external_rig(dir.path), doctest::Contains("segmentation"), Error);
}
