#include "support.hpp"

#include <exprclone/alignment.hpp>
#include <exprclone/error.hpp>
#include <exprclone/evaluation.hpp>

#include <Eigen/Geometry>
#include <doctest.h>

#include <cmath>
#include <random>

using namespace exprclone;

namespace {

ContextCache& contexts()
{
    static ContextCache cache(std::make_shared<OperatorCache>(std::nullopt, 10));
    return cache;
}

std::pair<BlendshapeRig, SegmentationMap> small_rig()
{
    ToyRigOptions o;
    o.subdivision = 2;
    o.identity_count = 4;
    o.expression_count = 5;
    o.segment_count = 6;
    return make_toy_rig(o);
}

Dataset small_dataset(int scans)
{
    const auto [rig, seg] = small_rig();
    DatasetConfig dc;
    dc.train_identities = 2;
    dc.val_identities = 1;
    dc.test_identities = 1;
    dc.uniform_per_identity = 3;
    dc.include_onehot = false;
    dc.scan_per_identity = scans;
    dc.allow_custom_counts = true;
    return build_dataset(rig, seg, dc);
}

const Dataset& ict_dataset()
{
    static const Dataset d = small_dataset(0);
    return d;
}

TrainConfig small_train_config()
{
    TrainConfig tc;
    tc.model = testing::tiny_config(6, 5, 4);
    tc.steps = 1;
    tc.batch_size = 1;
    tc.validate_every = 0;
    tc.fast_gemm = false;
    return tc;
}

} // namespace

TEST_CASE("segment MSE isolates an error to its segment and matches a hand average")
{
    const auto [rig, seg] = small_rig();
    const Vertices gt = rig.neutral.vertices();
    const Eigen::Index n = gt.rows();

    Vertices pred = gt;
    for (Eigen::Index v = 0; v < n; ++v) {
        if (seg.labels[static_cast<std::size_t>(v)] == 2) pred(v, 1) += 0.01;
    }
    const SegmentReport one = eval_segment_mse(pred, gt, seg, false);
    for (int l = 0; l < seg.num_segments(); ++l) {
        INFO(l);
        if (l == 2) CHECK(one.per_segment[l] == doctest::Approx(1e-4).epsilon(1e-12));
        else CHECK(one.per_segment[l] == 0.0);
    }

    const Vertices noisy = testing::jitter(gt, 0.02, 9);
    const SegmentReport r = eval_segment_mse(noisy, gt, seg, false);
    std::vector<double> sums(static_cast<std::size_t>(seg.num_segments()), 0.0);
    std::vector<int> counts(sums.size(), 0);
    double total = 0.0;
    for (Eigen::Index v = 0; v < n; ++v) {
        double d = 0.0;
        for (int c = 0; c < 3; ++c) d += (noisy(v, c) - gt(v, c)) * (noisy(v, c) - gt(v, c));
        const auto l = static_cast<std::size_t>(seg.labels[static_cast<std::size_t>(v)]);
        sums[l] += d;
        counts[l] += 1;
        total += d;
    }
    double mean = 0.0;
    for (std::size_t l = 0; l < sums.size(); ++l) {
        const double expect = sums[l] / counts[l];
        CHECK(std::abs(r.per_segment[static_cast<Eigen::Index>(l)] - expect) <= 1e-12 * expect);
        mean += expect;
    }
    mean /= static_cast<double>(sums.size());
    CHECK(std::abs(r.segment_mean - mean) <= 1e-12 * mean);
    CHECK(std::abs(r.whole_mesh - total / static_cast<double>(n)) <= 1e-12 * r.whole_mesh);

    const auto j = r.to_json();
    CHECK(j.at("per_segment").size() == static_cast<std::size_t>(seg.num_segments()));
    CHECK_THROWS_AS(eval_segment_mse(noisy.topRows(n - 1), gt, seg, false), InvalidInput);
}

TEST_CASE("alignment removes a rigid motion of the prediction")
{
    const auto [rig, seg] = small_rig();
    const Vertices gt = testing::jitter(rig.neutral.vertices(), 0.01, 4);
    const Eigen::Matrix3d r = Eigen::AngleAxisd(0.7, Eigen::Vector3d(1.0, -2.0, 0.5).normalized()).toRotationMatrix();
    const Eigen::RowVector3d t(0.3, -0.1, 2.0);
    const Vertices moved = (gt * r.transpose()).rowwise() + t;
    CHECK(retarget_error(moved, gt, false) > 1e-2);
    CHECK(retarget_error(moved, gt, true) < 1e-10);
    CHECK(eval_segment_mse(moved, gt, seg, true).segment_mean < 1e-10);
}

TEST_CASE("inverse rig recovers the coefficients that generated a rig mesh")
{
    const auto [rig, seg] = small_rig();
    const InvRigSolver solver(rig);
    REQUIRE(!solver.rank_deficient());
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 5; ++trial) {
        const Eigen::VectorXd w_id = sample_identity_normal(rig.num_identity(), rng);
        const Eigen::VectorXd w = sample_expression_uniform(rig.num_expression(), rng);
        const Vertices target = evaluate_rig(rig, w_id, w);

        const InvRigSolution free = solver.solve(target, w_id);
        CHECK((free.w - w).cwiseAbs().maxCoeff() <= 1e-8);
        CHECK(free.iterations == 0);
        CHECK(free.mse < 1e-20);

        const InvRigSolution boxed = solver.solve(target, w_id, true);
        CHECK((boxed.w - w).cwiseAbs().maxCoeff() <= 1e-6);
        CHECK(boxed.w.minCoeff() >= 0.0);
        CHECK(boxed.w.maxCoeff() <= 1.0);
    }
    const Eigen::VectorXd w_id = Eigen::VectorXd::Zero(rig.num_identity());
    CHECK(solver.solve(rig.neutral.vertices(), w_id).w.cwiseAbs().maxCoeff() <= 1e-12);
    CHECK_THROWS_AS(solver.solve(rig.neutral.vertices().topRows(3), w_id), InvalidInput);
}

TEST_CASE("inverse rig solution is a global minimum on noisy targets")
{
    const auto [rig, seg] = small_rig();
    const InvRigSolver solver(rig);
    std::mt19937_64 rng(22);
    const Eigen::VectorXd w_id = sample_identity_normal(rig.num_identity(), rng);
    const Vertices target =
        testing::jitter(evaluate_rig(rig, w_id, sample_expression_uniform(rig.num_expression(), rng)), 0.005, 23);
    const Vertices neutral_id = evaluate_rig(rig, w_id, Eigen::VectorXd::Zero(rig.num_expression()));
    auto objective = [&](const Eigen::VectorXd& w) { return mse(neutral_id + expression_offsets(rig, w), target); };

    const InvRigSolution s = solver.solve(target, w_id);
    CHECK(s.mse > 0.0);
    CHECK(std::abs(objective(s.w) - s.mse) <= 1e-12 * s.mse);
    const InvRigSolution boxed = solver.solve(target, w_id, true);
    CHECK(boxed.mse >= s.mse - 1e-15);

    std::normal_distribution<double> nd(0.0, 1.0);
    int worse = 0;
    for (int d = 0; d < 100; ++d) {
        Eigen::VectorXd dir(rig.num_expression());
        for (auto& x : dir) x = nd(rng);
        dir.normalize();
        worse += objective(s.w + 1e-4 * dir) >= s.mse ? 1 : 0;
    }
    CHECK(worse == 100);
}

TEST_CASE("inverse-rig evaluation bounds the encoder and rejects scan-style splits")
{
    const Dataset& d = ict_dataset();
    const Model model = Model::init(testing::tiny_config(6, 5, 4), 3);
    const InvRigReport r = eval_inverse_rig(model, d, Split::test, contexts());
    CHECK(r.samples.size() == 3);
    CHECK(r.bound_holds);
    CHECK(r.encoder_mse > 0.0);
    // Dataset meshes come straight from the rig, so the oracle is exact.
    CHECK(r.oracle_mse < 1e-20);
    CHECK(r.encoder_mse >= r.oracle_mse);
    const auto j = r.to_json();
    CHECK(j.contains("ratio"));

    const Dataset with_scans = small_dataset(1);
    CHECK_THROWS_WITH_AS(eval_inverse_rig(model, with_scans, Split::test, contexts()),
                         doctest::Contains("scan-style"), InvalidInput);
}

TEST_CASE("self-retarget evaluation covers the split and honours max_samples")
{
    const Dataset& d = ict_dataset();
    const Model model = Model::init(testing::tiny_config(6, 5, 4), 3);
    const SelfRetargetReport all = eval_self_retarget(model, d, Split::val, contexts());
    CHECK(all.samples.size() == 3);
    double mean = 0.0;
    for (const auto& e : all.samples) {
        CHECK(e.mse <= e.unaligned_mse + 1e-15);
        mean += e.mse;
    }
    CHECK(all.mean == doctest::Approx(mean / 3.0).epsilon(1e-14));

    EvalOptions o;
    o.max_samples = 2;
    o.align = false;
    const SelfRetargetReport some = eval_self_retarget(model, d, Split::val, contexts(), o);
    CHECK(some.samples.size() == 2);
    CHECK(!some.aligned);
    for (const auto& e : some.samples) CHECK(e.mse == e.unaligned_mse);
}

TEST_CASE("ablation comparison: identical checkpoints give identical rows")
{
    const Dataset& d = ict_dataset();
    const TrainConfig base = small_train_config();
    const Model model = Model::init(base.model, 5);
    std::vector<AblationRun> runs;
    for (Variant v : all_variants()) {
        TrainState s = init_train_state(variant_config(base, v), d.digest());
        s.model = model;
        runs.push_back({v, std::move(s), std::nullopt});
    }
    const AblationTable table = compare_ablations(runs, d, Split::val, contexts());
    REQUIRE(table.rows.size() == 4);
    for (const auto& r : table.rows) {
        CHECK(r.checkpoint_digest == table.rows[0].checkpoint_digest);
        CHECK(r.self_retarget_mse == table.rows[0].self_retarget_mse);
        CHECK(r.segment_mean_mse == table.rows[0].segment_mean_mse);
        CHECK(r.invrig_mse == table.rows[0].invrig_mse);
    }
    const auto j = table.to_json();
    CHECK(j.at("rows").size() == 4);
    CHECK(j.at("columns").size() == 3);
    CHECK(table.row("full").variant == "full");
    CHECK_THROWS_AS(table.row("nope"), InvalidInput);

    std::vector<AblationRun> short_runs(runs.begin(), runs.end() - 1);
    CHECK_THROWS_AS(compare_ablations(short_runs, d, Split::val, contexts()), InvalidInput);

    std::vector<AblationRun> bad = runs;
    bad[0].state.dataset_digest = "other";
    CHECK_THROWS_WITH_AS(compare_ablations(bad, d, Split::val, contexts()), doctest::Contains("trained on dataset"), Error);

    bad = runs;
    bad[0].state.config.learning_rate *= 2.0;
    CHECK_THROWS_WITH_AS(compare_ablations(bad, d, Split::val, contexts()), doctest::Contains("config digest mismatch"),
                         Error);
}
