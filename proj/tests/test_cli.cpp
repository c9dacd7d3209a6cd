#include "support.hpp"

#include <exprclone/cli.hpp>
#include <exprclone/error.hpp>

#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

using namespace exprclone;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out;
    std::string err;
};

Run cli(std::vector<std::string> args)
{
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

const std::vector<std::string> k_small_data = {
    "--set", "rig.subdivision=2",         "--set", "rig.identity_count=4",     "--set", "rig.expression_count=5",
    "--set", "rig.segment_count=6",       "--set", "dataset.train_identities=2", "--set", "dataset.val_identities=1",
    "--set", "dataset.test_identities=1", "--set", "dataset.uniform_per_identity=2", "--set", "dataset.include_onehot=false",
    "--set", "dataset.allow_custom_counts=true"};

const std::vector<std::string> k_small_train = {
    "--set", "steps=2",          "--set", "batch_size=1",         "--set", "validate_every=0", "--set", "checkpoint_every=0",
    "--set", "model.width=8",    "--set", "model.blocks=1",       "--set", "model.decoder_hidden=16",
    "--set", "model.norm_groups=4", "--set", "model.eigen_count=10"};

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b)
{
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

} // namespace

TEST_CASE("overrides descend dotted keys and parse JSON values")
{
    nlohmann::json j = {{"model", {{"width", 128}}}};
    apply_overrides(j, {"model.width=8", "lr=1e-3", "name=abc", "flag=true", "a.b.c=[1,2]"});
    CHECK(j["model"]["width"] == 8);
    CHECK(j["lr"] == 1e-3);
    CHECK(j["name"] == "abc");
    CHECK(j["flag"] == true);
    CHECK(j["a"]["b"]["c"] == nlohmann::json({1, 2}));
    CHECK_THROWS_AS(apply_overrides(j, {"novalue"}), Error);
    CHECK_THROWS_AS(apply_overrides(j, {"=3"}), Error);
    CHECK_THROWS_AS(apply_overrides(j, {"lr.x=3"}), Error);

    testing::TempDir dir("cfg");
    std::ofstream(dir.path / "c.json") << R"({"steps": 10, "model": {"width": 4}})";
    const auto loaded = load_config((dir.path / "c.json").string(), {"steps=3"});
    CHECK(loaded["steps"] == 3);
    CHECK(loaded["model"]["width"] == 4);
    std::ofstream(dir.path / "bad.json") << "[1,2]";
    CHECK_THROWS_AS(load_config((dir.path / "bad.json").string(), {}), InvalidInput);
    CHECK_THROWS_AS(load_config((dir.path / "missing.json").string(), {}), Error);
}

TEST_CASE("usage errors exit with 2")
{
    CHECK(cli({}).code == 2);
    CHECK(cli({"frobnicate"}).code == 2);
    CHECK(cli({"gen-data"}).code == 2);
    CHECK(cli({"gen-data", "--out", "x", "--bogus"}).code == 2);
    CHECK(cli({"gen-data", "--out", "x", "--set", "oops"}).code == 2);
    ::unsetenv("EXPRCLONE_CHECKPOINT");
    const Run r = cli({"invrig", "--source", "a.obj", "--out", "b.json"});
    CHECK(r.code == 2);
    CHECK(r.err.find("EXPRCLONE_CHECKPOINT") != std::string::npos);
    CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("runtime errors exit with 1")
{
    testing::TempDir dir("cli_err");
    CHECK(cli({"train", "--data", (dir.path / "nothing").string(), "--out", (dir.path / "o").string()}).code == 1);
    CHECK(cli({"invrig", "--checkpoint", (dir.path / "none.exna").string(), "--source", "a.obj", "--out", "b.json"})
              .code == 1);
}

TEST_CASE("gen-data is deterministic and --set reaches the dataset")
{
    testing::TempDir dir("gen");
    const auto a = dir.path / "a", b = dir.path / "b", c = dir.path / "c";
    REQUIRE(cli(concat({"gen-data", "--out", a.string()}, k_small_data)).code == 0);
    REQUIRE(cli(concat({"gen-data", "--out", b.string()}, k_small_data)).code == 0);
    REQUIRE(cli(concat({"gen-data", "--out", c.string(), "--set", "dataset.seed=9"}, k_small_data)).code == 0);
    CHECK(slurp(a / "dataset.json") == slurp(b / "dataset.json"));
    CHECK(slurp(a / "coefficients.exna") == slurp(b / "coefficients.exna"));
    CHECK(slurp(a / "dataset.json") != slurp(c / "dataset.json"));
    const auto manifest = nlohmann::json::parse(slurp(a / "dataset.json"));
    CHECK(manifest.dump().find("\"uniform_per_identity\":2") != std::string::npos);
}

TEST_CASE("train, eval, invrig and retarget run end to end")
{
    testing::TempDir dir("e2e");
    const auto data = dir.path / "data", run = dir.path / "run";
    REQUIRE(cli(concat({"gen-data", "--out", data.string()}, k_small_data)).code == 0);
    const Run tr = cli(concat({"train", "--data", data.string(), "--out", run.string()}, k_small_train));
    INFO(tr.err);
    REQUIRE(tr.code == 0);
    const fs::path ckpt = run / "final.exna";
    REQUIRE(fs::exists(ckpt));

    const auto report = dir.path / "report.json";
    const Run ev = cli({"eval", "--checkpoint", ckpt.string(), "--data", data.string(), "--split", "test", "--out",
                        report.string()});
    INFO(ev.err);
    REQUIRE(ev.code == 0);
    const auto rj = nlohmann::json::parse(slurp(report));
    CHECK(rj.contains("mean_self_retarget_mse"));

    const Mesh head = load_mesh(data / "rig" / "neutral.obj", false);
    const Mesh moved = head.with_vertices(testing::jitter(head.vertices(), 0.002, 3));
    save_mesh(moved, dir.path / "src.obj");

    ::setenv("EXPRCLONE_CHECKPOINT", ckpt.string().c_str(), 1);
    const auto codes = dir.path / "codes.json";
    REQUIRE(cli({"invrig", "--source", (dir.path / "src.obj").string(), "--out", codes.string()}).code == 0);
    const auto cj = nlohmann::json::parse(slurp(codes));
    CHECK(cj.at("code").size() == 128);
    CHECK(cj.at("semantic").size() == 5);

    const auto out = dir.path / "out.obj";
    REQUIRE(cli({"retarget", "--source", (dir.path / "src.obj").string(), "--target",
                 (data / "rig" / "neutral.obj").string(), "--out", out.string()})
                .code == 0);
    const Mesh result = load_mesh(out, false);
    CHECK(result.num_vertices() == head.num_vertices());
    CHECK(result.faces() == head.faces());
    ::unsetenv("EXPRCLONE_CHECKPOINT");
}
