#include "support.hpp"

#include <exprclone/error.hpp>
#include <exprclone/service.hpp>

#include <doctest.h>
#include <httplib.h>

#include <mutex>
#include <thread>

using namespace exprclone;
using nlohmann::json;

namespace {

std::pair<BlendshapeRig, SegmentationMap> small_rig()
{
    ToyRigOptions o;
    o.subdivision = 2;
    o.identity_count = 4;
    o.expression_count = 5;
    o.segment_count = 6;
    return make_toy_rig(o);
}

struct Fixture {
    std::pair<BlendshapeRig, SegmentationMap> parts = small_rig();
    const BlendshapeRig& rig = parts.first;
    const SegmentationMap& seg = parts.second;
    std::unique_ptr<InferenceService> service;

    Fixture()
    {
        Model model = Model::init(testing::tiny_config(6, 5, 4), 7);
        const std::string digest = model.digest();
        service = std::make_unique<InferenceService>(std::move(model), digest, seg, rig.expression_names,
                                                     std::make_shared<OperatorCache>(std::nullopt, 10));
    }

    ServiceResponse post(const std::string& path, const json& body, std::map<std::string, std::string> query = {})
    {
        return service->handle("POST", path, query, body.dump());
    }

    std::string register_mesh(const Mesh& mesh)
    {
        const ServiceResponse r = post("/target", {{"mesh", mesh_to_json(mesh)}});
        REQUIRE(r.status == 200);
        return r.body.at("target_id").get<std::string>();
    }

    Mesh expressive(std::uint64_t seed) const
    {
        std::mt19937_64 rng(seed);
        return rig.neutral.with_vertices(evaluate_rig(rig, Eigen::VectorXd::Zero(rig.num_identity()),
                                                      sample_expression_uniform(rig.num_expression(), rng)));
    }
};

json code_of(int n, double value)
{
    return std::vector<double>(static_cast<std::size_t>(n), value);
}

} // namespace

TEST_CASE("mesh JSON round trips and rejects malformed payloads")
{
    const Mesh g = testing::bumpy_grid();
    const Mesh back = mesh_from_json(mesh_to_json(g));
    CHECK(back.vertices() == g.vertices());
    CHECK(back.faces() == g.faces());
    CHECK_THROWS_AS(mesh_from_json(json{{"vertices", {1.0, 2.0}}, {"faces", json::array()}}), InvalidInput);
    CHECK_THROWS_AS(mesh_from_json(json{{"vertices", json::array()}}), InvalidInput);
    CHECK_THROWS_AS(mesh_from_json(json{{"vertices", {0.0, 0.0, 0.0}}, {"faces", {0.5, 1, 2}}}), InvalidInput);
}

TEST_CASE("read-only endpoints")
{
    Fixture fx;
    const auto info = fx.service->handle("GET", "/model/info", {}, "");
    CHECK(info.status == 200);
    CHECK(info.body.at("code_dims") == 128);
    CHECK(info.body.at("semantic_exp") == 5);
    CHECK(info.body.at("semantic_id") == 4);
    CHECK(info.body.at("L") == 6);
    CHECK(info.body.at("checkpoint_digest") == fx.service->checkpoint_digest());

    const auto names = fx.service->handle("GET", "/expression/names", {}, "");
    CHECK(names.body.at("names").size() == 5);

    const auto segs = fx.service->handle("GET", "/rig/segments", {}, "");
    CHECK(segs.status == 200);
    CHECK(segs.body.at("labels").get<std::vector<int>>() == fx.seg.labels);

    const std::string id = fx.register_mesh(fx.rig.neutral);
    const auto predicted = fx.service->handle("GET", "/rig/segments", {{"target_id", id}}, "");
    CHECK(predicted.status == 200);
    const auto labels = predicted.body.at("labels").get<std::vector<int>>();
    CHECK(labels.size() == fx.seg.labels.size());
    for (int l : labels) CHECK((l >= 0 && l < 6));
    CHECK(fx.service->handle("GET", "/rig/segments", {{"target_id", "missing"}}, "").status == 404);
}

TEST_CASE("target registration is content-addressed")
{
    Fixture fx;
    const auto first = fx.post("/target", {{"mesh", mesh_to_json(fx.rig.neutral)}});
    CHECK(first.status == 200);
    CHECK(first.body.at("cached") == false);
    CHECK(first.body.at("num_vertices") == fx.rig.num_vertices());
    const auto again = fx.post("/target", mesh_to_json(fx.rig.neutral));
    CHECK(again.body.at("cached") == true);
    CHECK(again.body.at("target_id") == first.body.at("target_id"));
    CHECK(fx.service->target_count() == 1);
    fx.register_mesh(fx.expressive(3));
    CHECK(fx.service->target_count() == 2);
}

TEST_CASE("error statuses")
{
    Fixture fx;
    const std::string id = fx.register_mesh(fx.rig.neutral);

    const auto bad_code = fx.post("/animate", {{"target_id", id}, {"code", code_of(54, 0.1)}});
    CHECK(bad_code.status == 422);
    CHECK(bad_code.body.contains("error"));
    CHECK(fx.post("/animate", {{"target_id", id}, {"code", {0.1, "x", 0.3, 0.4, 0.5}}}).status == 422);
    CHECK(fx.post("/animate", {{"target_id", id}}).status == 422);
    CHECK(fx.service->handle("POST", "/animate", {}, "not json").status == 422);
    CHECK(fx.post("/animate", {{"target_id", "unknown"}, {"code", code_of(5, 0.1)}}).status == 404);
    CHECK(fx.post("/retarget", {{"target_id", "unknown"}, {"source", mesh_to_json(fx.rig.neutral)}}).status == 404);
    CHECK(fx.post("/retarget", {{"target_id", id}}).status == 422);
    CHECK(fx.post("/target", {{"mesh", {{"vertices", {1.0}}, {"faces", json::array()}}}}).status == 422);
    CHECK(fx.post("/model/reload", json::object()).status == 409);
    CHECK(fx.service->handle("GET", "/nope", {}, "").status == 404);
    CHECK(fx.service->handle("DELETE", "/target", {}, "").status == 404);
}

TEST_CASE("animate accepts semantic and full codes and is idempotent")
{
    Fixture fx;
    const std::string id = fx.register_mesh(fx.rig.neutral);
    json semantic = {0.2, 0.0, 0.9, 0.1, 0.5};
    std::vector<double> full(128, 0.0);
    for (int i = 0; i < 5; ++i) full[static_cast<std::size_t>(i)] = semantic[static_cast<std::size_t>(i)];

    const auto a = fx.post("/animate", {{"target_id", id}, {"code", semantic}});
    const auto b = fx.post("/animate", {{"target_id", id}, {"code", full}});
    const auto c = fx.post("/animate", {{"target_id", id}, {"code", semantic}});
    REQUIRE(a.status == 200);
    CHECK(a.body.dump() == b.body.dump());
    CHECK(a.body.dump() == c.body.dump());
    CHECK(!a.body.contains("heat"));

    const auto heat = fx.post("/animate", {{"target_id", id}, {"code", semantic}}, {{"heat", "1"}});
    REQUIRE(heat.body.contains("heat"));
    const auto h = heat.body.at("heat").get<std::vector<double>>();
    const Mesh out = mesh_from_json(heat.body.at("mesh"));
    REQUIRE(h.size() == static_cast<std::size_t>(out.num_vertices()));
    for (Eigen::Index v = 0; v < out.num_vertices(); ++v) {
        const double expect = (out.vertices().row(v) - fx.rig.neutral.vertices().row(v)).norm();
        CHECK(std::abs(h[static_cast<std::size_t>(v)] - expect) <= 1e-15);
    }
    CHECK(out.faces() == fx.rig.neutral.faces());
}

TEST_CASE("retarget then animate with the returned code is byte-identical")
{
    Fixture fx;
    const std::string id = fx.register_mesh(fx.rig.neutral);
    const auto r = fx.post("/retarget", {{"target_id", id}, {"source", mesh_to_json(fx.expressive(11))}});
    REQUIRE(r.status == 200);
    CHECK(r.body.at("code").size() == 128);
    const auto a = fx.post("/animate", {{"target_id", id}, {"code", r.body.at("code")}});
    REQUIRE(a.status == 200);
    CHECK(a.body.at("mesh").dump() == r.body.at("mesh").dump());
}

TEST_CASE("HTTP binding: interleaved clients see consistent results")
{
    Fixture fx;
    httplib::Server server;
    fx.service->bind(server);
    const int port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread listener([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    httplib::Client client("127.0.0.1", port);
    auto info = client.Get("/model/info");
    REQUIRE(info);
    CHECK(info->status == 200);
    CHECK(info->get_header_value("Content-Type") == "application/json");

    auto reg = client.Post("/target", json{{"mesh", mesh_to_json(fx.rig.neutral)}}.dump(), "application/json");
    REQUIRE(reg);
    const std::string id = json::parse(reg->body).at("target_id");
    const std::string other_id = fx.register_mesh(fx.expressive(5));

    const std::string body_a = json{{"target_id", id}, {"code", {0.1, 0.2, 0.3, 0.4, 0.5}}}.dump();
    const std::string body_b = json{{"target_id", other_id}, {"code", {0.9, 0.0, 0.0, 0.7, 0.0}}}.dump();
    const std::string expect_a = fx.service->handle("POST", "/animate", {}, body_a).body.dump();
    const std::string expect_b = fx.service->handle("POST", "/animate", {}, body_b).body.dump();

    bool all_match = true;
    std::vector<std::thread> workers;
    std::mutex m;
    for (int t = 0; t < 4; ++t) {
        workers.emplace_back([&, t] {
            httplib::Client c("127.0.0.1", port);
            for (int i = 0; i < 3; ++i) {
                const bool use_a = (t + i) % 2 == 0;
                auto res = c.Post("/animate", use_a ? body_a : body_b, "application/json");
                std::lock_guard lock(m);
                all_match = all_match && res && res->status == 200 && res->body == (use_a ? expect_a : expect_b);
            }
        });
    }
    for (auto& w : workers) w.join();
    CHECK(all_match);

    auto bad = client.Post("/animate", json{{"target_id", id}, {"code", code_of(54, 0.0)}}.dump(), "application/json");
    REQUIRE(bad);
    CHECK(bad->status == 422);
    auto reload = client.Post("/model/reload", "{}", "application/json");
    REQUIRE(reload);
    CHECK(reload->status == 409);
    auto missing = client.Get("/does/not/exist");
    REQUIRE(missing);
    CHECK(missing->status == 404);
    CHECK(json::parse(missing->body).contains("error"));

    server.stop();
    listener.join();
}
