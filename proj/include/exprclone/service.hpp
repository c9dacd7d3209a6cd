#pragma once

#include <exprclone/encoders.hpp>
#include <exprclone/model.hpp>
#include <exprclone/rig.hpp>

#include <json.hpp>

#include <atomic>
#include <map>
#include <memory>
#include <shared_mutex>
#include <string>

namespace httplib {
class Server;
}

namespace exprclone {

struct ServiceResponse {
    int status = 200;
    nlohmann::json body;
};

/// Mesh payload {vertices: flat xyz list, faces: flat index list}.
nlohmann::json mesh_to_json(const Mesh& mesh);
Mesh mesh_from_json(const nlohmann::json& j);

///
/// HTTP inference over one immutable checkpoint.
///
/// Targets are registered once by content hash and then referenced by id.
/// All handlers are safe to call concurrently.
///
class InferenceService {
public:
    InferenceService(Model model, std::string checkpoint_digest, SegmentationMap segmentation,
                     std::vector<std::string> expression_names, std::shared_ptr<OperatorCache> operators);

    /// Transport-free dispatch, used by the HTTP binding and by tests.
    ServiceResponse handle(const std::string& method, const std::string& path,
                           const std::map<std::string, std::string>& query, const std::string& body);

    /// Registers every route on `server`.
    void bind(httplib::Server& server);

    const std::string& checkpoint_digest() const { return m_digest; }
    std::size_t target_count() const;
    long request_count() const { return m_requests.load(); }

    ServiceResponse model_info() const;
    ServiceResponse expression_names() const;
    ServiceResponse segments(const std::map<std::string, std::string>& query) const;
    ServiceResponse register_target(const nlohmann::json& request);
    ServiceResponse animate(const nlohmann::json& request, bool heat) const;
    ServiceResponse retarget(const nlohmann::json& request);

private:
    std::shared_ptr<const PreparedTarget> find_target(const nlohmann::json& request) const;

    const Model m_model;
    const std::string m_digest;
    const SegmentationMap m_segmentation;
    const std::vector<std::string> m_names;
    ContextCache m_contexts;
    mutable std::shared_mutex m_mutex;
    std::map<std::string, std::shared_ptr<const PreparedTarget>> m_targets;
    std::atomic<long> m_requests{0};
};

} // namespace exprclone
