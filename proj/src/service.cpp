#include <exprclone/error.hpp>
#include <exprclone/service.hpp>

#include <httplib.h>

#include <cmath>
#include <mutex>

namespace exprclone {

namespace {

ServiceResponse error_response(int status, const std::string& message)
{
    return {status, {{"error", message}}};
}

std::vector<double> flatten(const Eigen::Ref<const Eigen::MatrixXd>& m)
{
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) out.push_back(m(r, c));
    }
    return out;
}

Eigen::VectorXd code_from_json(const nlohmann::json& request)
{
    if (!request.contains("code") || !request.at("code").is_array()) throw InvalidInput("request needs a 'code' array");
    const auto& arr = request.at("code");
    Eigen::VectorXd code(static_cast<Eigen::Index>(arr.size()));
    for (std::size_t i = 0; i < arr.size(); ++i) {
        if (!arr[i].is_number()) throw InvalidInput("code entry " + std::to_string(i) + " is not a number");
        code[static_cast<Eigen::Index>(i)] = arr[i].get<double>();
    }
    if (!code.allFinite()) throw InvalidInput("code contains non-finite values");
    return code;
}

nlohmann::json parse_body(const std::string& body)
{
    auto j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw InvalidInput("request body is not a JSON object");
    return j;
}

} // namespace

nlohmann::json mesh_to_json(const Mesh& mesh)
{
    std::vector<int> faces;
    faces.reserve(static_cast<std::size_t>(mesh.faces().size()));
    for (Eigen::Index f = 0; f < mesh.num_faces(); ++f) {
        for (int c = 0; c < 3; ++c) faces.push_back(mesh.faces()(f, c));
    }
    return {{"vertices", flatten(mesh.vertices())}, {"faces", faces}};
}

Mesh mesh_from_json(const nlohmann::json& j)
{
    if (!j.is_object() || !j.contains("vertices") || !j.contains("faces") || !j.at("vertices").is_array() ||
        !j.at("faces").is_array()) {
        throw InvalidInput("mesh needs 'vertices' and 'faces' arrays");
    }
    const auto& v = j.at("vertices");
    const auto& f = j.at("faces");
    if (v.size() % 3 != 0 || f.size() % 3 != 0) throw InvalidInput("mesh arrays must hold multiples of 3 entries");
    Vertices vertices(static_cast<Eigen::Index>(v.size() / 3), 3);
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!v[i].is_number()) throw InvalidInput("vertex entry " + std::to_string(i) + " is not a number");
        vertices.data()[i] = v[i].get<double>();
    }
    if (!vertices.allFinite()) throw InvalidInput("mesh vertices contain non-finite values");
    Faces faces(static_cast<Eigen::Index>(f.size() / 3), 3);
    for (std::size_t i = 0; i < f.size(); ++i) {
        if (!f[i].is_number_integer()) throw InvalidInput("face entry " + std::to_string(i) + " is not an integer");
        faces.data()[i] = f[i].get<int>();
    }
    return Mesh(std::move(vertices), std::move(faces));
}

InferenceService::InferenceService(Model model, std::string checkpoint_digest, SegmentationMap segmentation,
                                   std::vector<std::string> expression_names, std::shared_ptr<OperatorCache> operators)
    : m_model(std::move(model)),
      m_digest(std::move(checkpoint_digest)),
      m_segmentation(std::move(segmentation)),
      m_names(std::move(expression_names)),
      m_contexts(std::move(operators))
{
}

std::size_t InferenceService::target_count() const
{
    std::shared_lock lock(m_mutex);
    return m_targets.size();
}

ServiceResponse InferenceService::handle(const std::string& method, const std::string& path,
                                         const std::map<std::string, std::string>& query, const std::string& body)
{
    ++m_requests;
    try {
        if (method == "GET") {
            if (path == "/model/info") return model_info();
            if (path == "/expression/names") return expression_names();
            if (path == "/rig/segments") return segments(query);
        } else if (method == "POST") {
            if (path == "/model/reload") return error_response(409, "checkpoint is immutable while serving");
            if (path == "/target") return register_target(parse_body(body));
            if (path == "/animate") {
                const auto heat = query.find("heat");
                return animate(parse_body(body), heat != query.end() && heat->second == "1");
            }
            if (path == "/retarget") return retarget(parse_body(body));
        }
        return error_response(404, "no route for " + method + " " + path);
    } catch (const InvalidInput& e) {
        return error_response(422, e.what());
    } catch (const std::exception& e) {
        return error_response(500, e.what());
    }
}

ServiceResponse InferenceService::model_info() const
{
    return {200,
            {{"code_dims", k_code_dim},
             {"semantic_exp", m_model.config.semantic_expression},
             {"semantic_id", m_model.config.semantic_identity},
             {"L", m_model.config.segments},
             {"use_skinning_encoder", m_model.config.use_skinning_encoder},
             {"checkpoint_digest", m_digest}}};
}

ServiceResponse InferenceService::expression_names() const
{
    return {200, {{"names", m_names}}};
}

ServiceResponse InferenceService::segments(const std::map<std::string, std::string>& query) const
{
    const auto it = query.find("target_id");
    if (it == query.end()) return {200, {{"labels", m_segmentation.labels}, {"names", m_segmentation.names}}};
    const auto target = find_target({{"target_id", it->second}});
    if (!target) return error_response(404, "unknown target_id '" + it->second + "'");
    std::vector<int> labels;
    if (target->skinning.probabilities.size() != 0) {
        for (Eigen::Index v = 0; v < target->skinning.probabilities.rows(); ++v) {
            Eigen::Index best = 0;
            target->skinning.probabilities.row(v).maxCoeff(&best);
            labels.push_back(static_cast<int>(best));
        }
    } else if (target->context->num_vertices() == static_cast<Eigen::Index>(m_segmentation.labels.size())) {
        labels = m_segmentation.labels;
    } else {
        return error_response(422, "model has no skinning encoder and the target does not share the rig topology");
    }
    return {200, {{"labels", labels}, {"names", m_segmentation.names}}};
}

ServiceResponse InferenceService::register_target(const nlohmann::json& request)
{
    const Mesh mesh = mesh_from_json(request.contains("mesh") ? request.at("mesh") : request);
    const std::string id = mesh.content_hash();
    {
        std::shared_lock lock(m_mutex);
        if (m_targets.count(id)) return {200, {{"target_id", id}, {"num_vertices", mesh.num_vertices()}, {"cached", true}}};
    }
    auto prepared = std::make_shared<const PreparedTarget>(m_model.prepare_target(m_contexts.get(mesh)));
    std::unique_lock lock(m_mutex);
    const bool inserted = m_targets.emplace(id, std::move(prepared)).second;
    return {200, {{"target_id", id}, {"num_vertices", mesh.num_vertices()}, {"cached", !inserted}}};
}

std::shared_ptr<const PreparedTarget> InferenceService::find_target(const nlohmann::json& request) const
{
    if (!request.contains("target_id") || !request.at("target_id").is_string()) {
        throw InvalidInput("request needs a 'target_id' string");
    }
    std::shared_lock lock(m_mutex);
    const auto it = m_targets.find(request.at("target_id").get<std::string>());
    return it == m_targets.end() ? nullptr : it->second;
}

ServiceResponse InferenceService::animate(const nlohmann::json& request, bool heat) const
{
    const auto target = find_target(request);
    if (!target) return error_response(404, "unknown target_id '" + request.at("target_id").get<std::string>() + "'");
    const Mesh out = m_model.animate(*target, code_from_json(request));
    nlohmann::json body = {{"mesh", mesh_to_json(out)}};
    if (heat) {
        const Eigen::VectorXd magnitude = (out.vertices() - target->context->mesh.vertices()).rowwise().norm();
        body["heat"] = std::vector<double>(magnitude.data(), magnitude.data() + magnitude.size());
    }
    return {200, body};
}

ServiceResponse InferenceService::retarget(const nlohmann::json& request)
{
    const auto target = find_target(request);
    if (!target) return error_response(404, "unknown target_id '" + request.at("target_id").get<std::string>() + "'");
    if (!request.contains("source")) throw InvalidInput("request needs a 'source' mesh");
    const auto source = m_contexts.get(mesh_from_json(request.at("source")));
    const Eigen::VectorXd code = m_model.encode_expression(*source);
    const Mesh out = m_model.animate(*target, code);
    return {200, {{"mesh", mesh_to_json(out)}, {"code", std::vector<double>(code.data(), code.data() + code.size())}}};
}

void InferenceService::bind(httplib::Server& server)
{
    auto route = [this](const httplib::Request& req, httplib::Response& res) {
        std::map<std::string, std::string> query;
        for (const auto& [k, v] : req.params) query[k] = v;
        const ServiceResponse r = handle(req.method, req.path, query, req.body);
        res.status = r.status;
        res.set_content(r.body.dump(), "application/json");
    };
    for (const char* path : {"/model/info", "/expression/names", "/rig/segments"}) server.Get(path, route);
    for (const char* path : {"/target", "/animate", "/retarget", "/model/reload"}) server.Post(path, route);
    server.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
        if (res.body.empty()) {
            res.set_content(nlohmann::json{{"error", "no route for " + req.method + " " + req.path}}.dump(),
                            "application/json");
        }
    });
}

} // namespace exprclone
