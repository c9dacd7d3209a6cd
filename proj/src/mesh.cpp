#include <exprclone/error.hpp>
#include <exprclone/hashing.hpp>
#include <exprclone/mesh.hpp>

#include <Eigen/Geometry>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

namespace exprclone {

namespace {

double face_area(const Vertices& v, int a, int b, int c)
{
    const Eigen::Vector3d e1 = v.row(b) - v.row(a);
    const Eigen::Vector3d e2 = v.row(c) - v.row(a);
    return 0.5 * e1.cross(e2).norm();
}

void validate(const Vertices& vertices, const Faces& faces)
{
    const Eigen::Index n = vertices.rows();
    if (n < 4) throw InvalidInput("mesh needs at least 4 vertices, got " + std::to_string(n));
    if (faces.rows() < 2) throw InvalidInput("mesh needs at least 2 faces, got " + std::to_string(faces.rows()));
    if (!vertices.allFinite()) throw InvalidInput("mesh has non-finite vertex coordinates");
    for (Eigen::Index f = 0; f < faces.rows(); ++f) {
        const int a = faces(f, 0), b = faces(f, 1), c = faces(f, 2);
        for (int idx : {a, b, c}) {
            if (idx < 0 || idx >= n) {
                throw InvalidInput("face " + std::to_string(f) + " references vertex " + std::to_string(idx) +
                                   " outside [0, " + std::to_string(n) + ")");
            }
        }
        if (a == b || b == c || a == c) {
            throw InvalidInput("face " + std::to_string(f) + " repeats a vertex index");
        }
        if (face_area(vertices, a, b, c) <= k_min_face_area) {
            throw InvalidInput("face " + std::to_string(f) + " is degenerate (zero area)");
        }
    }
}

} // namespace

Mesh::Mesh(Vertices vertices, Faces faces)
    : m_vertices(std::move(vertices))
    , m_faces(std::move(faces))
{
    validate(m_vertices, m_faces);
}

Mesh Mesh::with_vertices(Vertices vertices) const
{
    if (vertices.rows() != m_vertices.rows()) {
        throw InvalidInput("vertex count mismatch: mesh has " + std::to_string(m_vertices.rows()) + ", got " +
                           std::to_string(vertices.rows()));
    }
    return Mesh(std::move(vertices), m_faces);
}

std::string Mesh::content_hash() const
{
    Fnv1a h;
    h.update_pod(m_vertices.rows());
    h.update_array(m_vertices.data(), static_cast<std::size_t>(m_vertices.size()));
    h.update_pod(m_faces.rows());
    h.update_array(m_faces.data(), static_cast<std::size_t>(m_faces.size()));
    return h.hex();
}

Mesh normalize_mesh(const Mesh& mesh)
{
    const Eigen::RowVector3d lo = mesh.vertices().colwise().minCoeff();
    const Eigen::RowVector3d hi = mesh.vertices().colwise().maxCoeff();
    const double diag = (hi - lo).norm();
    const Eigen::RowVector3d center = 0.5 * (lo + hi);
    Vertices v = (mesh.vertices().rowwise() - center) / diag;
    return Mesh(std::move(v), mesh.faces());
}

Mesh parse_obj(const std::string& text, const std::string& origin, bool normalize)
{
    std::vector<Eigen::RowVector3d> verts;
    std::vector<Eigen::RowVector3i> faces;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    auto fail = [&](const std::string& what) {
        throw InvalidInput(origin + ":" + std::to_string(line_no) + ": " + what);
    };
    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream ls(line);
        std::string tag;
        if (!(ls >> tag) || tag[0] == '#') continue;
        if (tag == "v") {
            Eigen::RowVector3d p;
            if (!(ls >> p[0] >> p[1] >> p[2])) fail("malformed vertex");
            verts.push_back(p);
        } else if (tag == "f") {
            std::vector<int> idx;
            std::string tok;
            while (ls >> tok) {
                const std::string head = tok.substr(0, tok.find('/'));
                int i = 0;
                try {
                    std::size_t used = 0;
                    i = std::stoi(head, &used);
                    if (used != head.size()) fail("malformed face index '" + tok + "'");
                } catch (const std::logic_error&) {
                    fail("malformed face index '" + tok + "'");
                }
                if (i == 0) fail("face index 0 is invalid (OBJ indices are 1-based)");
                // Negative indices are relative to the current vertex count.
                const int resolved = i > 0 ? i - 1 : static_cast<int>(verts.size()) + i;
                if (resolved < 0 || resolved >= static_cast<int>(verts.size())) {
                    fail("face index " + std::to_string(i) + " out of range");
                }
                idx.push_back(resolved);
            }
            if (idx.size() < 3) fail("face with fewer than 3 vertices");
            if (idx.size() > 4) fail("face arity " + std::to_string(idx.size()) + " not supported (max 4)");
            faces.emplace_back(idx[0], idx[1], idx[2]);
            if (idx.size() == 4) faces.emplace_back(idx[0], idx[2], idx[3]);
        }
    }
    Vertices v(static_cast<Eigen::Index>(verts.size()), 3);
    for (std::size_t i = 0; i < verts.size(); ++i) v.row(static_cast<Eigen::Index>(i)) = verts[i];
    Faces f(static_cast<Eigen::Index>(faces.size()), 3);
    for (std::size_t i = 0; i < faces.size(); ++i) f.row(static_cast<Eigen::Index>(i)) = faces[i];
    try {
        Mesh mesh(std::move(v), std::move(f));
        return normalize ? normalize_mesh(mesh) : mesh;
    } catch (const InvalidInput& e) {
        throw InvalidInput(origin + ": " + e.what());
    }
}

Mesh load_mesh(const std::filesystem::path& path, bool normalize)
{
    std::ifstream is(path);
    if (!is) throw Error("cannot open mesh '" + path.string() + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_obj(ss.str(), path.string(), normalize);
}

std::string format_obj(const Mesh& mesh)
{
    std::string out;
    out.reserve(static_cast<std::size_t>(mesh.num_vertices() * 40 + mesh.num_faces() * 24));
    char buf[128];
    for (Eigen::Index i = 0; i < mesh.num_vertices(); ++i) {
        const auto p = mesh.vertices().row(i);
        std::snprintf(buf, sizeof(buf), "v %.6f %.6f %.6f\n", p[0], p[1], p[2]);
        out += buf;
    }
    for (Eigen::Index f = 0; f < mesh.num_faces(); ++f) {
        const auto t = mesh.faces().row(f);
        std::snprintf(buf, sizeof(buf), "f %d %d %d\n", t[0] + 1, t[1] + 1, t[2] + 1);
        out += buf;
    }
    return out;
}

void save_mesh(const Mesh& mesh, const std::filesystem::path& path)
{
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw Error("cannot write mesh '" + path.string() + "'");
    os << format_obj(mesh);
    if (!os) throw Error("write failed for '" + path.string() + "'");
}

Vertices vertex_normals(const Vertices& vertices, const Faces& faces)
{
    Vertices acc = Vertices::Zero(vertices.rows(), 3);
    for (Eigen::Index f = 0; f < faces.rows(); ++f) {
        const int a = faces(f, 0), b = faces(f, 1), c = faces(f, 2);
        const Eigen::Vector3d e1 = vertices.row(b) - vertices.row(a);
        const Eigen::Vector3d e2 = vertices.row(c) - vertices.row(a);
        // |e1 x e2| = 2 * area, so the plain cross product is the area weight.
        const Eigen::RowVector3d n = e1.cross(e2).transpose();
        acc.row(a) += n;
        acc.row(b) += n;
        acc.row(c) += n;
    }
    for (Eigen::Index i = 0; i < acc.rows(); ++i) {
        const double len = acc.row(i).norm();
        if (len > 0.0) {
            acc.row(i) /= len;
        } else {
            acc.row(i) << 0.0, 0.0, 1.0;
        }
    }
    return acc;
}

Vertices vertex_normals_backward(const Vertices& vertices, const Faces& faces, const Vertices& grad_normals)
{
    Vertices acc = Vertices::Zero(vertices.rows(), 3);
    for (Eigen::Index f = 0; f < faces.rows(); ++f) {
        const int a = faces(f, 0), b = faces(f, 1), c = faces(f, 2);
        const Eigen::Vector3d e1 = vertices.row(b) - vertices.row(a);
        const Eigen::Vector3d e2 = vertices.row(c) - vertices.row(a);
        const Eigen::RowVector3d n = e1.cross(e2).transpose();
        acc.row(a) += n;
        acc.row(b) += n;
        acc.row(c) += n;
    }
    // d(m/|m|) = (I - n n^T) / |m|
    Vertices grad_acc = Vertices::Zero(vertices.rows(), 3);
    for (Eigen::Index i = 0; i < acc.rows(); ++i) {
        const double len = acc.row(i).norm();
        if (len == 0.0) continue;
        const Eigen::RowVector3d n = acc.row(i) / len;
        const Eigen::RowVector3d g = grad_normals.row(i);
        grad_acc.row(i) = (g - g.dot(n) * n) / len;
    }
    Vertices grad = Vertices::Zero(vertices.rows(), 3);
    for (Eigen::Index f = 0; f < faces.rows(); ++f) {
        const int a = faces(f, 0), b = faces(f, 1), c = faces(f, 2);
        const Eigen::Vector3d e1 = vertices.row(b) - vertices.row(a);
        const Eigen::Vector3d e2 = vertices.row(c) - vertices.row(a);
        const Eigen::Vector3d gc = (grad_acc.row(a) + grad_acc.row(b) + grad_acc.row(c)).transpose();
        // c = e1 x e2: dc/de1 contributes e2 x gc, dc/de2 contributes gc x e1.
        const Eigen::Vector3d g1 = e2.cross(gc);
        const Eigen::Vector3d g2 = gc.cross(e1);
        grad.row(b) += g1.transpose();
        grad.row(c) += g2.transpose();
        grad.row(a) -= (g1 + g2).transpose();
    }
    return grad;
}

Eigen::MatrixXd vertex_features(const Mesh& mesh)
{
    Eigen::MatrixXd out(mesh.num_vertices(), 6);
    out.leftCols(3) = mesh.vertices();
    out.rightCols(3) = vertex_normals(mesh);
    return out;
}

} // namespace exprclone
