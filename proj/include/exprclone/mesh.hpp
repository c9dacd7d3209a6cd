#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <string>

namespace exprclone {

using Vertices = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Faces = Eigen::Matrix<int, Eigen::Dynamic, 3, Eigen::RowMajor>;

/// Smallest triangle area accepted by Mesh validation.
inline constexpr double k_min_face_area = 1e-12;

///
/// Triangle mesh with validated topology.
///
/// Every face references three distinct in-range vertices and has area above
/// k_min_face_area; N >= 4 and F >= 2. Immutable after construction.
///
class Mesh {
public:
    Mesh(Vertices vertices, Faces faces);

    const Vertices& vertices() const { return m_vertices; }
    const Faces& faces() const { return m_faces; }
    Eigen::Index num_vertices() const { return m_vertices.rows(); }
    Eigen::Index num_faces() const { return m_faces.rows(); }

    /// Same topology, new positions (validated again).
    Mesh with_vertices(Vertices vertices) const;

    /// Key over (vertices, faces) bytes.
    std::string content_hash() const;

private:
    Vertices m_vertices;
    Faces m_faces;
};

/// Center at the bounding-box center and scale so the bounding-box diagonal is 1.
Mesh normalize_mesh(const Mesh& mesh);

/// Reads a Wavefront OBJ. Quads are fan-triangulated; normalizes unless told otherwise.
Mesh load_mesh(const std::filesystem::path& path, bool normalize = true);
Mesh parse_obj(const std::string& text, const std::string& origin = "<memory>", bool normalize = true);

/// Writes "v" lines with 6 decimals and 1-based "f" lines.
void save_mesh(const Mesh& mesh, const std::filesystem::path& path);
std::string format_obj(const Mesh& mesh);

/// Area-weighted unit vertex normals; isolated vertices get (0, 0, 1).
Vertices vertex_normals(const Vertices& vertices, const Faces& faces);
inline Vertices vertex_normals(const Mesh& mesh)
{
    return vertex_normals(mesh.vertices(), mesh.faces());
}

/// Reverse-mode pass of vertex_normals: maps dL/dnormals to dL/dvertices.
Vertices vertex_normals_backward(const Vertices& vertices, const Faces& faces, const Vertices& grad_normals);

/// [position | normal] per vertex, N x 6.
Eigen::MatrixXd vertex_features(const Mesh& mesh);

} // namespace exprclone
