#include <exprclone/deformation.hpp>
#include <exprclone/error.hpp>

#include <Eigen/Geometry>
#include <Eigen/LU>

#include <cmath>

namespace exprclone {

namespace {

Eigen::Matrix3d frame(const Vertices& v, int a, int b, int c)
{
    const Eigen::Vector3d e1 = (v.row(b) - v.row(a)).transpose();
    const Eigen::Vector3d e2 = (v.row(c) - v.row(a)).transpose();
    const Eigen::Vector3d n = e1.cross(e2);
    Eigen::Matrix3d m;
    m.col(0) = e1;
    m.col(1) = e2;
    m.col(2) = n / std::sqrt(n.norm());
    return m;
}

} // namespace

DeformationFrames::DeformationFrames(const Mesh& rest)
    : m_faces(rest.faces())
    , m_num_vertices(rest.num_vertices())
{
    m_rest_inverse.reserve(static_cast<std::size_t>(m_faces.rows()));
    for (Eigen::Index f = 0; f < m_faces.rows(); ++f) {
        const Eigen::Matrix3d r = frame(rest.vertices(), m_faces(f, 0), m_faces(f, 1), m_faces(f, 2));
        bool invertible = false;
        Eigen::Matrix3d inv;
        double det = 0.0;
        r.computeInverseAndDetWithCheck(inv, det, invertible, 1e-300);
        if (!invertible) throw Error("rest face " + std::to_string(f) + " is degenerate");
        m_rest_inverse.push_back(inv);
    }
}

Jacobians DeformationFrames::jacobians(const Vertices& deformed) const
{
    if (deformed.rows() != m_num_vertices) {
        throw InvalidInput("deformed vertex count " + std::to_string(deformed.rows()) + " != rest count " +
                           std::to_string(m_num_vertices));
    }
    Jacobians out(m_rest_inverse.size());
    for (Eigen::Index f = 0; f < m_faces.rows(); ++f) {
        out[static_cast<std::size_t>(f)] =
            frame(deformed, m_faces(f, 0), m_faces(f, 1), m_faces(f, 2)) * m_rest_inverse[static_cast<std::size_t>(f)];
    }
    return out;
}

Vertices DeformationFrames::backward(const Vertices& deformed, const Jacobians& grad) const
{
    Vertices g = Vertices::Zero(deformed.rows(), 3);
    for (Eigen::Index f = 0; f < m_faces.rows(); ++f) {
        const auto fi = static_cast<std::size_t>(f);
        const int a = m_faces(f, 0), b = m_faces(f, 1), c = m_faces(f, 2);
        const Eigen::Matrix3d gd = grad[fi] * m_rest_inverse[fi].transpose();
        const Eigen::Vector3d e1 = (deformed.row(b) - deformed.row(a)).transpose();
        const Eigen::Vector3d e2 = (deformed.row(c) - deformed.row(a)).transpose();
        const Eigen::Vector3d n = e1.cross(e2);
        const double len = n.norm();
        const Eigen::Vector3d nhat = n / len;
        const Eigen::Vector3d gn = gd.col(2);
        // d(c |c|^-1/2) = |c|^-1/2 (I - 1/2 nhat nhat^T) dc
        const Eigen::Vector3d gc = (gn - 0.5 * nhat * nhat.dot(gn)) / std::sqrt(len);
        const Eigen::Vector3d g1 = gd.col(0) + e2.cross(gc);
        const Eigen::Vector3d g2 = gd.col(1) + gc.cross(e1);
        g.row(b) += g1.transpose();
        g.row(c) += g2.transpose();
        g.row(a) -= (g1 + g2).transpose();
    }
    return g;
}

Jacobians deformation_jacobians(const Mesh& rest, const Vertices& deformed)
{
    return DeformationFrames(rest).jacobians(deformed);
}

} // namespace exprclone
