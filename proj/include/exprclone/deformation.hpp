#pragma once

#include <exprclone/mesh.hpp>

#include <Eigen/Core>

#include <vector>

namespace exprclone {

using Jacobians = std::vector<Eigen::Matrix3d>;

///
/// Per-face deformation gradients relative to a rest mesh.
///
/// Each face frame is [e1, e2, c / sqrt(|c|)] with e1, e2 the edges from the first
/// corner and c = e1 x e2. The Jacobian of a face is the linear map taking the rest
/// frame to the deformed frame, J = D * R^-1. The scaled normal column makes uniform
/// scaling by s give s * I and rotations give the rotation itself.
///
class DeformationFrames {
public:
    explicit DeformationFrames(const Mesh& rest);

    Jacobians jacobians(const Vertices& deformed) const;

    /// dL/dvertices given dL/dJ per face.
    Vertices backward(const Vertices& deformed, const Jacobians& grad) const;

    Eigen::Index num_faces() const { return m_faces.rows(); }

private:
    Faces m_faces;
    Eigen::Index m_num_vertices;
    std::vector<Eigen::Matrix3d> m_rest_inverse;
};

/// Convenience wrapper building the frames on the fly.
Jacobians deformation_jacobians(const Mesh& rest, const Vertices& deformed);

} // namespace exprclone
