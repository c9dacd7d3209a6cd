#pragma once

#include <exprclone/mesh.hpp>

#include <Eigen/Core>

namespace exprclone {

/// Similarity transform x -> scale * rotation * x + translation.
struct RigidAlignment {
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    double scale = 1.0;
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();

    Vertices apply(const Vertices& points) const;
};

struct AlignmentResult {
    RigidAlignment transform;
    Vertices aligned;
    /// Set when the cross-covariance was rank deficient and only translation was fitted.
    bool translation_only = false;
};

/// Least-squares similarity (Umeyama) taking `source` onto `target`.
AlignmentResult procrustes_align(const Vertices& source, const Vertices& target);

/// Mean over vertices of the squared Euclidean distance.
double mse(const Vertices& a, const Vertices& b);

} // namespace exprclone
