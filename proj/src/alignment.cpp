#include <exprclone/alignment.hpp>
#include <exprclone/error.hpp>

#include <Eigen/Geometry>
#include <Eigen/SVD>

namespace exprclone {

Vertices RigidAlignment::apply(const Vertices& points) const
{
    Vertices out = (scale * (points * rotation.transpose())).rowwise() + translation.transpose();
    return out;
}

AlignmentResult procrustes_align(const Vertices& source, const Vertices& target)
{
    if (source.rows() != target.rows()) {
        throw InvalidInput("procrustes: point count mismatch (" + std::to_string(source.rows()) + " vs " +
                           std::to_string(target.rows()) + ")");
    }
    if (source.rows() < 3) throw InvalidInput("procrustes: need at least 3 points");

    const Eigen::RowVector3d mu_src = source.colwise().mean();
    const Eigen::RowVector3d mu_tgt = target.colwise().mean();
    const Eigen::Matrix<double, Eigen::Dynamic, 3> src_c = source.rowwise() - mu_src;
    const Eigen::Matrix<double, Eigen::Dynamic, 3> tgt_c = target.rowwise() - mu_tgt;
    const Eigen::Matrix3d cov = tgt_c.transpose() * src_c / static_cast<double>(source.rows());

    AlignmentResult result;
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov);
    const Eigen::Vector3d sv = svd.singularValues();
    // Umeyama needs rank >= 2 to pin down the rotation.
    const double tol = 1e-12 * std::max(1.0, sv[0]);
    if (sv[1] <= tol) {
        result.translation_only = true;
        result.transform.translation = (mu_tgt - mu_src).transpose();
    } else {
        Eigen::MatrixXd src_cols = source.transpose();
        Eigen::MatrixXd tgt_cols = target.transpose();
        const Eigen::Matrix4d t = Eigen::umeyama(src_cols, tgt_cols, true);
        const Eigen::Matrix3d sr = t.topLeftCorner<3, 3>();
        result.transform.scale = std::cbrt(sr.determinant());
        result.transform.rotation = sr / result.transform.scale;
        result.transform.translation = t.topRightCorner<3, 1>();
    }
    result.aligned = result.transform.apply(source);
    return result;
}

double mse(const Vertices& a, const Vertices& b)
{
    if (a.rows() != b.rows()) {
        throw InvalidInput("mse: shape mismatch (" + std::to_string(a.rows()) + " vs " + std::to_string(b.rows()) +
                           " rows)");
    }
    if (a.rows() == 0) return 0.0;
    return (a - b).rowwise().squaredNorm().mean();
}

} // namespace exprclone
