#include <exprclone/error.hpp>
#include <exprclone/hashing.hpp>
#include <exprclone/spectral.hpp>

#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>
#include <Eigen/QR>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace exprclone {

namespace {

double cot(const Eigen::Vector3d& a, const Eigen::Vector3d& b)
{
    return a.dot(b) / a.cross(b).norm();
}

void fix_signs(Eigen::MatrixXd& vectors)
{
    for (Eigen::Index j = 0; j < vectors.cols(); ++j) {
        Eigen::Index idx = 0;
        vectors.col(j).cwiseAbs().maxCoeff(&idx);
        if (vectors(idx, j) < 0.0) vectors.col(j) *= -1.0;
    }
}

void finalize(SpectralOperators& ops)
{
    for (Eigen::Index i = 0; i < ops.eigenvalues.size(); ++i) {
        // Round-off can push the constant mode slightly negative.
        if (ops.eigenvalues[i] < 0.0 && ops.eigenvalues[i] > -1e-8) ops.eigenvalues[i] = 0.0;
    }
    fix_signs(ops.eigenvectors);
}

void solve_dense(const Mesh& mesh, int k, SpectralOperators& ops)
{
    const Eigen::VectorXd inv_sqrt_mass = ops.mass.cwiseSqrt().cwiseInverse();
    Eigen::MatrixXd a = inv_sqrt_mass.asDiagonal() * Eigen::MatrixXd(ops.stiffness) * inv_sqrt_mass.asDiagonal();
    a = 0.5 * (a + a.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
    if (es.info() != Eigen::Success) {
        throw Error("eigensolver did not converge for mesh " + mesh.content_hash() + " with k=" + std::to_string(k));
    }
    ops.eigenvalues = es.eigenvalues().head(k);
    ops.eigenvectors = inv_sqrt_mass.asDiagonal() * es.eigenvectors().leftCols(k);
}

// Shift-invert subspace iteration with Rayleigh-Ritz projection.
void solve_sparse(const Mesh& mesh, int k, const EigenSolveOptions& opt, SpectralOperators& ops)
{
    const Eigen::Index n = ops.mass.size();
    const int p = std::min<int>(static_cast<int>(n), k + std::max(8, k / 2));
    const double shift = 1e-8 * ops.mass.sum();
    Eigen::SparseMatrix<double> m_sparse(n, n);
    {
        std::vector<Eigen::Triplet<double>> t;
        for (Eigen::Index i = 0; i < n; ++i) t.emplace_back(i, i, ops.mass[i]);
        m_sparse.setFromTriplets(t.begin(), t.end());
    }
    Eigen::SparseMatrix<double> shifted = ops.stiffness + shift * m_sparse;
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(shifted);
    if (ldlt.info() != Eigen::Success) {
        throw Error("eigensolver factorization failed for mesh " + mesh.content_hash() + " with k=" + std::to_string(k));
    }

    // Deterministic pseudo-random start block; column 0 is the constant mode.
    Eigen::MatrixXd x(n, p);
    for (Eigen::Index i = 0; i < n; ++i) {
        std::uint64_t s = 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(i + 1);
        for (int j = 0; j < p; ++j) {
            s ^= s >> 33;
            s *= 0xff51afd7ed558ccdULL;
            s ^= s >> 29;
            x(i, j) = static_cast<double>(s % 2000001) / 1000000.0 - 1.0;
        }
    }
    x.col(0).setOnes();

    Eigen::VectorXd prev = Eigen::VectorXd::Constant(k, std::numeric_limits<double>::infinity());
    for (int iter = 0; iter < opt.max_iterations; ++iter) {
        Eigen::MatrixXd y = ldlt.solve(ops.mass.asDiagonal() * x);
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(y);
        Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, p);
        Eigen::MatrixXd sq = q.transpose() * (ops.stiffness * q);
        Eigen::MatrixXd mq = q.transpose() * ops.mass.asDiagonal() * q;
        sq = 0.5 * (sq + sq.transpose()).eval();
        mq = 0.5 * (mq + mq.transpose()).eval();
        Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> ges(sq, mq);
        if (ges.info() != Eigen::Success) break;
        x = q * ges.eigenvectors();
        const Eigen::VectorXd vals = ges.eigenvalues().head(k);
        const double change = (vals - prev).cwiseAbs().maxCoeff();
        prev = vals;
        if (change <= opt.tolerance * std::max(1.0, vals.cwiseAbs().maxCoeff())) {
            ops.eigenvalues = vals;
            ops.eigenvectors = x.leftCols(k);
            // Re-normalize in the mass inner product.
            for (int j = 0; j < k; ++j) {
                const double nrm = std::sqrt(ops.eigenvectors.col(j).dot(ops.mass.asDiagonal() * ops.eigenvectors.col(j)));
                ops.eigenvectors.col(j) /= nrm;
            }
            return;
        }
    }
    throw Error("eigensolver did not converge for mesh " + mesh.content_hash() + " with k=" + std::to_string(k));
}

} // namespace

Eigen::SparseMatrix<double> cotangent_stiffness(const Mesh& mesh)
{
    const auto& v = mesh.vertices();
    const auto& f = mesh.faces();
    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(static_cast<std::size_t>(f.rows()) * 12);
    for (Eigen::Index t = 0; t < f.rows(); ++t) {
        for (int corner = 0; corner < 3; ++corner) {
            const int i = f(t, corner);
            const int j = f(t, (corner + 1) % 3);
            const int o = f(t, (corner + 2) % 3);
            // Edge (i, j) sees the angle at o.
            const Eigen::Vector3d a = (v.row(i) - v.row(o)).transpose();
            const Eigen::Vector3d b = (v.row(j) - v.row(o)).transpose();
            const double w = 0.5 * cot(a, b);
            trips.emplace_back(i, j, -w);
            trips.emplace_back(j, i, -w);
            trips.emplace_back(i, i, w);
            trips.emplace_back(j, j, w);
        }
    }
    Eigen::SparseMatrix<double> s(mesh.num_vertices(), mesh.num_vertices());
    s.setFromTriplets(trips.begin(), trips.end());
    s.makeCompressed();
    return s;
}

Eigen::VectorXd lumped_mass(const Mesh& mesh)
{
    const auto& v = mesh.vertices();
    const auto& f = mesh.faces();
    Eigen::VectorXd m = Eigen::VectorXd::Zero(mesh.num_vertices());
    for (Eigen::Index t = 0; t < f.rows(); ++t) {
        const Eigen::Vector3d e1 = (v.row(f(t, 1)) - v.row(f(t, 0))).transpose();
        const Eigen::Vector3d e2 = (v.row(f(t, 2)) - v.row(f(t, 0))).transpose();
        const double third = e1.cross(e2).norm() / 6.0;
        for (int c = 0; c < 3; ++c) m[f(t, c)] += third;
    }
    return m;
}

SpectralOperators compute_spectral_operators(const Mesh& mesh, int k, const EigenSolveOptions& options)
{
    if (k <= 0 || k > mesh.num_vertices() - 1) {
        throw InvalidInput("eigenpair count k=" + std::to_string(k) + " must be in [1, N-1] for N=" +
                           std::to_string(mesh.num_vertices()));
    }
    SpectralOperators ops;
    ops.mass = lumped_mass(mesh);
    if ((ops.mass.array() <= 0.0).any()) {
        throw InvalidInput("mesh has isolated vertices (zero lumped mass); spectral operators undefined");
    }
    ops.stiffness = cotangent_stiffness(mesh);
    if (mesh.num_vertices() <= options.dense_limit) {
        solve_dense(mesh, k, ops);
    } else {
        solve_sparse(mesh, k, options, ops);
    }
    finalize(ops);
    return ops;
}

ArrayStore SpectralOperators::to_store() const
{
    ArrayStore store;
    store.put("mass", mass);
    store.put("eigenvalues", eigenvalues);
    store.put("eigenvectors", eigenvectors);
    std::vector<std::int64_t> rows, cols;
    Eigen::VectorXd vals(stiffness.nonZeros());
    Eigen::Index at = 0;
    for (int c = 0; c < stiffness.outerSize(); ++c) {
        for (Eigen::SparseMatrix<double>::InnerIterator it(stiffness, c); it; ++it) {
            rows.push_back(it.row());
            cols.push_back(it.col());
            vals[at++] = it.value();
        }
    }
    store.put("stiffness.rows", rows);
    store.put("stiffness.cols", cols);
    store.put("stiffness.values", vals);
    return store;
}

SpectralOperators SpectralOperators::from_store(const ArrayStore& store)
{
    SpectralOperators ops;
    ops.mass = store.vector("mass");
    ops.eigenvalues = store.vector("eigenvalues");
    ops.eigenvectors = store.matrix("eigenvectors");
    const auto rows = store.ints("stiffness.rows");
    const auto cols = store.ints("stiffness.cols");
    const Eigen::VectorXd vals = store.vector("stiffness.values");
    if (rows.size() != cols.size() || static_cast<Eigen::Index>(rows.size()) != vals.size()) {
        throw Error("corrupt stiffness entries in operator store");
    }
    std::vector<Eigen::Triplet<double>> trips;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        trips.emplace_back(static_cast<int>(rows[i]), static_cast<int>(cols[i]), vals[static_cast<Eigen::Index>(i)]);
    }
    ops.stiffness.resize(ops.mass.size(), ops.mass.size());
    ops.stiffness.setFromTriplets(trips.begin(), trips.end());
    ops.stiffness.makeCompressed();
    return ops;
}

OperatorCache::OperatorCache(std::optional<std::filesystem::path> directory, int k)
    : m_directory(std::move(directory))
    , m_k(k)
{
    if (m_directory) std::filesystem::create_directories(*m_directory);
}

std::string OperatorCache::key(const Mesh& mesh, int k)
{
    Fnv1a h;
    h.update(mesh.content_hash());
    h.update_pod(k);
    return h.hex();
}

std::size_t OperatorCache::size() const
{
    std::lock_guard lock(m_mutex);
    return m_entries.size();
}

std::shared_ptr<const SpectralOperators> OperatorCache::get(const Mesh& mesh)
{
    const std::string id = key(mesh, m_k);
    {
        std::lock_guard lock(m_mutex);
        if (auto it = m_entries.find(id); it != m_entries.end()) return it->second;
    }
    std::shared_ptr<const SpectralOperators> ops;
    const auto file = m_directory ? std::optional(*m_directory / ("ops_" + id + ".exna")) : std::nullopt;
    if (file && std::filesystem::exists(*file)) {
        ops = std::make_shared<const SpectralOperators>(SpectralOperators::from_store(ArrayStore::load(*file)));
    } else {
        ops = std::make_shared<const SpectralOperators>(compute_spectral_operators(mesh, m_k));
        if (file) ops->to_store().save(*file);
    }
    std::lock_guard lock(m_mutex);
    // First writer wins so every caller sees the same object.
    auto [it, inserted] = m_entries.emplace(id, ops);
    return it->second;
}

} // namespace exprclone
