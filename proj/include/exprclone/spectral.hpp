#pragma once

#include <exprclone/array_store.hpp>
#include <exprclone/mesh.hpp>

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>

namespace exprclone {

inline constexpr int k_default_eigen_count = 64;

///
/// Precomputed operators for spectral diffusion on one mesh.
///
/// stiffness is the cotangent Laplacian (positive semidefinite, zero row sums);
/// mass is the lumped barycentric mass; eigenvectors are mass-orthonormal solutions
/// of stiffness * phi = lambda * mass * phi, sorted by ascending eigenvalue.
///
struct SpectralOperators {
    Eigen::VectorXd mass;
    Eigen::SparseMatrix<double> stiffness;
    Eigen::VectorXd eigenvalues;
    Eigen::MatrixXd eigenvectors;

    Eigen::Index num_vertices() const { return mass.size(); }
    int k() const { return static_cast<int>(eigenvalues.size()); }

    ArrayStore to_store() const;
    static SpectralOperators from_store(const ArrayStore& store);
};

Eigen::SparseMatrix<double> cotangent_stiffness(const Mesh& mesh);
Eigen::VectorXd lumped_mass(const Mesh& mesh);

struct EigenSolveOptions {
    /// Meshes up to this many vertices use a dense solver; larger ones use
    /// shift-invert subspace iteration.
    Eigen::Index dense_limit = 2500;
    int max_iterations = 500;
    double tolerance = 1e-10;
};

SpectralOperators compute_spectral_operators(const Mesh& mesh, int k = k_default_eigen_count,
                                             const EigenSolveOptions& options = {});

/// Thread-safe memo of operators keyed by (mesh content, k), optionally persisted to disk.
class OperatorCache {
public:
    explicit OperatorCache(std::optional<std::filesystem::path> directory = std::nullopt, int k = k_default_eigen_count);

    std::shared_ptr<const SpectralOperators> get(const Mesh& mesh);

    int k() const { return m_k; }
    std::size_t size() const;

    static std::string key(const Mesh& mesh, int k);

private:
    std::optional<std::filesystem::path> m_directory;
    int m_k;
    mutable std::mutex m_mutex;
    std::unordered_map<std::string, std::shared_ptr<const SpectralOperators>> m_entries;
};

} // namespace exprclone
