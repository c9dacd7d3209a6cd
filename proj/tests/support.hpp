#pragma once

#include <exprclone/encoders.hpp>
#include <exprclone/mesh.hpp>
#include <exprclone/model.hpp>
#include <exprclone/primitives.hpp>
#include <exprclone/rig.hpp>

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

namespace testing {

using namespace exprclone;

/// 6 x 5 grid (30 vertices) with a smooth bump so normals and frames vary.
inline Mesh bumpy_grid()
{
    const Mesh g = make_grid(6, 5, 1.0, 0.8);
    Vertices v = g.vertices();
    for (Eigen::Index i = 0; i < v.rows(); ++i) v(i, 2) = 0.1 * std::sin(3.0 * v(i, 0)) * std::cos(2.0 * v(i, 1));
    return g.with_vertices(v);
}

inline Vertices jitter(const Vertices& v, double sigma, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, sigma);
    Vertices out = v;
    for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] += nd(rng);
    return out;
}

inline Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, double sigma, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, sigma);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
    return m;
}

inline ModelConfig tiny_config(int segments, int k, int j)
{
    ModelConfig mc;
    mc.width = 8;
    mc.blocks = 2;
    mc.segments = segments;
    mc.decoder_hidden = 16;
    mc.norm_groups = 4;
    mc.semantic_expression = k;
    mc.semantic_identity = j;
    mc.eigen_count = 10;
    mc.global_feature = GlobalFeatureMode::pooled_descriptor;
    return mc;
}

/// Central difference of f at x along coordinate i.
inline double central_difference(const std::function<double()>& f, double& x, double h = 1e-5)
{
    const double original = x;
    x = original + h;
    const double plus = f();
    x = original - h;
    const double minus = f();
    x = original;
    return (plus - minus) / (2.0 * h);
}

/// |fd - an| within rel * max(|fd|, |an|) plus a floor for entries that are numerically zero.
inline bool gradient_close(double fd, double an, double rel = 1e-4, double floor = 1e-9)
{
    return std::abs(fd - an) <= rel * std::max(std::abs(fd), std::abs(an)) + floor;
}

class TempDir {
public:
    explicit TempDir(const std::string& tag)
    {
        std::random_device rd;
        path = std::filesystem::temp_directory_path() / ("exprclone_" + tag + "_" + std::to_string(rd()));
        std::filesystem::create_directories(path);
    }
    ~TempDir()
    {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::filesystem::path path;
};

} // namespace testing
