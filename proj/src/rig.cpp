#include <exprclone/array_store.hpp>
#include <exprclone/error.hpp>
#include <exprclone/hashing.hpp>
#include <exprclone/primitives.hpp>
#include <exprclone/rig.hpp>
#include <exprclone/spectral.hpp>

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>

namespace exprclone {

namespace {

struct NamedSite {
    const char* name;
    double x, y, z;
};

// Approximate region centers on the normalized head (x right, y up, z forward).
const std::vector<NamedSite>& base_segment_sites()
{
    static const std::vector<NamedSite> sites = {
        {"frontalis_l", -0.12, 0.22, 0.20}, {"frontalis_r", 0.12, 0.22, 0.20},
        {"procerus", 0.0, 0.10, 0.28}, {"corrugator_l", -0.07, 0.13, 0.26},
        {"corrugator_r", 0.07, 0.13, 0.26}, {"orbicularis_oculi_l", -0.11, 0.06, 0.25},
        {"orbicularis_oculi_r", 0.11, 0.06, 0.25}, {"nasalis", 0.0, 0.0, 0.31},
        {"zygomaticus_l", -0.15, -0.03, 0.20}, {"zygomaticus_r", 0.15, -0.03, 0.20},
        {"buccinator_l", -0.17, -0.12, 0.15}, {"buccinator_r", 0.17, -0.12, 0.15},
        {"orbicularis_oris", 0.0, -0.10, 0.27}, {"lips", 0.0, -0.14, 0.26},
        {"mentalis", 0.0, -0.23, 0.21}, {"masseter_l", -0.22, -0.12, 0.05},
        {"masseter_r", 0.22, -0.12, 0.05}, {"temporalis_l", -0.24, 0.10, 0.05},
        {"temporalis_r", 0.24, 0.10, 0.05}, {"scalp", 0.0, 0.31, 0.0},
        {"occipitalis", 0.0, 0.10, -0.28}, {"backneck", 0.0, -0.20, -0.22},
        {"platysma", 0.0, -0.30, 0.06}, {"clavicle", 0.0, -0.30, -0.06},
    };
    return sites;
}

// Greedy closest-pair matching of anchors to named sites; leftovers get generic names.
std::vector<std::string> name_anchors(const Vertices& v, const std::vector<int>& anchors)
{
    const auto& sites = base_segment_sites();
    std::vector<std::string> names(anchors.size());
    std::vector<bool> anchor_done(anchors.size(), false), site_done(sites.size(), false);
    const std::size_t pairs = std::min(anchors.size(), sites.size());
    for (std::size_t round = 0; round < pairs; ++round) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t ba = 0, bs = 0;
        for (std::size_t a = 0; a < anchors.size(); ++a) {
            if (anchor_done[a]) continue;
            for (std::size_t s = 0; s < sites.size(); ++s) {
                if (site_done[s]) continue;
                const Eigen::RowVector3d p(sites[s].x, sites[s].y, sites[s].z);
                const double d = (v.row(anchors[a]) - p).squaredNorm();
                if (d < best) {
                    best = d;
                    ba = a;
                    bs = s;
                }
            }
        }
        anchor_done[ba] = true;
        site_done[bs] = true;
        names[ba] = sites[bs].name;
    }
    for (std::size_t a = 0; a < anchors.size(); ++a) {
        if (names[a].empty()) names[a] = "region_" + std::to_string(a);
    }
    return names;
}

constexpr int k_base_segments = 24;
constexpr int k_identity_modes = 12;
constexpr double k_identity_max_offset = 0.005;
constexpr double k_expression_min_amp = 0.03;
constexpr double k_expression_max_amp = 0.08;
constexpr double k_expression_min_radius = 0.045;
constexpr double k_expression_max_radius = 0.075;
constexpr double k_expression_cutoff = 1e-3;

Mesh make_head(int subdivision)
{
    const Mesh sphere = make_icosphere(subdivision);
    Vertices v = sphere.vertices();
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
        const double x = v(i, 0), y = v(i, 1), z = v(i, 2);
        double nz = 0.88 * z;
        if (z > 0.0) {
            // Nose ridge and a flatter face plane.
            nz += 0.16 * std::exp(-(x * x / 0.02 + (y + 0.05) * (y + 0.05) / 0.08)) * z;
            nz -= 0.06 * z * z * z;
        }
        // Narrower jaw.
        const double jaw = y < 0.0 ? 1.0 + 0.18 * y : 1.0;
        v.row(i) << 0.78 * x * jaw, y, nz;
    }
    return normalize_mesh(Mesh(std::move(v), sphere.faces()));
}

std::vector<int> farthest_points(const Vertices& v, const std::vector<int>& candidates, int count, int start)
{
    std::vector<int> picked = {start};
    std::vector<double> dist(candidates.size(), std::numeric_limits<double>::infinity());
    while (static_cast<int>(picked.size()) < count) {
        const Eigen::RowVector3d last = v.row(picked.back());
        std::size_t best = 0;
        double best_d = -1.0;
        for (std::size_t c = 0; c < candidates.size(); ++c) {
            dist[c] = std::min(dist[c], (v.row(candidates[c]) - last).squaredNorm());
            if (dist[c] > best_d) {
                best_d = dist[c];
                best = c;
            }
        }
        picked.push_back(candidates[best]);
    }
    return picked;
}

SegmentationMap voronoi_segments(const Vertices& v, const std::vector<int>& anchors, int target_count)
{
    // Agglomerate base regions by nearest centroid until target_count remain.
    struct Cluster {
        std::vector<int> members;
        Eigen::RowVector3d centroid;
        std::string name;
    };
    const std::vector<std::string> anchor_names = name_anchors(v, anchors);
    std::vector<Cluster> clusters;
    for (std::size_t a = 0; a < anchors.size(); ++a) {
        clusters.push_back({{static_cast<int>(a)}, v.row(anchors[a]), anchor_names[a]});
    }
    while (static_cast<int>(clusters.size()) > target_count) {
        std::size_t bi = 0, bj = 1;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < clusters.size(); ++i) {
            for (std::size_t j = i + 1; j < clusters.size(); ++j) {
                const double d = (clusters[i].centroid - clusters[j].centroid).squaredNorm();
                if (d < best) {
                    best = d;
                    bi = i;
                    bj = j;
                }
            }
        }
        Cluster& a = clusters[bi];
        const Cluster& b = clusters[bj];
        const double na = static_cast<double>(a.members.size());
        const double nb = static_cast<double>(b.members.size());
        a.centroid = (na * a.centroid + nb * b.centroid) / (na + nb);
        a.members.insert(a.members.end(), b.members.begin(), b.members.end());
        a.name += "+" + b.name;
        clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(bj));
    }
    std::vector<int> anchor_to_cluster(anchors.size());
    SegmentationMap seg;
    for (std::size_t c = 0; c < clusters.size(); ++c) {
        for (int m : clusters[c].members) anchor_to_cluster[static_cast<std::size_t>(m)] = static_cast<int>(c);
        seg.names.push_back(clusters[c].name);
    }
    seg.labels.resize(static_cast<std::size_t>(v.rows()));
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t a = 0; a < anchors.size(); ++a) {
            const double d = (v.row(i) - v.row(anchors[a])).squaredNorm();
            if (d < best_d) {
                best_d = d;
                best = a;
            }
        }
        seg.labels[static_cast<std::size_t>(i)] = anchor_to_cluster[best];
    }
    return seg;
}

Eigen::Vector3d random_unit(std::mt19937_64& rng)
{
    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::Vector3d d;
    do {
        d << n(rng), n(rng), n(rng);
    } while (d.norm() < 1e-6);
    return d.normalized();
}

} // namespace

const std::vector<std::string>& default_expression_names()
{
    static const std::vector<std::string> names = {
        "browDownLeft", "browDownRight", "browInnerUp", "browOuterUpLeft", "browOuterUpRight",
        "cheekPuffLeft", "cheekPuffRight", "cheekSquintLeft", "cheekSquintRight", "eyeBlinkLeft",
        "eyeBlinkRight", "eyeLookDownLeft", "eyeLookDownRight", "eyeLookInLeft", "eyeLookInRight",
        "eyeLookOutLeft", "eyeLookOutRight", "eyeLookUpLeft", "eyeLookUpRight", "eyeSquintLeft",
        "eyeSquintRight", "eyeWideLeft", "eyeWideRight", "jawForward", "jawLeft",
        "jawOpen", "jawRight", "mouthClose", "mouthDimpleLeft", "mouthDimpleRight",
        "mouthFrownLeft", "mouthFrownRight", "mouthFunnel", "mouthLeft", "mouthLowerDownLeft",
        "mouthLowerDownRight", "mouthPressLeft", "mouthPressRight", "mouthPucker", "mouthRight",
        "mouthRollLower", "mouthRollUpper", "mouthShrugLower", "mouthShrugUpper", "mouthSmileLeft",
        "mouthSmileRight", "mouthStretchLeft", "mouthStretchRight", "mouthUpperUpLeft", "mouthUpperUpRight",
        "noseSneerLeft", "noseSneerRight", "tongueOut",
    };
    return names;
}

void BlendshapeRig::validate() const
{
    const Eigen::Index n3 = 3 * neutral.num_vertices();
    if (identity_deltas.rows() != n3 || expression_deltas.rows() != n3) {
        throw InvalidInput("rig delta arrays must have 3N = " + std::to_string(n3) + " rows");
    }
    if (static_cast<Eigen::Index>(expression_names.size()) != expression_deltas.cols()) {
        throw InvalidInput("rig has " + std::to_string(expression_deltas.cols()) + " expression bases but " +
                           std::to_string(expression_names.size()) + " names");
    }
    if (!identity_deltas.allFinite() || !expression_deltas.allFinite()) {
        throw InvalidInput("rig deltas contain non-finite values");
    }
    const Eigen::RowVector3d lo = neutral.vertices().colwise().minCoeff();
    const Eigen::RowVector3d hi = neutral.vertices().colwise().maxCoeff();
    const double bound = 0.5 * (hi - lo).norm();
    auto check = [&](const Eigen::MatrixXd& d, const char* what) {
        for (Eigen::Index c = 0; c < d.cols(); ++c) {
            const double m = offsets_from_column(d.col(c)).rowwise().norm().maxCoeff();
            if (m > bound) {
                throw InvalidInput(std::string(what) + " delta " + std::to_string(c) + " exceeds half the bounding-box diagonal");
            }
        }
    };
    check(identity_deltas, "identity");
    check(expression_deltas, "expression");
    std::set<std::string> unique(expression_names.begin(), expression_names.end());
    if (unique.size() != expression_names.size()) throw InvalidInput("expression names are not unique");
}

std::string BlendshapeRig::digest() const
{
    Fnv1a h;
    h.update(neutral.content_hash());
    h.update_array(identity_deltas.data(), static_cast<std::size_t>(identity_deltas.size()));
    h.update_array(expression_deltas.data(), static_cast<std::size_t>(expression_deltas.size()));
    for (const auto& n : expression_names) h.update(n).update("\n");
    return h.hex();
}

std::vector<int> SegmentationMap::counts() const
{
    std::vector<int> c(names.size(), 0);
    for (int l : labels) {
        if (l >= 0 && l < static_cast<int>(c.size())) ++c[static_cast<std::size_t>(l)];
    }
    return c;
}

void SegmentationMap::validate(Eigen::Index num_vertices) const
{
    if (static_cast<Eigen::Index>(labels.size()) != num_vertices) {
        throw InvalidInput("segmentation has " + std::to_string(labels.size()) + " labels for " +
                           std::to_string(num_vertices) + " vertices");
    }
    if (names.empty()) throw InvalidInput("segmentation has no segments");
    for (int l : labels) {
        if (l < 0 || l >= num_segments()) throw InvalidInput("segment label " + std::to_string(l) + " out of range");
    }
    const auto c = counts();
    for (std::size_t s = 0; s < c.size(); ++s) {
        if (c[s] == 0) throw InvalidInput("segment " + std::to_string(s) + " (" + names[s] + ") is empty");
    }
}

std::pair<BlendshapeRig, SegmentationMap> make_toy_rig(const ToyRigOptions& opt)
{
    if (opt.subdivision < 2) throw InvalidInput("toy rig subdivision must be >= 2");
    if (opt.identity_count < 1 || opt.expression_count < 1 || opt.segment_count < 1) {
        throw InvalidInput("toy rig counts J, K, L must be >= 1");
    }
    std::mt19937_64 rng(opt.seed);
    Mesh head = make_head(opt.subdivision);
    const Vertices& v = head.vertices();
    const Eigen::Index n = v.rows();
    if (opt.segment_count > n) throw InvalidInput("more segments than vertices");

    BlendshapeRig rig{head, {}, {}, {}};

    // Identity bases: random combinations of low Laplacian eigenfunctions (constant mode skipped).
    const int modes = static_cast<int>(std::min<Eigen::Index>(k_identity_modes, n - 2));
    const SpectralOperators ops = compute_spectral_operators(head, modes + 1);
    std::normal_distribution<double> normal(0.0, 1.0);
    rig.identity_deltas.resize(3 * n, opt.identity_count);
    for (int j = 0; j < opt.identity_count; ++j) {
        Eigen::MatrixXd coeff(modes, 3);
        for (int m = 0; m < modes; ++m) {
            for (int d = 0; d < 3; ++d) coeff(m, d) = normal(rng);
        }
        Vertices off = ops.eigenvectors.middleCols(1, modes) * coeff;
        off *= k_identity_max_offset / off.rowwise().norm().maxCoeff();
        rig.identity_deltas.col(j) = column_from_offsets(off);
    }

    // Expression bases: Gaussian bumps around anchors spread over the front of the face.
    std::vector<int> front;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (v(i, 2) > 0.0) front.push_back(static_cast<int>(i));
    }
    if (static_cast<int>(front.size()) < opt.expression_count) {
        throw InvalidInput("cannot place " + std::to_string(opt.expression_count) + " expression anchors on " +
                           std::to_string(front.size()) + " front-facing vertices");
    }
    std::uniform_int_distribution<std::size_t> pick_front(0, front.size() - 1);
    const std::vector<int> anchors = farthest_points(v, front, opt.expression_count, front[pick_front(rng)]);
    std::uniform_real_distribution<double> amp(k_expression_min_amp, k_expression_max_amp);
    std::uniform_real_distribution<double> rad(k_expression_min_radius, k_expression_max_radius);
    rig.expression_deltas.resize(3 * n, opt.expression_count);
    for (int k = 0; k < opt.expression_count; ++k) {
        const Eigen::RowVector3d center = v.row(anchors[static_cast<std::size_t>(k)]);
        const Eigen::RowVector3d dir = random_unit(rng).transpose();
        const double a = amp(rng);
        const double r = rad(rng);
        Vertices off = Vertices::Zero(n, 3);
        for (Eigen::Index i = 0; i < n; ++i) {
            const double fall = std::exp(-(v.row(i) - center).squaredNorm() / (2.0 * r * r));
            if (fall >= k_expression_cutoff) off.row(i) = a * fall * dir;
        }
        rig.expression_deltas.col(k) = column_from_offsets(off);
        rig.expression_names.push_back(k < static_cast<int>(default_expression_names().size())
                                           ? default_expression_names()[static_cast<std::size_t>(k)]
                                           : "expr" + std::to_string(k));
    }

    // Segmentation: Voronoi cells of farthest-point anchors, merged down to L.
    std::vector<int> all(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = static_cast<int>(i);
    std::uniform_int_distribution<Eigen::Index> pick_any(0, n - 1);
    const int base = std::max(k_base_segments, opt.segment_count);
    const std::vector<int> seg_anchors = farthest_points(v, all, base, static_cast<int>(pick_any(rng)));
    SegmentationMap seg = voronoi_segments(v, seg_anchors, opt.segment_count);

    rig.validate();
    seg.validate(n);
    return {std::move(rig), std::move(seg)};
}

Vertices offsets_from_column(const Eigen::VectorXd& column)
{
    if (column.size() % 3 != 0) throw InvalidInput("offset column length must be a multiple of 3");
    return Eigen::Map<const Vertices>(column.data(), column.size() / 3, 3);
}

Eigen::VectorXd column_from_offsets(const Vertices& offsets)
{
    return Eigen::Map<const Eigen::VectorXd>(offsets.data(), offsets.size());
}

Vertices expression_offsets(const BlendshapeRig& rig, const Eigen::VectorXd& w_exp)
{
    if (w_exp.size() != rig.num_expression()) {
        throw InvalidInput("expression coefficient length " + std::to_string(w_exp.size()) + " != K = " +
                           std::to_string(rig.num_expression()));
    }
    return offsets_from_column(rig.expression_deltas * w_exp);
}

Vertices evaluate_rig(const BlendshapeRig& rig, const Eigen::VectorXd& w_id, const Eigen::VectorXd& w_exp)
{
    if (w_id.size() != rig.num_identity()) {
        throw InvalidInput("identity coefficient length " + std::to_string(w_id.size()) + " != J = " +
                           std::to_string(rig.num_identity()));
    }
    if (w_exp.size() != rig.num_expression()) {
        throw InvalidInput("expression coefficient length " + std::to_string(w_exp.size()) + " != K = " +
                           std::to_string(rig.num_expression()));
    }
    Eigen::VectorXd flat = column_from_offsets(rig.neutral.vertices());
    flat.noalias() += rig.identity_deltas * w_id;
    flat.noalias() += rig.expression_deltas * w_exp;
    return offsets_from_column(flat);
}

Eigen::VectorXd sample_expression_uniform(int count, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Eigen::VectorXd w(count);
    for (int k = 0; k < count; ++k) w[k] = u(rng);
    return w;
}

Eigen::VectorXd sample_expression_onehot(int count, int index)
{
    if (index < 0 || index >= count) {
        throw InvalidInput("one-hot index " + std::to_string(index) + " out of range [0, " + std::to_string(count) + ")");
    }
    Eigen::VectorXd w = Eigen::VectorXd::Zero(count);
    w[index] = 1.0;
    return w;
}

Eigen::VectorXd sample_identity_normal(int count, std::mt19937_64& rng, double sigma)
{
    if (!(sigma > 0.0)) throw InvalidInput("identity sigma must be > 0");
    std::normal_distribution<double> n(0.0, sigma);
    Eigen::VectorXd w(count);
    for (int j = 0; j < count; ++j) w[j] = n(rng);
    return w;
}

void export_rig(const BlendshapeRig& rig, const SegmentationMap& seg, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    // Full precision so reloading reproduces the neutral exactly.
    {
        std::ofstream os(dir / "neutral.obj", std::ios::trunc);
        if (!os) throw Error("cannot write '" + (dir / "neutral.obj").string() + "'");
        char buf[160];
        for (Eigen::Index i = 0; i < rig.neutral.num_vertices(); ++i) {
            const auto p = rig.neutral.vertices().row(i);
            std::snprintf(buf, sizeof(buf), "v %.17g %.17g %.17g\n", p[0], p[1], p[2]);
            os << buf;
        }
        for (Eigen::Index f = 0; f < rig.neutral.num_faces(); ++f) {
            const auto t = rig.neutral.faces().row(f);
            os << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << '\n';
        }
    }
    ArrayStore id;
    id.put("deltas", rig.identity_deltas);
    id.save(dir / "identity_deltas.exna");
    ArrayStore ex;
    ex.put("deltas", rig.expression_deltas);
    ex.save(dir / "expression_deltas.exna");
    ArrayStore lab;
    lab.put("labels", std::vector<std::int64_t>(seg.labels.begin(), seg.labels.end()));
    lab.save(dir / "labels.exna");
    nlohmann::json manifest = {
        {"J", rig.num_identity()},
        {"K", rig.num_expression()},
        {"N", rig.num_vertices()},
        {"L", seg.num_segments()},
        {"expression_names", rig.expression_names},
        {"segment_names", seg.names},
    };
    std::ofstream os(dir / "manifest.json", std::ios::trunc);
    os << manifest.dump(2) << '\n';
}

std::pair<BlendshapeRig, SegmentationMap> load_external_rig(const std::filesystem::path& dir)
{
    auto need = [&](const char* name) {
        const auto p = dir / name;
        if (!std::filesystem::exists(p)) throw Error("rig directory '" + dir.string() + "' is missing " + name);
        return p;
    };
    const auto manifest_path = need("manifest.json");
    const auto neutral_path = need("neutral.obj");
    const auto id_path = need("identity_deltas.exna");
    const auto ex_path = need("expression_deltas.exna");
    if (!std::filesystem::exists(dir / "labels.exna")) {
        throw Error("rig directory '" + dir.string() +
                    "' has no labels.exna; supply a per-vertex segmentation (int64 array 'labels')");
    }
    nlohmann::json manifest;
    {
        std::ifstream is(manifest_path);
        try {
            is >> manifest;
        } catch (const nlohmann::json::exception& e) {
            throw Error("manifest.json: " + std::string(e.what()));
        }
    }
    Mesh neutral = load_mesh(neutral_path, false);
    Eigen::MatrixXd id = ArrayStore::load(id_path).matrix("deltas");
    Eigen::MatrixXd ex = ArrayStore::load(ex_path).matrix("deltas");
    const auto labels = ArrayStore::load(dir / "labels.exna").ints("labels");

    auto expect = [&](const char* field, long long actual, bool required = true) {
        if (!manifest.contains(field)) {
            if (!required) return;
            throw Error("manifest.json: missing field '" + std::string(field) + "'");
        }
        const long long declared = manifest.at(field).get<long long>();
        if (declared != actual) {
            throw Error("manifest.json: field '" + std::string(field) + "' declares " + std::to_string(declared) +
                        " but the data has " + std::to_string(actual));
        }
    };
    expect("J", id.cols());
    expect("K", ex.cols());
    expect("N", neutral.num_vertices(), false);
    if (!manifest.contains("expression_names")) throw Error("manifest.json: missing field 'expression_names'");
    BlendshapeRig rig{std::move(neutral), std::move(id), std::move(ex),
                      manifest.at("expression_names").get<std::vector<std::string>>()};
    SegmentationMap seg;
    seg.labels.assign(labels.begin(), labels.end());
    if (manifest.contains("segment_names")) {
        seg.names = manifest.at("segment_names").get<std::vector<std::string>>();
    } else {
        const auto max_label = labels.empty() ? -1 : *std::max_element(labels.begin(), labels.end());
        for (std::int64_t s = 0; s <= max_label; ++s) seg.names.push_back("segment_" + std::to_string(s));
    }
    expect("L", seg.num_segments(), false);
    rig.validate();
    seg.validate(rig.num_vertices());
    return {std::move(rig), std::move(seg)};
}

} // namespace exprclone
