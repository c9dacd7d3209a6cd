#include <exprclone/array_store.hpp>
#include <exprclone/dataset.hpp>
#include <exprclone/error.hpp>
#include <exprclone/hashing.hpp>
#include <exprclone/spectral.hpp>

#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

namespace exprclone {

namespace {

constexpr int k_scan_modes = 8;

std::string sample_id(int identity, char kind, int index, int width)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "id%03d_%c%0*d", identity, kind, width, index);
    return buf;
}

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b)
{
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
    return std::mt19937_64(seq);
}

std::string kind_name(SampleKind k)
{
    switch (k) {
    case SampleKind::uniform: return "uniform";
    case SampleKind::onehot: return "onehot";
    case SampleKind::scan: return "scan";
    }
    return "uniform";
}

SampleKind kind_from_name(const std::string& s)
{
    if (s == "uniform") return SampleKind::uniform;
    if (s == "onehot") return SampleKind::onehot;
    if (s == "scan") return SampleKind::scan;
    throw Error("unknown sample kind '" + s + "'");
}

Eigen::MatrixXd compute_scan_basis(const BlendshapeRig& rig)
{
    const auto ops = compute_spectral_operators(rig.neutral, k_scan_modes + 1);
    return ops.eigenvectors.rightCols(k_scan_modes);
}

std::vector<Split> make_split(const DatasetConfig& c)
{
    std::vector<Split> s;
    s.insert(s.end(), static_cast<std::size_t>(c.train_identities), Split::train);
    s.insert(s.end(), static_cast<std::size_t>(c.val_identities), Split::val);
    s.insert(s.end(), static_cast<std::size_t>(c.test_identities), Split::test);
    return s;
}

std::vector<Sample> make_samples(const DatasetConfig& c, int expression_count)
{
    std::vector<Sample> out;
    for (int id = 0; id < c.total_identities(); ++id) {
        auto rng = stream_rng(c.seed, static_cast<std::uint64_t>(id), 1);
        for (int u = 0; u < c.uniform_per_identity; ++u) {
            out.push_back({sample_id(id, 'u', u, 4), id, SampleKind::uniform,
                           sample_expression_uniform(expression_count, rng), true});
        }
        if (c.include_onehot) {
            for (int k = 0; k < expression_count; ++k) {
                out.push_back({sample_id(id, 'o', k, 2), id, SampleKind::onehot,
                               sample_expression_onehot(expression_count, k), true});
            }
        }
        for (int s = 0; s < c.scan_per_identity; ++s) {
            out.push_back({sample_id(id, 's', s, 4), id, SampleKind::scan,
                           sample_expression_uniform(expression_count, rng), false});
        }
    }
    return out;
}

} // namespace

nlohmann::json DatasetConfig::to_json() const
{
    return {{"seed", seed},
            {"train_identities", train_identities},
            {"val_identities", val_identities},
            {"test_identities", test_identities},
            {"uniform_per_identity", uniform_per_identity},
            {"include_onehot", include_onehot},
            {"scan_per_identity", scan_per_identity},
            {"identity_sigma", identity_sigma},
            {"scan_amplitude", scan_amplitude},
            {"allow_custom_counts", allow_custom_counts}};
}

DatasetConfig DatasetConfig::from_json(const nlohmann::json& j)
{
    DatasetConfig c;
    c.seed = j.value("seed", c.seed);
    c.train_identities = j.value("train_identities", c.train_identities);
    c.val_identities = j.value("val_identities", c.val_identities);
    c.test_identities = j.value("test_identities", c.test_identities);
    c.uniform_per_identity = j.value("uniform_per_identity", c.uniform_per_identity);
    c.include_onehot = j.value("include_onehot", c.include_onehot);
    c.scan_per_identity = j.value("scan_per_identity", c.scan_per_identity);
    c.identity_sigma = j.value("identity_sigma", c.identity_sigma);
    c.scan_amplitude = j.value("scan_amplitude", c.scan_amplitude);
    c.allow_custom_counts = j.value("allow_custom_counts", c.allow_custom_counts);
    c.validate();
    return c;
}

void DatasetConfig::validate() const
{
    if (train_identities < 1 || val_identities < 0 || test_identities < 0) {
        throw InvalidInput("dataset needs at least one training identity and nonnegative val/test counts");
    }
    if (!allow_custom_counts &&
        (train_identities != k_default_train_identities || val_identities != k_default_val_identities ||
         test_identities != k_default_test_identities)) {
        throw InvalidInput("identity split " + std::to_string(train_identities) + "/" + std::to_string(val_identities) +
                           "/" + std::to_string(test_identities) +
                           " differs from the 100/1/10 default of 111 identities; set allow_custom_counts to override");
    }
    if (uniform_per_identity < 0 || scan_per_identity < 0) throw InvalidInput("sample counts must be nonnegative");
    if (uniform_per_identity == 0 && !include_onehot && scan_per_identity == 0) {
        throw InvalidInput("dataset config produces no samples");
    }
    if (!(identity_sigma > 0.0)) throw InvalidInput("identity_sigma must be positive");
    if (!(scan_amplitude >= 0.0)) throw InvalidInput("scan_amplitude must be nonnegative");
}

std::string to_string(Split split)
{
    switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    }
    return "train";
}

Split split_from_string(const std::string& s)
{
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw InvalidInput("unknown split '" + s + "' (expected train, val or test)");
}

Eigen::VectorXd Dataset::identity(int index) const
{
    if (index < 0 || index >= num_identities()) throw InvalidInput("identity index out of range");
    return identity_coefficients.row(index).transpose();
}

std::vector<int> Dataset::identities_in(Split s) const
{
    std::vector<int> out;
    for (int i = 0; i < num_identities(); ++i) {
        if (split[static_cast<std::size_t>(i)] == s) out.push_back(i);
    }
    return out;
}

std::vector<std::size_t> Dataset::samples_in(Split s) const
{
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (split[static_cast<std::size_t>(samples[i].identity)] == s) out.push_back(i);
    }
    return out;
}

Vertices Dataset::neutral_vertices(int id) const
{
    return evaluate_rig(rig, identity(id), Eigen::VectorXd::Zero(rig.num_expression()));
}

Vertices Dataset::expression_vertices(int id, const Eigen::VectorXd& w_exp) const
{
    return evaluate_rig(rig, identity(id), w_exp);
}

Vertices Dataset::sample_vertices(const Sample& sample) const
{
    Vertices v = expression_vertices(sample.identity, sample.w_exp);
    if (sample.kind != SampleKind::scan || config.scan_amplitude == 0.0) return v;
    if (scan_basis.rows() != v.rows()) throw Error("dataset has scan samples but no scan noise basis");
    Fnv1a h;
    h.update(sample.id);
    auto rng = stream_rng(config.seed, h.value(), 2);
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::MatrixXd coeff(scan_basis.cols(), 3);
    for (Eigen::Index i = 0; i < coeff.size(); ++i) coeff.data()[i] = normal(rng);
    const Eigen::MatrixXd noise = scan_basis * coeff;
    const double peak = noise.rowwise().norm().maxCoeff();
    if (peak > 0.0) v += (config.scan_amplitude / peak) * noise;
    return v;
}

Mesh Dataset::neutral_mesh(int id) const
{
    return rig.neutral.with_vertices(neutral_vertices(id));
}

Mesh Dataset::sample_mesh(const Sample& sample) const
{
    return rig.neutral.with_vertices(sample_vertices(sample));
}

nlohmann::json Dataset::manifest() const
{
    nlohmann::json splits = nlohmann::json::array();
    for (auto s : split) splits.push_back(to_string(s));
    nlohmann::json list = nlohmann::json::array();
    for (const auto& s : samples) {
        list.push_back({{"id", s.id}, {"identity", s.identity}, {"kind", kind_name(s.kind)}});
    }
    return {{"config", config.to_json()},
            {"rig_digest", rig.digest()},
            {"num_identities", num_identities()},
            {"num_samples", samples.size()},
            {"split", splits},
            {"samples", list}};
}

std::string Dataset::digest() const
{
    Fnv1a h;
    h.update(manifest().dump());
    h.update_array(identity_coefficients.data(), static_cast<std::size_t>(identity_coefficients.size()));
    for (const auto& s : samples) h.update_array(s.w_exp.data(), static_cast<std::size_t>(s.w_exp.size()));
    for (int l : segmentation.labels) h.update_pod(l);
    return h.hex();
}

Dataset build_dataset(const BlendshapeRig& rig, const SegmentationMap& seg, const DatasetConfig& config)
{
    config.validate();
    rig.validate();
    seg.validate(rig.num_vertices());
    Dataset d{rig, seg, config, {}, make_split(config), {}, {}};
    std::mt19937_64 rng(config.seed);
    d.identity_coefficients.resize(config.total_identities(), rig.num_identity());
    for (int i = 0; i < config.total_identities(); ++i) {
        d.identity_coefficients.row(i) =
            sample_identity_normal(rig.num_identity(), rng, config.identity_sigma).transpose();
    }
    d.samples = make_samples(config, rig.num_expression());
    if (config.scan_per_identity > 0) d.scan_basis = compute_scan_basis(rig);
    return d;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    export_rig(dataset.rig, dataset.segmentation, dir / "rig");
    ArrayStore coeffs;
    coeffs.put("identity_coefficients", dataset.identity_coefficients);
    Eigen::MatrixXd w(static_cast<Eigen::Index>(dataset.samples.size()), dataset.rig.num_expression());
    for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
        w.row(static_cast<Eigen::Index>(i)) = dataset.samples[i].w_exp.transpose();
    }
    coeffs.put("expression_coefficients", w);
    coeffs.save(dir / "coefficients.exna");
    std::ofstream out(dir / "dataset.json");
    if (!out) throw Error("cannot write " + (dir / "dataset.json").string());
    out << dataset.manifest().dump(2) << "\n";
    if (!out) throw Error("failed writing " + (dir / "dataset.json").string());
}

Dataset load_dataset(const std::filesystem::path& dir)
{
    const auto manifest_path = dir / "dataset.json";
    std::ifstream in(manifest_path);
    if (!in) throw Error("missing dataset manifest " + manifest_path.string());
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(manifest_path.string() + ": " + e.what());
    }
    auto [rig, seg] = load_external_rig(dir / "rig");
    Dataset d{std::move(rig), std::move(seg), DatasetConfig::from_json(m.at("config")), {}, {}, {}, {}};
    if (m.at("rig_digest").get<std::string>() != d.rig.digest()) {
        throw Error("dataset manifest rig_digest does not match " + (dir / "rig").string());
    }
    for (const auto& s : m.at("split")) d.split.push_back(split_from_string(s.get<std::string>()));
    const auto coeffs = ArrayStore::load(dir / "coefficients.exna");
    d.identity_coefficients = coeffs.matrix("identity_coefficients");
    const Eigen::MatrixXd w = coeffs.matrix("expression_coefficients");
    const auto& list = m.at("samples");
    if (static_cast<Eigen::Index>(list.size()) != w.rows() ||
        d.identity_coefficients.rows() != static_cast<Eigen::Index>(d.split.size())) {
        throw Error("dataset coefficients do not match the manifest");
    }
    for (std::size_t i = 0; i < list.size(); ++i) {
        const auto kind = kind_from_name(list[i].at("kind").get<std::string>());
        d.samples.push_back({list[i].at("id").get<std::string>(), list[i].at("identity").get<int>(), kind,
                             w.row(static_cast<Eigen::Index>(i)).transpose(), kind != SampleKind::scan});
    }
    if (d.config.scan_per_identity > 0) d.scan_basis = compute_scan_basis(d.rig);
    return d;
}

} // namespace exprclone
