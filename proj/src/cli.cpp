#include <exprclone/cli.hpp>
#include <exprclone/dataset.hpp>
#include <exprclone/error.hpp>
#include <exprclone/evaluation.hpp>
#include <exprclone/service.hpp>
#include <exprclone/training.hpp>

#include <CLI11.hpp>
#include <httplib.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

namespace exprclone {

namespace {

struct UsageError : Error {
    using Error::Error;
};

nlohmann::json parse_value(const std::string& text)
{
    auto j = nlohmann::json::parse(text, nullptr, false);
    return j.is_discarded() ? nlohmann::json(text) : j;
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j)
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << j.dump(2) << "\n";
    if (!out) throw Error("failed writing " + path.string());
}

void write_text(const std::filesystem::path& path, const std::string& text)
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
}

std::string resolve_checkpoint(const std::string& flag)
{
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv("EXPRCLONE_CHECKPOINT"); env != nullptr && *env != '\0') return env;
    throw UsageError("no checkpoint given (use --checkpoint or EXPRCLONE_CHECKPOINT)");
}

std::shared_ptr<OperatorCache> make_operator_cache(const std::string& dir, int k)
{
    std::optional<std::filesystem::path> path;
    if (!dir.empty()) path = dir;
    return std::make_shared<OperatorCache>(path, k);
}

std::pair<BlendshapeRig, SegmentationMap> rig_from_config(const nlohmann::json& j)
{
    if (j.contains("path")) return load_external_rig(j.at("path").get<std::string>());
    ToyRigOptions o;
    o.seed = j.value("seed", o.seed);
    o.subdivision = j.value("subdivision", o.subdivision);
    o.identity_count = j.value("identity_count", o.identity_count);
    o.expression_count = j.value("expression_count", o.expression_count);
    o.segment_count = j.value("segment_count", o.segment_count);
    return make_toy_rig(o);
}

/// A train config whose model dims follow the dataset unless set explicitly.
TrainConfig train_config_for(nlohmann::json j, const Dataset& dataset)
{
    auto& model = j["model"];
    if (!model.is_object()) model = nlohmann::json::object();
    if (!model.contains("segments")) model["segments"] = dataset.segmentation.num_segments();
    if (!model.contains("semantic_expression")) model["semantic_expression"] = dataset.rig.num_expression();
    if (!model.contains("semantic_identity")) model["semantic_identity"] = dataset.rig.num_identity();
    return TrainConfig::from_json(j);
}

struct Common {
    std::string config;
    std::vector<std::string> overrides;
    std::string cache;
};

void add_common(CLI::App* app, Common& c)
{
    app->add_option("--config", c.config, "JSON config file");
    app->add_option("--set", c.overrides, "Override a config entry, key=value (repeatable)");
    app->add_option("--operator-cache", c.cache, "Directory for cached spectral operators");
}

} // namespace

void apply_overrides(nlohmann::json& config, const std::vector<std::string>& overrides)
{
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos || eq == 0) throw UsageError("override '" + o + "' is not key=value");
        nlohmann::json* node = &config;
        std::string key = o.substr(0, eq);
        std::size_t dot;
        while ((dot = key.find('.')) != std::string::npos) {
            node = &(*node)[key.substr(0, dot)];
            if (node->is_null()) *node = nlohmann::json::object();
            if (!node->is_object()) throw UsageError("override '" + o + "' descends into a non-object");
            key = key.substr(dot + 1);
        }
        (*node)[key] = parse_value(o.substr(eq + 1));
    }
}

nlohmann::json load_config(const std::string& path, const std::vector<std::string>& overrides)
{
    nlohmann::json config = nlohmann::json::object();
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw Error("cannot read config " + path);
        config = nlohmann::json::parse(in, nullptr, false);
        if (config.is_discarded() || !config.is_object()) throw InvalidInput("config " + path + " is not a JSON object");
    }
    apply_overrides(config, overrides);
    return config;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Skinning-localized facial expression cloning", "exprclone"};
    app.require_subcommand(1, 1);
    Common common;

    auto* gen = app.add_subcommand("gen-data", "Generate a rig and a dataset directory");
    std::string gen_out;
    add_common(gen, common);
    gen->add_option("--out", gen_out, "Output directory")->required();

    auto* tr = app.add_subcommand("train", "Train a model");
    std::string data_dir, train_out, resume;
    bool verbose = false;
    add_common(tr, common);
    tr->add_option("--data", data_dir, "Dataset directory")->required();
    tr->add_option("--out", train_out, "Output directory")->required();
    tr->add_option("--resume", resume, "Checkpoint to resume from");
    tr->add_flag("--verbose", verbose, "Print every log line");

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
    std::string checkpoint, split_name = "test", report_path = "eval-report.json";
    int max_samples = 0;
    bool no_align = false;
    add_common(ev, common);
    ev->add_option("--checkpoint", checkpoint, "Checkpoint (default: $EXPRCLONE_CHECKPOINT)");
    ev->add_option("--data", data_dir, "Dataset directory")->required();
    ev->add_option("--split", split_name, "train, val or test");
    ev->add_option("--out", report_path, "Report path");
    ev->add_option("--max-samples", max_samples, "Evaluate at most this many samples");
    ev->add_flag("--no-align", no_align, "Skip Procrustes alignment");

    auto* ab = app.add_subcommand("ablate", "Train the four ablation variants and compare them");
    std::string ablate_out;
    add_common(ab, common);
    ab->add_option("--data", data_dir, "Dataset directory")->required();
    ab->add_option("--out", ablate_out, "Output directory")->required();
    ab->add_option("--split", split_name, "Comparison split");
    ab->add_option("--max-samples", max_samples, "Evaluate at most this many samples");

    auto* rt = app.add_subcommand("retarget", "Transfer a source expression onto a target neutral");
    std::string source, target, mesh_out;
    bool normalize = false;
    add_common(rt, common);
    rt->add_option("--checkpoint", checkpoint, "Checkpoint (default: $EXPRCLONE_CHECKPOINT)");
    rt->add_option("--source", source, "Source expression OBJ")->required();
    rt->add_option("--target", target, "Target neutral OBJ")->required();
    rt->add_option("--out", mesh_out, "Output OBJ")->required();
    rt->add_flag("--normalize", normalize, "Normalize inputs to a unit bounding-box diagonal");

    auto* ir = app.add_subcommand("invrig", "Predict expression codes for a source mesh");
    std::string codes_out;
    add_common(ir, common);
    ir->add_option("--checkpoint", checkpoint, "Checkpoint (default: $EXPRCLONE_CHECKPOINT)");
    ir->add_option("--source", source, "Source expression OBJ")->required();
    ir->add_option("--out", codes_out, "Output JSON")->required();
    ir->add_flag("--normalize", normalize, "Normalize the input to a unit bounding-box diagonal");

    auto* sv = app.add_subcommand("serve", "Serve the inference HTTP API");
    std::string host = "127.0.0.1", rig_dir;
    int port = 8080;
    add_common(sv, common);
    sv->add_option("--checkpoint", checkpoint, "Checkpoint (default: $EXPRCLONE_CHECKPOINT)");
    sv->add_option("--host", host, "Bind address");
    sv->add_option("--port", port, "Port");
    sv->add_option("--rig", rig_dir, "Rig directory for segment and expression names");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n" << app.help();
        return 2;
    }

    try {
        const nlohmann::json config = load_config(common.config, common.overrides);
        if (*gen) {
            const auto [rig, seg] = rig_from_config(config.value("rig", nlohmann::json::object()));
            const Dataset dataset =
                build_dataset(rig, seg, DatasetConfig::from_json(config.value("dataset", nlohmann::json::object())));
            save_dataset(dataset, gen_out);
            out << "dataset " << dataset.digest() << " written to " << gen_out << "\n";
        } else if (*tr) {
            const Dataset dataset = load_dataset(data_dir);
            const TrainConfig tc = train_config_for(config, dataset);
            ContextCache contexts(make_operator_cache(common.cache, tc.model.eigen_count));
            TrainOptions opts;
            opts.output_dir = train_out;
            if (!resume.empty()) opts.resume_from = resume;
            opts.quiet = !verbose;
            const auto result = train(dataset, tc, contexts, opts);
            out << "trained to step " << result.state.step << ", checkpoint " << result.final_checkpoint->string() << "\n";
        } else if (*ev) {
            const std::string path = resolve_checkpoint(checkpoint);
            const Dataset dataset = load_dataset(data_dir);
            const Model model = Model::from_store(ArrayStore::load(path));
            ContextCache contexts(make_operator_cache(common.cache, model.config.eigen_count));
            EvalOptions eo;
            eo.align = !no_align;
            eo.max_samples = max_samples;
            const auto report =
                evaluation_report(model, model.digest(), dataset, split_from_string(split_name), contexts, eo);
            write_json(report_path, report);
            out << "mean self-retarget MSE " << report.at("mean_self_retarget_mse").get<double>() << ", report "
                << report_path << "\n";
        } else if (*ab) {
            const Dataset dataset = load_dataset(data_dir);
            const TrainConfig tc = train_config_for(config, dataset);
            ContextCache contexts(make_operator_cache(common.cache, tc.model.eigen_count));
            const auto runs = ablation_suite(dataset, tc, contexts, std::filesystem::path(ablate_out));
            EvalOptions eo;
            eo.max_samples = max_samples;
            const auto table = compare_ablations(runs, dataset, split_from_string(split_name), contexts, eo);
            write_json(std::filesystem::path(ablate_out) / "ablation.json", table.to_json());
            write_text(std::filesystem::path(ablate_out) / "ablation.txt", table.to_text());
            out << table.to_text();
        } else if (*rt) {
            const Model model = Model::from_store(ArrayStore::load(resolve_checkpoint(checkpoint)));
            ContextCache contexts(make_operator_cache(common.cache, model.config.eigen_count));
            const auto src = contexts.get(load_mesh(source, normalize));
            const auto tgt = contexts.get(load_mesh(target, normalize));
            save_mesh(model.retarget(*src, *tgt), mesh_out);
            out << "wrote " << mesh_out << "\n";
        } else if (*ir) {
            const Model model = Model::from_store(ArrayStore::load(resolve_checkpoint(checkpoint)));
            ContextCache contexts(make_operator_cache(common.cache, model.config.eigen_count));
            const Eigen::VectorXd code = model.encode_expression(*contexts.get(load_mesh(source, normalize)));
            const auto& names = default_expression_names();
            nlohmann::json semantic = nlohmann::json::object();
            for (int k = 0; k < model.config.semantic_expression; ++k) {
                const std::string name = k < static_cast<int>(names.size()) ? names[static_cast<std::size_t>(k)]
                                                                            : "dim" + std::to_string(k);
                semantic[name] = code[k];
            }
            write_json(codes_out, {{"code", std::vector<double>(code.data(), code.data() + code.size())},
                                   {"semantic", semantic},
                                   {"checkpoint_digest", model.digest()}});
            out << "wrote " << codes_out << "\n";
        } else if (*sv) {
            Model model = Model::from_store(ArrayStore::load(resolve_checkpoint(checkpoint)));
            SegmentationMap seg;
            std::vector<std::string> names = default_expression_names();
            if (!rig_dir.empty()) {
                auto [rig, s] = load_external_rig(rig_dir);
                seg = std::move(s);
                names = rig.expression_names;
            }
            names.resize(static_cast<std::size_t>(model.config.semantic_expression));
            const int k = model.config.eigen_count;
            const std::string digest = model.digest();
            InferenceService service(std::move(model), digest, std::move(seg), std::move(names),
                                     make_operator_cache(common.cache, k));
            httplib::Server server;
            service.bind(server);
            out << "serving checkpoint " << digest << " on " << host << ":" << port << "\n" << std::flush;
            if (!server.listen(host, port)) throw Error("cannot listen on " + host + ":" + std::to_string(port));
        }
        return 0;
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

} // namespace exprclone
