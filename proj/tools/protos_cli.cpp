#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "protos/checkpoint.hpp"
#include "protos/dataset.hpp"
#include "protos/errors.hpp"
#include "protos/render.hpp"
#include "protos/training.hpp"
#include "protos/xmetrics.hpp"

using nlohmann::json;
namespace fs = std::filesystem;
using namespace protos;

namespace {

constexpr const char* kToolVersion = "0.1.0";

enum ExitCode { kOk = 0, kFailure = 1, kBadInput = 2, kRefused = 3, kBadData = 4 };

struct Refusal : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Clock = std::chrono::steady_clock;

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw IoError("cannot write " + path.string());
}

/// Refuses to reuse a non-empty directory unless forced; forced reuse clears it first.
void prepare_out_dir(const fs::path& dir, bool force) {
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        if (!force) throw Refusal("output directory " + dir.string() + " is not empty (use --force)");
        fs::remove_all(dir);
    }
    fs::create_directories(dir);
}

void write_run_manifest(const fs::path& dir, const std::string& command, const std::vector<std::string>& argv,
                        const json& config, const json& inputs, const json& outputs, const json& seeds,
                        Clock::time_point start) {
    const json m{{"schema_version", 1},
                 {"kind", "run_manifest"},
                 {"command", command},
                 {"argv", argv},
                 {"config", config},
                 {"inputs", inputs},
                 {"outputs", outputs},
                 {"seeds", seeds},
                 {"tool_version", kToolVersion},
                 {"wall_clock_seconds", std::chrono::duration<double>(Clock::now() - start).count()}};
    write_text(dir / "run_manifest.json", m.dump(2) + "\n");
}

// --- gen ---------------------------------------------------------------------

struct GenArgs {
    std::string config, out;
    std::optional<std::uint64_t> seed;
    bool force = false;
};

int cmd_gen(const GenArgs& a, const std::vector<std::string>& argv) {
    const auto start = Clock::now();
    DatasetSpec spec;
    if (!a.config.empty()) spec = dataset_spec_from_json(read_json_file(a.config));
    if (a.seed) spec.seed = *a.seed;
    // validate before touching the output directory
    build_catalog(spec.num_classes, spec.type_counts, spec.seed);
    if (spec.train_per_class < 0 || spec.test_per_class < 0) throw RejectedInput("scene counts must be nonnegative");
    prepare_out_dir(a.out, a.force);
    write_dataset(a.out, spec);
    const auto records = plan_dataset(spec);
    write_run_manifest(a.out, "gen", argv, to_json(spec), json{{"config", a.config}},
                       json{{"dataset", a.out}, {"records", records.size()}}, json{{"seed", spec.seed}}, start);
    std::printf("wrote %zu scenes to %s\n", records.size(), a.out.c_str());
    return kOk;
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
    std::string data, config, out;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> ablations;
    std::optional<int> epochs, stop_after;
    bool force = false, resume = false, quiet = false;
};

/// Unwinds training after an epoch checkpoint when --stop-after is reached.
struct StopRequested {
    int epoch;
};

int cmd_train(const TrainArgs& a, const std::vector<std::string>& argv) {
    const auto start = Clock::now();
    TrainConfig cfg;
    if (!a.config.empty()) cfg = read_json_file(a.config).get<TrainConfig>();
    if (a.seed) cfg.seed = *a.seed;
    if (a.epochs) cfg.epochs = *a.epochs;
    for (const auto& name : a.ablations) cfg.apply_ablation(name);
    cfg.validate();

    const DatasetOnDisk data = load_dataset(a.data);
    const fs::path out = a.out;
    const fs::path last_dir = out / "last";
    std::optional<Checkpoint> resume_from;
    if (a.resume && fs::exists(last_dir / "manifest.json")) {
        resume_from = load_checkpoint(last_dir);
        if (!resume_from->resume) throw FormatError("last checkpoint has no optimizer state");
        cfg = resume_from->config;  // the interrupted run's configuration wins
    } else {
        prepare_out_dir(out, a.force || a.resume);
    }

    ToyBackbone backbone(cfg.backbone);
    TrainingSet set;
    set.num_classes = data.catalog.num_classes();
    for (std::size_t i : data.split("train")) {
        set.grids.push_back(backbone.embed(data.load_image(i)));
        set.labels.push_back(data.records[i].class_id);
    }
    if (set.grids.empty()) throw RejectedInput("dataset has no training scenes");

    // The log keeps every step up to the resume point, then continues.
    std::vector<std::string> log_lines;
    if (resume_from) {
        std::ifstream in(out / "train_log.jsonl");
        std::string line;
        while (std::getline(in, line))
            if (!line.empty() && json::parse(line).value("step", 0L) <= resume_from->resume->step) log_lines.push_back(line);
    }
    std::ofstream log(out / "train_log.jsonl", std::ios::binary | std::ios::trunc);
    for (const auto& l : log_lines) log << l << "\n";

    LossBreakdown last_loss;
    TrainOptions opt;
    opt.on_step = [&](const StepRecord& rec, const ModelParams&) {
        log << to_json(rec).dump() << "\n";
        last_loss = rec.loss;
    };
    opt.on_epoch_end = [&](const TrainState& st) {
        log.flush();
        Checkpoint c{st.params, cfg, set.num_classes, st.epochs_completed, json::object(), "", st};
        save_checkpoint(c, last_dir);
        if (!a.quiet)
            std::printf("epoch %d/%d  CE %.4f  HS %.4f  T %.4f\n", st.epochs_completed, cfg.epochs, last_loss.ce,
                        last_loss.sparsity, last_loss.presence);
        std::fflush(stdout);
        if (a.stop_after && st.epochs_completed >= *a.stop_after && st.epochs_completed < cfg.epochs)
            throw StopRequested{st.epochs_completed};
    };
    if (resume_from) opt.resume = &*resume_from->resume;

    TrainState st;
    try {
        st = train(set, cfg, opt);
    } catch (const TrainingDiverged& e) {
        write_text(out / "divergence.json", e.diagnostic.dump(2) + "\n");
        throw;
    } catch (const StopRequested& s) {
        std::printf("stopped after epoch %d; continue with --resume\n", s.epoch);
        return kOk;
    }
    log.close();

    const EffectivePrototypes eff = effective_prototypes(st.params, cfg.head(), set.grids);
    std::size_t correct = 0, local = 0;
    for (std::size_t i = 0; i < eff.predictions.size(); ++i) {
        correct += eff.predictions[i] == set.labels[i] ? 1 : 0;
        local += eff.per_image[i].size();
    }
    const json metrics{{"train_accuracy", static_cast<double>(correct) / set.grids.size()},
                       {"train_global_size", eff.global.size()},
                       {"train_local_size", static_cast<double>(local) / set.grids.size()},
                       {"final_loss", {{"CE", last_loss.ce}, {"HS", last_loss.sparsity}, {"T", last_loss.presence}}}};
    Checkpoint final_ckpt{st.params, cfg, set.num_classes, st.epochs_completed, metrics, "", std::nullopt};
    save_checkpoint(final_ckpt, out / "checkpoint");
    write_run_manifest(out, "train", argv, cfg, json{{"data", a.data}, {"config", a.config}, {"resumed", resume_from.has_value()}},
                       json{{"checkpoint", (out / "checkpoint").string()},
                            {"last", last_dir.string()},
                            {"log", (out / "train_log.jsonl").string()},
                            {"content_hash", final_ckpt.content_hash},
                            {"metrics", metrics}},
                       json{{"seed", cfg.seed}, {"backbone_seed", cfg.backbone.seed}, {"dataset_seed", data.spec.seed}},
                       start);
    std::printf("checkpoint %s  hash %s\n", (out / "checkpoint").c_str(), final_ckpt.content_hash.c_str());
    return kOk;
}

// --- eval --------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint, data, out, metrics = "all", split = "test", config, completeness;
    std::optional<std::uint64_t> seed;
    bool force = false, per_sample = false;
    int limit = 0;
};

int cmd_eval(const EvalArgs& a, const std::vector<std::string>& argv) {
    const auto start = Clock::now();
    const std::vector<std::string> selection = parse_metric_selection(a.metrics);
    MetricsConfig mcfg;
    if (!a.config.empty()) {
        const json c = read_json_file(a.config);
        mcfg.keep_threshold = c.value("keep_threshold", mcfg.keep_threshold);
        mcfg.presence_threshold = c.value("presence_threshold", mcfg.presence_threshold);
        mcfg.noise_amplitude = c.value("noise_amplitude", mcfg.noise_amplitude);
        mcfg.swap_trials_per_scene = c.value("swap_trials_per_scene", mcfg.swap_trials_per_scene);
        mcfg.seed = c.value("seed", mcfg.seed);
        if (c.contains("completeness")) mcfg.completeness = completeness_mode_from_string(c.at("completeness"));
    }
    if (a.seed) mcfg.seed = *a.seed;
    if (!a.completeness.empty()) mcfg.completeness = completeness_mode_from_string(a.completeness);
    mcfg.per_sample = a.per_sample;

    const Checkpoint ckpt = load_checkpoint(a.checkpoint);
    const DatasetOnDisk data = load_dataset(a.data);
    prepare_out_dir(a.out, a.force);

    std::vector<std::size_t> ids = data.split(a.split);
    if (ids.empty()) throw RejectedInput("dataset has no scenes in split " + a.split);
    if (a.limit > 0 && static_cast<std::size_t>(a.limit) < ids.size()) ids.resize(static_cast<std::size_t>(a.limit));
    std::vector<Scene> scenes;
    for (std::size_t i : ids) {
        if (data.has_masks) {
            scenes.push_back(data.scene(i));
        } else {
            Scene s;
            s.image = data.load_image(i);
            s.class_id = data.records[i].class_id;
            scenes.push_back(std::move(s));
        }
    }
    const PrototypeModel model(ckpt.params, ckpt.config.head(), ckpt.config.backbone);
    MetricReport report = evaluate(model, scenes, selection, mcfg, data.has_masks);
    const json j = to_json(report);
    const auto problems = validate_report(j);
    write_text(fs::path(a.out) / "report.json", j.dump(2) + "\n");
    write_run_manifest(a.out, "eval", argv,
                       json{{"metrics", selection},
                            {"split", a.split},
                            {"keep_threshold", mcfg.keep_threshold},
                            {"presence_threshold", mcfg.presence_threshold},
                            {"noise_amplitude", mcfg.noise_amplitude},
                            {"swap_trials_per_scene", mcfg.swap_trials_per_scene},
                            {"completeness", to_string(mcfg.completeness)}},
                       json{{"checkpoint", a.checkpoint}, {"checkpoint_hash", ckpt.content_hash}, {"data", a.data}},
                       json{{"report", (fs::path(a.out) / "report.json").string()}}, json{{"seed", mcfg.seed}}, start);
    for (const auto& w : report.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
    if (!problems.empty()) {
        for (const auto& p : problems) std::fprintf(stderr, "invalid report: %s\n", p.c_str());
        return kFailure;
    }
    std::printf("%s\n", j.dump(2).c_str());
    return kOk;
}

// --- explain -----------------------------------------------------------------

struct ExplainArgs {
    std::string checkpoint, image, out;
    int topk = 4;
    bool force = false;
};

int cmd_explain(const ExplainArgs& a, const std::vector<std::string>& argv) {
    const auto start = Clock::now();
    if (a.topk < 1) throw RejectedInput("--topk must be at least 1");
    const Checkpoint ckpt = load_checkpoint(a.checkpoint);
    const Image image = read_png_rgb(a.image);
    const ToyBackbone backbone(ckpt.config.backbone);
    const Explanation e = explain(image, backbone.embed(image), ckpt.params, ckpt.config.head(), a.topk);
    prepare_out_dir(a.out, a.force);
    write_text(fs::path(a.out) / "score_sheet.svg", score_sheet_svg(image, e));
    json items = json::array();
    double listed = 0.0;
    for (const auto& item : e.items) {
        const auto color = prototype_color(item.prototype);
        items.push_back({{"prototype", item.prototype},
                         {"importance", item.importance},
                         {"color", {color[0], color[1], color[2]}}});
        listed += item.importance;
    }
    const json sidecar{{"schema_version", 1},
                       {"kind", "explanation"},
                       {"image", a.image},
                       {"predicted_class", e.predicted_class},
                       {"class_score", e.class_score},
                       {"local_size", e.local_size},
                       {"coverage", e.coverage},
                       {"top_k", a.topk},
                       {"listed_importance", listed},
                       {"items", items}};
    write_text(fs::path(a.out) / "explanation.json", sidecar.dump(2) + "\n");
    write_run_manifest(a.out, "explain", argv, json{{"top_k", a.topk}},
                       json{{"checkpoint", a.checkpoint}, {"checkpoint_hash", ckpt.content_hash}, {"image", a.image}},
                       json{{"score_sheet", "score_sheet.svg"}, {"sidecar", "explanation.json"}}, json::object(), start);
    std::printf("class %d  score %.4f  coverage %.1f%%\n", e.predicted_class, e.class_score, 100.0 * e.coverage);
    return kOk;
}

// --- report ------------------------------------------------------------------

struct ReportArgs {
    std::string report, checkpoint, out;
    bool force = false;
};

int cmd_report(const ReportArgs& a, const std::vector<std::string>& argv) {
    const auto start = Clock::now();
    const json report = read_json_file(a.report);
    const auto problems = validate_report(report);
    std::vector<std::string> missing;
    const std::vector<RadarAxis> axes = radar_axes(report, missing);
    if (!missing.empty() || !problems.empty()) {
        for (const auto& m : missing) std::fprintf(stderr, "missing metric: %s\n", m.c_str());
        for (const auto& p : problems) std::fprintf(stderr, "invalid report: %s\n", p.c_str());
        return kBadData;
    }
    std::optional<Checkpoint> ckpt;
    if (!a.checkpoint.empty()) ckpt = load_checkpoint(a.checkpoint);
    prepare_out_dir(a.out, a.force);
    const fs::path out = a.out;
    write_text(out / "radar.svg", radar_svg(axes, "Explanation quality"));
    write_text(out / "tables.md", metric_tables_markdown(report));
    json outputs{{"radar", "radar.svg"}, {"tables", "tables.md"}};
    if (ckpt) {
        write_text(out / "correlation.svg",
                   correlation_svg(class_weight_correlation(ckpt->params.classifier.weight), "Class weight correlation"));
        outputs["correlation"] = "correlation.svg";
    }
    write_run_manifest(out, "report", argv, json::object(), json{{"report", a.report}, {"checkpoint", a.checkpoint}},
                       outputs, json::object(), start);
    std::printf("wrote %s\n", (out / "radar.svg").c_str());
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::string> args(argv, argv + argc);
    CLI::App app{"Prototypical-part head on a frozen toy backbone: data, training, metrics, explanations"};
    app.require_subcommand(1);

    GenArgs gen;
    auto* g = app.add_subcommand("gen", "Generate a synthetic parts dataset");
    g->add_option("--config", gen.config, "dataset JSON config");
    g->add_option("--seed", gen.seed, "dataset seed");
    g->add_option("--out", gen.out, "output directory")->required();
    g->add_flag("--force", gen.force, "overwrite a non-empty output directory");

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "Train the prototypical head");
    t->add_option("--data", tr.data, "dataset directory")->required();
    t->add_option("--config", tr.config, "training JSON config");
    t->add_option("--seed", tr.seed, "training seed");
    t->add_option("--epochs", tr.epochs, "override the epoch count");
    t->add_option("--ablation", tr.ablations, "no_prototypical_head | single_kernel | l1_sparsity");
    t->add_option("--out", tr.out, "output directory")->required();
    t->add_flag("--force", tr.force, "overwrite a non-empty output directory");
    t->add_option("--stop-after", tr.stop_after, "stop after this many completed epochs (resumable)");
    t->add_flag("--resume", tr.resume, "continue from <out>/last if present");
    t->add_flag("--quiet", tr.quiet, "no per-epoch progress");

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "Evaluate explanation metrics");
    e->add_option("--checkpoint", ev.checkpoint, "checkpoint directory")->required();
    e->add_option("--data", ev.data, "dataset directory")->required();
    e->add_option("--metrics", ev.metrics, "comma list of compactness,funnybirds,consistency,stability or all");
    e->add_option("--split", ev.split, "dataset split");
    e->add_option("--limit", ev.limit, "evaluate only the first N scenes of the split");
    e->add_option("--config", ev.config, "metric JSON config");
    e->add_option("--seed", ev.seed, "metric seed");
    e->add_option("--completeness", ev.completeness, "mean_csdc_pc_dc | dc");
    e->add_flag("--per-sample", ev.per_sample, "include per-scene records");
    e->add_option("--out", ev.out, "output directory")->required();
    e->add_flag("--force", ev.force, "overwrite a non-empty output directory");

    ExplainArgs ex;
    auto* x = app.add_subcommand("explain", "Render a score sheet for one image");
    x->add_option("--checkpoint", ex.checkpoint, "checkpoint directory")->required();
    x->add_option("--image", ex.image, "PNG image")->required();
    x->add_option("--topk", ex.topk, "number of prototype panels");
    x->add_option("--out", ex.out, "output directory")->required();
    x->add_flag("--force", ex.force, "overwrite a non-empty output directory");

    ReportArgs rp;
    auto* r = app.add_subcommand("report", "Render radar plot and tables from a metric report");
    r->add_option("--report", rp.report, "report.json from eval")->required();
    r->add_option("--checkpoint", rp.checkpoint, "checkpoint for the class-weight correlation heatmap");
    r->add_option("--out", rp.out, "output directory")->required();
    r->add_flag("--force", rp.force, "overwrite a non-empty output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        return app.exit(err) == 0 ? kOk : kBadInput;
    }

    try {
        if (*g) return cmd_gen(gen, args);
        if (*t) return cmd_train(tr, args);
        if (*e) return cmd_eval(ev, args);
        if (*x) return cmd_explain(ex, args);
        if (*r) return cmd_report(rp, args);
    } catch (const Refusal& err) {
        std::fprintf(stderr, "refused: %s\n", err.what());
        return kRefused;
    } catch (const std::invalid_argument& err) {
        std::fprintf(stderr, "error: %s\n", err.what());
        return kBadInput;
    } catch (const FormatError& err) {
        std::fprintf(stderr, "error: %s\n", err.what());
        return kBadData;
    } catch (const IoError& err) {
        std::fprintf(stderr, "error: %s\n", err.what());
        return kBadData;
    } catch (const std::exception& err) {
        std::fprintf(stderr, "error: %s\n", err.what());
        return kFailure;
    }
    return kFailure;
}
