#pragma once
/**
 * pipeline.hpp
 *
 * Stage runners over a work directory. Each stage reads the previous stage's
 * manifest and writes its own:
 *
 *   ingest    raw tree            -> catalog.jsonl
 *   filter    catalog.jsonl       -> filtered.jsonl, quality_report.json
 *   enhance   filtered.jsonl      -> enhanced/, enhanced.jsonl
 *   partition enhanced.jsonl      -> partition.json
 *   augment   enhanced + split    -> augmented/, augmented_{train,test}.jsonl
 *   train     augmented_*.jsonl   -> model.bin, train_history.json
 *   predict   manifest + model    -> predictions.csv
 *   evaluate  predictions + truth -> report.{json,csv,svg}
 */

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "augment.hpp"
#include "catalog.hpp"
#include "enhance.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "partition.hpp"
#include "quality.hpp"

namespace streamgate {

namespace fs = std::filesystem;

struct AugmentSettings {
    BalanceTarget target = BalanceTarget::max_class();
    bool equalize = false;
};

struct PipelineConfig {
    fs::path raw_dir;
    fs::path workdir = ".";
    std::uint64_t seed = 0;
    int jobs = 1;
    int task = 2;  // 2-class or 6-class
    QualityConfig quality;
    EnhanceParams enhance;
    PartitionConfig partition;
    AugmentSettings augment;
    ModelConfig model;

    /// Pushes the global seed and task into every stage config.
    void propagate() {
        partition.seed = seed;
        model.seed = seed;
        model.classes = task;
    }

    void validate() const {
        if (task != 2 && task != kNumLabels) throw ValidationError("config: task must be 2 or 6");
        if (jobs < 1) throw ValidationError("config: jobs must be >= 1");
        quality.validate();
        enhance.validate();
        partition.validate();
        model.validate();
    }
};

inline BalanceTarget balance_target_from_string(const std::string& s) {
    if (s == "max-class" || s == "max_class") return BalanceTarget::max_class();
    try {
        std::size_t used = 0;
        const long long n = std::stoll(s, &used);
        if (used == s.size() && n >= 0) return BalanceTarget::fixed(n);
    } catch (const std::exception&) {
    }
    throw ValidationError("augment: target must be 'max-class' or a non-negative count");
}

inline std::string to_string(const BalanceTarget& t) {
    return t.mode == BalanceTarget::Mode::Count ? std::to_string(t.count) : "max-class";
}

/// Reads the JSON config file layout:
/// { raw_dir, workdir, seed, jobs, task, quality{}, enhance{}, partition{}, augment{target, equalize}, model{} }
inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
    static const std::set<std::string> known = {"raw_dir", "workdir",   "seed",    "jobs",   "task",
                                                "quality", "enhance",   "partition", "augment", "model"};
    for (const auto& [k, v] : j.items())
        if (!known.count(k)) throw ValidationError("config: unknown key '" + k + "'");
    PipelineConfig c;
    if (j.contains("raw_dir")) c.raw_dir = j["raw_dir"].get<std::string>();
    if (j.contains("workdir")) c.workdir = j["workdir"].get<std::string>();
    c.seed = j.value("seed", c.seed);
    c.jobs = j.value("jobs", c.jobs);
    c.task = j.value("task", c.task);
    if (j.contains("quality")) c.quality = j["quality"].get<QualityConfig>();
    if (j.contains("enhance")) c.enhance = j["enhance"].get<EnhanceParams>();
    if (j.contains("partition")) c.partition = j["partition"].get<PartitionConfig>();
    if (j.contains("augment")) {
        const auto& a = j["augment"];
        if (a.contains("target"))
            c.augment.target = a["target"].is_number() ? BalanceTarget::fixed(a["target"].get<std::int64_t>())
                                                       : balance_target_from_string(a["target"].get<std::string>());
        c.augment.equalize = a.value("equalize", false);
    }
    if (j.contains("model")) c.model = j["model"].get<ModelConfig>();
    return c;
}

inline PipelineConfig load_pipeline_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("missing config file " + path.string());
    try {
        return pipeline_config_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("config " + path.string() + ": " + e.what());
    }
}

struct WorkPaths {
    fs::path dir;
    [[nodiscard]] fs::path catalog() const { return dir / "catalog.jsonl"; }
    [[nodiscard]] fs::path filtered() const { return dir / "filtered.jsonl"; }
    [[nodiscard]] fs::path quality_report() const { return dir / "quality_report.json"; }
    [[nodiscard]] fs::path enhanced_dir() const { return dir / "enhanced"; }
    [[nodiscard]] fs::path enhanced() const { return dir / "enhanced.jsonl"; }
    [[nodiscard]] fs::path partition() const { return dir / "partition.json"; }
    [[nodiscard]] fs::path augmented_dir() const { return dir / "augmented"; }
    [[nodiscard]] fs::path augmented(std::string_view role) const {
        return dir / ("augmented_" + std::string(role) + ".jsonl");
    }
    [[nodiscard]] fs::path model() const { return dir / "model.bin"; }
    [[nodiscard]] fs::path history() const { return dir / "train_history.json"; }
    [[nodiscard]] fs::path predictions() const { return dir / "predictions.csv"; }
};

inline void require_file(const fs::path& p, std::string_view what) {
    if (!fs::exists(p))
        throw ValidationError("missing " + std::string(what) + " " + p.string() + " (run the upstream stage first)");
}

inline void write_text(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    out << text;
    if (!out) throw std::runtime_error("cannot write " + p.string());
}

inline nlohmann::ordered_json errors_json(const std::vector<IngestError>& errs) {
    auto a = nlohmann::ordered_json::array();
    for (const auto& e : errs) a.push_back({{"id", e.path}, {"reason", e.reason}});
    return a;
}

// ---------------------------------------------------------------------------

inline nlohmann::ordered_json stage_ingest(const PipelineConfig& cfg) {
    if (cfg.raw_dir.empty()) throw ValidationError("ingest: no raw directory given");
    const WorkPaths w{cfg.workdir};
    IngestResult res = ingest(cfg.raw_dir, NamingRule{}, cfg.jobs);
    write_manifest(w.catalog(), res.catalog);
    return {{"stage", "ingest"}, {"images", res.catalog.images_total()},
            {"sites", res.catalog.sites().size()}, {"errors", errors_json(res.errors)}};
}

inline nlohmann::ordered_json stage_filter(const PipelineConfig& cfg) {
    const WorkPaths w{cfg.workdir};
    require_file(w.catalog(), "catalog manifest");
    const Catalog cat = read_manifest(w.catalog());
    GateResult gate = apply_quality_gate(cat, cfg.quality, load_record_image, cfg.jobs);
    std::vector<ImageRecord> passing = gate.passing.records();
    for (auto& r : passing) r.stage = Stage::Filtered;
    write_manifest(w.filtered(), Catalog::from_records(std::move(passing), false));
    nlohmann::ordered_json report = gate.report.to_json();
    report["config"] = nlohmann::json(cfg.quality);
    write_text(w.quality_report(), report.dump(2) + "\n");
    return {{"stage", "filter"}, {"input", cat.images_total()}, {"passed", gate.report.totals.passed},
            {"load_errors", gate.report.totals.load_errors}};
}

inline nlohmann::ordered_json stage_enhance(const PipelineConfig& cfg,
                                            const std::optional<fs::path>& out_dir = std::nullopt) {
    const WorkPaths w{cfg.workdir};
    require_file(w.filtered(), "filtered manifest");
    const Catalog cat = read_manifest(w.filtered());
    EnhanceResult res = enhance_catalog(cat, cfg.enhance, load_record_image,
                                        png_writer(out_dir.value_or(w.enhanced_dir())), cfg.jobs);
    write_manifest(w.enhanced(), res.catalog);
    std::size_t unenhanced = 0;
    for (const auto& r : res.catalog.records()) unenhanced += r.unenhanced;
    return {{"stage", "enhance"}, {"images", res.catalog.images_total()}, {"unenhanced", unenhanced},
            {"errors", errors_json(res.errors)}};
}

inline nlohmann::ordered_json stage_partition(const PipelineConfig& cfg) {
    const WorkPaths w{cfg.workdir};
    require_file(w.enhanced(), "enhanced manifest");
    const Catalog cat = read_manifest(w.enhanced());
    PartitionSpec spec = random_search_partition(site_histograms(cat, cfg.partition.indicator), cfg.partition, cfg.jobs);
    const auto ids = cat.site_ids();
    const auto problems = partition_problems(spec, std::set<std::string>(ids.begin(), ids.end()));
    if (!problems.empty()) throw std::runtime_error("partition: " + problems.front());
    write_text(w.partition(), to_json(spec).dump(2) + "\n");
    return {{"stage", "partition"}, {"seed", spec.seed}, {"train", spec.train_sites},
            {"test", spec.test_sites}, {"val", spec.val_sites}, {"warnings", spec.warnings}};
}

inline PartitionSpec read_partition(const fs::path& p) {
    require_file(p, "partition spec");
    std::ifstream in(p);
    try {
        return partition_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("partition spec " + p.string() + ": " + e.what());
    }
}

inline std::vector<ImageRecord> partition_records(const Catalog& cat, const PartitionSpec& spec, std::string_view role) {
    const auto sites = spec.subset(role);
    std::vector<ImageRecord> out;
    for (const auto& r : cat.records())
        if (sites.count(r.site_id)) out.push_back(r);
    return out;
}

inline ClassMap task_class_map(int task) {
    return [task](int label) { return task_class(label, task); };
}

inline nlohmann::ordered_json stage_augment(const PipelineConfig& cfg, std::string_view role_name) {
    const WorkPaths w{cfg.workdir};
    const PartitionRole role = role_from_string(role_name);
    if (role == PartitionRole::Validation) throw ValidationError("augment: validation data is never augmented");
    require_file(w.enhanced(), "enhanced manifest");
    const Catalog cat = read_manifest(w.enhanced());
    const PartitionSpec spec = read_partition(w.partition());
    const auto records = partition_records(cat, spec, role_name);
    const ClassMap class_of = task_class_map(cfg.task);
    const BalancePlan plan = build_balance_plan(class_counts(records, cfg.task, class_of), cfg.augment.target);
    BalanceOptions opts;
    opts.seed = cfg.seed;
    opts.role = role;
    opts.class_of = class_of;
    opts.equalize = cfg.augment.equalize;
    opts.jobs = cfg.jobs;
    const Catalog out = apply_balance(records, plan, opts, load_record_image, png_writer(w.augmented_dir()));
    write_manifest(w.augmented(role_name), out);
    auto per = nlohmann::ordered_json::array();
    for (const auto& c : plan.classes)
        per.push_back({{"originals", c.originals}, {"kept", c.kept}, {"generated", c.generated}, {"target", c.target}});
    return {{"stage", "augment"}, {"partition", role_name}, {"seed", cfg.seed}, {"images", out.images_total()},
            {"classes", per}};
}

inline nlohmann::json preprocessing_json(const PipelineConfig& cfg) {
    return {{"quality", nlohmann::json(cfg.quality)}, {"enhance", nlohmann::json(cfg.enhance)}, {"task", cfg.task}};
}

inline nlohmann::ordered_json stage_train(const PipelineConfig& cfg) {
    const WorkPaths w{cfg.workdir};
    require_file(w.augmented("train"), "augmented train manifest");
    require_file(w.augmented("test"), "augmented test manifest");
    const Catalog tr = read_manifest(w.augmented("train"));
    const Catalog te = read_manifest(w.augmented("test"));
    ModelConfig mc = cfg.model;
    mc.classes = cfg.task;
    mc.seed = cfg.seed;
    TrainResult res = train(tr.records(), te.records(), mc, load_record_image, cfg.jobs);
    res.state.metadata = {{"preprocessing", preprocessing_json(cfg)}, {"best_epoch", res.best_epoch}};
    save_model(res.state, w.model());
    auto hist = nlohmann::ordered_json::array();
    for (const auto& e : res.history)
        hist.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"test_f1", e.test_f1},
                        {"test_accuracy", e.test_accuracy}});
    nlohmann::ordered_json h;
    h["seed"] = mc.seed;
    h["best_epoch"] = res.best_epoch;
    h["epochs"] = hist;
    write_text(w.history(), h.dump(2) + "\n");
    return {{"stage", "train"}, {"seed", mc.seed}, {"train_images", tr.images_total()},
            {"test_images", te.images_total()}, {"best_epoch", res.best_epoch}};
}

/// Predicts over `input` (default: the validation partition of the enhanced
/// manifest when a partition exists, otherwise the whole enhanced manifest).
inline nlohmann::ordered_json stage_predict(const PipelineConfig& cfg, const fs::path& model_path,
                                            const std::optional<fs::path>& input = std::nullopt,
                                            const std::optional<fs::path>& out_path = std::nullopt) {
    const WorkPaths w{cfg.workdir};
    require_file(model_path, "model file");
    const ModelState st = load_model(model_path);
    std::vector<ImageRecord> records;
    if (input) {
        require_file(*input, "input manifest");
        records = read_manifest(*input, true).records();
    } else {
        require_file(w.enhanced(), "enhanced manifest");
        const Catalog cat = read_manifest(w.enhanced());
        records = fs::exists(w.partition()) ? partition_records(cat, read_partition(w.partition()), "val") : cat.records();
    }
    PredictResult res = predict_catalog(records, st, load_record_image, cfg.jobs);
    std::vector<PredictionRow> rows;
    for (auto& p : res.predictions) rows.push_back({p.id, p.predicted_label, p.probabilities});
    write_predictions_csv(out_path.value_or(w.predictions()), rows, st.config.classes);
    return {{"stage", "predict"}, {"predictions", rows.size()}, {"errors", errors_json(res.errors)}};
}

inline nlohmann::ordered_json stage_evaluate(const PipelineConfig& cfg,
                                             const std::optional<fs::path>& predictions = std::nullopt,
                                             const std::optional<fs::path>& truth = std::nullopt) {
    const WorkPaths w{cfg.workdir};
    const fs::path pred_path = predictions.value_or(w.predictions());
    const fs::path truth_path = truth.value_or(w.enhanced());
    require_file(pred_path, "predictions file");
    require_file(truth_path, "truth manifest");
    int m = 0;
    const auto rows = read_predictions_csv(pred_path, m);
    if (m != cfg.task)
        throw ValidationError("evaluate: predictions have " + std::to_string(m) + " classes, task has " +
                              std::to_string(cfg.task));
    const Evaluation ev = evaluate(rows, read_manifest(truth_path, true), cfg.task);
    write_reports(ev, cfg.workdir);
    const MetricsReport& bin = ev.binary ? *ev.binary : ev.report;
    return {{"stage", "evaluate"}, {"n", ev.report.n}, {"accuracy", ev.report.accuracy},
            {"combined_f1", ev.report.combined}, {"harmonic_f1", ev.report.harmonic},
            {"binary_accuracy", bin.accuracy}, {"disconnected_f1", bin.disconnected_f1}};
}

/// Training chain: ingest through evaluation on the held-out partition.
inline nlohmann::ordered_json run_training_pipeline(const PipelineConfig& cfg) {
    nlohmann::ordered_json log = nlohmann::ordered_json::array();
    log.push_back(stage_ingest(cfg));
    log.push_back(stage_filter(cfg));
    log.push_back(stage_enhance(cfg));
    log.push_back(stage_partition(cfg));
    log.push_back(stage_augment(cfg, "train"));
    log.push_back(stage_augment(cfg, "test"));
    log.push_back(stage_train(cfg));
    log.push_back(stage_predict(cfg, WorkPaths{cfg.workdir}.model()));
    log.push_back(stage_evaluate(cfg));
    return log;
}

/// Inference chain: preprocessing settings come from the model file so the
/// new images see exactly the training-time filters and enhancement.
inline nlohmann::ordered_json run_inference_pipeline(PipelineConfig cfg, const fs::path& model_path) {
    require_file(model_path, "model file");
    const ModelState st = load_model(model_path);
    const auto& pre = st.metadata.value("preprocessing", nlohmann::json::object());
    if (pre.contains("quality")) cfg.quality = pre["quality"].get<QualityConfig>();
    if (pre.contains("enhance")) cfg.enhance = pre["enhance"].get<EnhanceParams>();
    cfg.task = st.config.classes;
    nlohmann::ordered_json log = nlohmann::ordered_json::array();
    log.push_back(stage_ingest(cfg));
    log.push_back(stage_filter(cfg));
    log.push_back(stage_enhance(cfg));
    const WorkPaths w{cfg.workdir};
    log.push_back(stage_predict(cfg, model_path, w.enhanced()));
    const Catalog enhanced = read_manifest(w.enhanced());
    const auto& recs = enhanced.records();
    if (!recs.empty() && std::all_of(recs.begin(), recs.end(), [](const ImageRecord& r) { return r.label.has_value(); }))
        log.push_back(stage_evaluate(cfg));
    return log;
}

}  // namespace streamgate
