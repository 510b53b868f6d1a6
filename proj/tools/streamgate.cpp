// streamgate command-line front end.
//
//   streamgate [--workdir DIR] [--config FILE] [--seed N] [--jobs N] [--json] <subcommand> ...
//
// Exit codes: 0 success, 1 validation error, 2 runtime failure.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include <streamgate/pipeline.hpp>
#include <streamgate/synth.hpp>

namespace sg = streamgate;
namespace fs = std::filesystem;

namespace {

template <typename T>
void override_if(const CLI::Option* opt, T& dst, const T& src) {
    if (opt && opt->count() > 0) dst = src;
}

void emit(const nlohmann::ordered_json& entry, bool json) {
    if (json) {
        std::cout << entry.dump() << '\n';
        return;
    }
    std::cout << entry.value("stage", std::string("?")) << ":";
    for (const auto& [k, v] : entry.items()) {
        if (k == "stage") continue;
        if (v.is_array() && v.empty()) continue;
        std::cout << ' ' << k << '=' << (v.is_string() ? v.get<std::string>() : v.dump());
    }
    std::cout << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Curation, training and evaluation pipeline for time-lapse river-camera images"};
    app.require_subcommand(1);

    std::string workdir, config_path;
    std::uint64_t seed = 0;
    int jobs = 1, task = 2;
    bool json = false;
    if (const char* env = std::getenv("STREAMGATE_WORKDIR")) workdir = env;
    auto* o_workdir = app.add_option("--workdir", workdir, "Work directory (default: $STREAMGATE_WORKDIR or .)");
    app.add_option("--config", config_path, "Pipeline config JSON; flags override its values");
    auto* o_seed = app.add_option("--seed", seed, "Seed for every stochastic stage");
    auto* o_jobs = app.add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
    auto* o_task = app.add_option("--task", task, "Classification task: 2 or 6 classes")->check(CLI::IsMember({2, 6}));
    app.add_flag("--json", json, "Machine-readable log lines");

    // ingest
    auto* ingest_cmd = app.add_subcommand("ingest", "Catalog a raw image tree");
    std::string raw_dir;
    auto* o_raw = ingest_cmd->add_option("--raw", raw_dir, "Raw image directory");

    // filter
    auto* filter_cmd = app.add_subcommand("filter", "Apply the seven quality filters");
    std::string quality_config;
    filter_cmd->add_option("--quality-config", quality_config, "Quality thresholds JSON");

    // enhance
    auto* enhance_cmd = app.add_subcommand("enhance", "Temporal luma enhancement, crop and resize");
    int alpha = 2, crop_h = 256, crop_w = 256;
    double beta = -0.5;
    std::string enhance_out;
    auto* o_alpha = enhance_cmd->add_option("--alpha", alpha, "Temporal window size (even)");
    auto* o_beta = enhance_cmd->add_option("--beta", beta, "Luma mix in [-1, 0]");
    auto* o_crop_h = enhance_cmd->add_option("--crop-height", crop_h, "Output height");
    auto* o_crop_w = enhance_cmd->add_option("--crop-width", crop_w, "Output width");
    enhance_cmd->add_option("--out", enhance_out, "Directory for enhanced images");

    // partition
    auto* partition_cmd = app.add_subcommand("partition", "Site-level train/test/validation split");
    double theta = 0.7, val_theta = 0.5;
    std::int64_t iterations = 10000;
    std::string metric = "L1";
    auto* o_theta = partition_cmd->add_option("--theta", theta, "Train share of images");
    auto* o_val_theta = partition_cmd->add_option("--val-theta", val_theta, "Test share of the non-train pool");
    auto* o_iter = partition_cmd->add_option("--iterations", iterations, "Random-search proposals");
    auto* o_metric = partition_cmd->add_option("--metric", metric, "L1 or L2")->check(CLI::IsMember({"L1", "L2"}));
    auto* o_pseed = partition_cmd->add_option("--seed", seed, "Seed");

    // augment
    auto* augment_cmd = app.add_subcommand("augment", "Balance a partition with augmented copies");
    std::string aug_partition = "train", aug_target = "max-class";
    bool equalize = false;
    augment_cmd->add_option("--partition", aug_partition, "train or test")->check(CLI::IsMember({"train", "test", "val", "validation"}));
    auto* o_target = augment_cmd->add_option("--target", aug_target, "max-class or an image count per class");
    auto* o_equalize = augment_cmd->add_flag("--equalize", equalize, "Histogram-equalize generated luma");
    auto* o_aseed = augment_cmd->add_option("--seed", seed, "Seed");

    // train
    auto* train_cmd = app.add_subcommand("train", "Train the patch-attention classifier");
    std::string train_config, train_partition;
    int epochs = 20, batch = 16;
    double lr = 1e-3;
    train_cmd->add_option("--config", train_config, "Pipeline or model config JSON");
    train_cmd->add_option("--partition", train_partition, "Partition spec to check the training manifests against");
    auto* o_epochs = train_cmd->add_option("--epochs", epochs, "Epochs");
    auto* o_lr = train_cmd->add_option("--lr", lr, "Learning rate");
    auto* o_batch = train_cmd->add_option("--batch-size", batch, "Minibatch size");
    auto* o_tseed = train_cmd->add_option("--seed", seed, "Seed");

    // predict
    auto* predict_cmd = app.add_subcommand("predict", "Predict labels for a manifest");
    std::string model_path, predict_out, predict_input;
    predict_cmd->add_option("--model", model_path, "Model file (default: <workdir>/model.bin)");
    predict_cmd->add_option("--out", predict_out, "Predictions CSV (default: <workdir>/predictions.csv)");
    predict_cmd->add_option("--input", predict_input, "Manifest to score (default: validation partition)");

    // evaluate
    auto* evaluate_cmd = app.add_subcommand("evaluate", "Score predictions against labelled truth");
    std::string eval_predictions, eval_truth;
    bool harmonic = false;
    evaluate_cmd->add_option("--predictions", eval_predictions, "Predictions CSV");
    evaluate_cmd->add_option("--truth", eval_truth, "Labelled manifest (default: enhanced.jsonl)");
    evaluate_cmd->add_flag("--harmonic", harmonic, "Also print the harmonic-mean F1");

    // pipeline
    auto* pipeline_cmd = app.add_subcommand("pipeline", "Run the whole chain");
    std::string mode = "train", pipe_model;
    pipeline_cmd->add_option("--mode", mode, "train or infer")->check(CLI::IsMember({"train", "infer"}));
    auto* o_praw = pipeline_cmd->add_option("--raw", raw_dir, "Raw image directory");
    pipeline_cmd->add_option("--model", pipe_model, "Model file for inference (default: <workdir>/model.bin)");

    // synth
    auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic labelled corpus");
    std::string synth_out;
    sg::SynthConfig synth;
    synth_cmd->add_option("--out", synth_out, "Output directory")->required();
    synth_cmd->add_option("--sites", synth.sites, "Number of sites");
    synth_cmd->add_option("--frames", synth.frames_per_site, "Frames per site");
    synth_cmd->add_option("--defects", synth.defects_per_kind, "Defects of each kind per site");
    auto* o_sseed = synth_cmd->add_option("--seed", seed, "Seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        sg::PipelineConfig cfg;
        std::string cfg_file = !train_config.empty() ? train_config : config_path;
        if (!cfg_file.empty()) cfg = sg::load_pipeline_config(cfg_file);
        if (o_workdir->count() > 0 || cfg.workdir == "." ) cfg.workdir = workdir.empty() ? fs::path(".") : fs::path(workdir);
        const bool seed_set = o_seed->count() + o_pseed->count() + o_aseed->count() + o_tseed->count() + o_sseed->count() > 0;
        if (seed_set) cfg.seed = seed;
        override_if(o_jobs, cfg.jobs, jobs);
        override_if(o_task, cfg.task, task);
        if (o_raw->count() + o_praw->count() > 0) cfg.raw_dir = raw_dir;
        if (!quality_config.empty()) {
            std::ifstream in(quality_config);
            if (!in) throw sg::ValidationError("missing quality config " + quality_config);
            cfg.quality = nlohmann::json::parse(in).get<sg::QualityConfig>();
        }
        override_if(o_alpha, cfg.enhance.alpha, alpha);
        override_if(o_beta, cfg.enhance.beta, beta);
        override_if(o_crop_h, cfg.enhance.crop_height, crop_h);
        override_if(o_crop_w, cfg.enhance.crop_width, crop_w);
        override_if(o_theta, cfg.partition.theta, theta);
        override_if(o_val_theta, cfg.partition.val_theta, val_theta);
        override_if(o_iter, cfg.partition.iterations, iterations);
        if (o_metric->count() > 0) cfg.partition.metric = sg::metric_from_string(metric);
        if (o_target->count() > 0) cfg.augment.target = sg::balance_target_from_string(aug_target);
        if (o_equalize->count() > 0) cfg.augment.equalize = equalize;
        override_if(o_epochs, cfg.model.epochs, epochs);
        override_if(o_lr, cfg.model.learning_rate, lr);
        override_if(o_batch, cfg.model.batch_size, batch);
        cfg.propagate();
        cfg.validate();
        fs::create_directories(cfg.workdir);
        const sg::WorkPaths w{cfg.workdir};

        if (*ingest_cmd) {
            emit(sg::stage_ingest(cfg), json);
        } else if (*filter_cmd) {
            emit(sg::stage_filter(cfg), json);
        } else if (*enhance_cmd) {
            emit(sg::stage_enhance(cfg, enhance_out.empty() ? std::nullopt : std::optional<fs::path>(enhance_out)), json);
        } else if (*partition_cmd) {
            emit(sg::stage_partition(cfg), json);
        } else if (*augment_cmd) {
            emit(sg::stage_augment(cfg, aug_partition), json);
        } else if (*train_cmd) {
            if (!train_partition.empty()) {
                const sg::PartitionSpec spec = sg::read_partition(train_partition);
                for (const std::string role : {"train", "test"}) {
                    sg::require_file(w.augmented(role), "augmented manifest");
                    const auto allowed = spec.subset(role);
                    for (const auto& r : sg::read_manifest(w.augmented(role)).records())
                        if (!allowed.count(r.site_id))
                            throw sg::ValidationError("train: record '" + r.id + "' is not in the " + role +
                                                      " partition of " + train_partition);
                }
            }
            emit(sg::stage_train(cfg), json);
        } else if (*predict_cmd) {
            emit(sg::stage_predict(cfg, model_path.empty() ? w.model() : fs::path(model_path),
                                   predict_input.empty() ? std::nullopt : std::optional<fs::path>(predict_input),
                                   predict_out.empty() ? std::nullopt : std::optional<fs::path>(predict_out)),
                 json);
        } else if (*evaluate_cmd) {
            auto entry = sg::stage_evaluate(
                cfg, eval_predictions.empty() ? std::nullopt : std::optional<fs::path>(eval_predictions),
                eval_truth.empty() ? std::nullopt : std::optional<fs::path>(eval_truth));
            if (!harmonic) entry.erase("harmonic_f1");
            emit(entry, json);
        } else if (*pipeline_cmd) {
            const auto log = mode == "train"
                                 ? sg::run_training_pipeline(cfg)
                                 : sg::run_inference_pipeline(cfg, pipe_model.empty() ? w.model() : fs::path(pipe_model));
            for (const auto& entry : log) emit(entry, json);
        } else if (*synth_cmd) {
            synth.seed = cfg.seed;
            const auto corpus = sg::generate_corpus(synth_out, synth, cfg.jobs);
            emit({{"stage", "synth"}, {"images", corpus.frames.size()}, {"out", synth_out}}, json);
        }
    } catch (const sg::ValidationError& e) {
        if (json) std::cerr << nlohmann::json{{"error", e.what()}, {"kind", "validation"}}.dump() << '\n';
        else std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const nlohmann::json::exception& e) {
        if (json) std::cerr << nlohmann::json{{"error", e.what()}, {"kind", "validation"}}.dump() << '\n';
        else std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        if (json) std::cerr << nlohmann::json{{"error", e.what()}, {"kind", "runtime"}}.dump() << '\n';
        else std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
