#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <map>

#include <json.hpp>

#include <streamgate/catalog.hpp>

#include "test_util.hpp"

namespace fs = std::filesystem;
using testutil::slurp;
using testutil::TempDir;

namespace {

struct RunResult {
    int code = -1;
    std::string out;
};

RunResult run_cli(const std::string& args) {
    static int counter = 0;
    const fs::path log = fs::temp_directory_path() / ("sg_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++) + ".log");
    const std::string cmd = std::string(STREAMGATE_CLI) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(log);
    fs::remove(log);
    return r;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// Small enough to run the whole chain in a few seconds.
void write_config(const fs::path& path) {
    const nlohmann::json cfg = {
        {"seed", 7},
        {"task", 2},
        {"enhance", {{"alpha", 2}, {"beta", -0.5}, {"crop_height", 32}, {"crop_width", 32}}},
        {"partition", {{"theta", 0.5}, {"iterations", 200}}},
        {"augment", {{"target", "max-class"}}},
        {"model", {{"input_side", 32}, {"patch_side", 8}, {"embed_dim", 8}, {"heads", 2}, {"blocks", 1},
                   {"epochs", 2}, {"batch_size", 16}, {"learning_rate", 0.01}}}};
    std::ofstream(path) << cfg.dump(2);
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) out[fs::relative(e.path(), dir).generic_string()] = slurp(e.path());
    return out;
}

class PipelineCli : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        root_ = new TempDir("sg_cli");
        const auto r = run_cli("--seed 3 synth --out " + q(raw()) + " --sites 3 --frames 24");
        ASSERT_EQ(r.code, 0) << r.out;
        write_config(config());
    }
    static void TearDownTestSuite() {
        delete root_;
        root_ = nullptr;
    }
    static fs::path raw() { return root_->path() / "raw"; }
    static fs::path config() { return root_->path() / "config.json"; }
    static TempDir* root_;
};

TempDir* PipelineCli::root_ = nullptr;

}  // namespace

TEST_F(PipelineCli, InferWithoutModelNamesTheMissingArtifact) {
    TempDir work;
    const auto r = run_cli("--workdir " + q(work.path()) + " pipeline --mode infer --raw " + q(raw()));
    EXPECT_EQ(r.code, 1) << r.out;
    EXPECT_NE(r.out.find("model file"), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("model.bin"), std::string::npos) << r.out;
}

TEST_F(PipelineCli, FullChainProducesReport) {
    TempDir work;
    const auto r = run_cli("--workdir " + q(work.path()) + " --config " + q(config()) + " --json pipeline --mode train --raw " + q(raw()));
    ASSERT_EQ(r.code, 0) << r.out;
    for (const char* f : {"catalog.jsonl", "filtered.jsonl", "quality_report.json", "enhanced.jsonl", "partition.json",
                          "augmented_train.jsonl", "augmented_test.jsonl", "model.bin", "train_history.json",
                          "predictions.csv", "report.json", "report.csv", "report.svg"})
        EXPECT_TRUE(fs::exists(work / f)) << f;
    // every log line is a JSON object
    std::istringstream lines(r.out);
    std::string line;
    int n = 0;
    while (std::getline(lines, line)) {
        EXPECT_NO_THROW((void)nlohmann::json::parse(line)) << line;
        ++n;
    }
    EXPECT_EQ(n, 9);

    const auto infer = run_cli("--workdir " + q(work.path() / "infer") + " pipeline --mode infer --raw " + q(raw()) +
                               " --model " + q(work.path() / "model.bin"));
    ASSERT_EQ(infer.code, 0) << infer.out;
    EXPECT_TRUE(fs::exists(work.path() / "infer" / "predictions.csv"));
    EXPECT_TRUE(fs::exists(work.path() / "infer" / "report.json"));
}

TEST_F(PipelineCli, RerunIsByteIdentical) {
    TempDir work;
    const std::string args = "--workdir " + q(work.path()) + " --config " + q(config()) + " pipeline --mode train --raw " + q(raw());
    ASSERT_EQ(run_cli(args).code, 0);
    const auto first = snapshot(work.path());
    fs::remove_all(work.path());
    fs::create_directories(work.path());
    ASSERT_EQ(run_cli("--jobs 3 " + args).code, 0);
    const auto second = snapshot(work.path());
    ASSERT_EQ(first.size(), second.size());
    for (const auto& [name, bytes] : first) EXPECT_TRUE(second.at(name) == bytes) << name;
}

TEST_F(PipelineCli, StagesRunIndividuallyAndSeedsAreLogged) {
    TempDir work;
    const std::string base = "--workdir " + q(work.path()) + " --config " + q(config()) + " ";
    ASSERT_EQ(run_cli(base + "ingest --raw " + q(raw())).code, 0);
    ASSERT_EQ(run_cli(base + "filter").code, 0);
    ASSERT_EQ(run_cli(base + "enhance").code, 0);
    ASSERT_EQ(run_cli(base + "partition --iterations 50 --seed 11").code, 0);
    ASSERT_EQ(run_cli(base + "augment --partition train --seed 11").code, 0);
    ASSERT_EQ(run_cli(base + "augment --partition test --seed 11").code, 0);
    const auto tr = run_cli(base + "train --epochs 1 --seed 11 --partition " + q(work.path() / "partition.json"));
    ASSERT_EQ(tr.code, 0) << tr.out;
    ASSERT_EQ(run_cli(base + "predict").code, 0);
    const auto ev = run_cli(base + "evaluate --harmonic");
    ASSERT_EQ(ev.code, 0) << ev.out;
    EXPECT_NE(ev.out.find("harmonic_f1="), std::string::npos) << ev.out;

    // flags beat the config file
    const auto part = nlohmann::json::parse(slurp(work.path() / "partition.json"));
    EXPECT_EQ(part["iterations"], 50);
    EXPECT_EQ(part["seed"], 11);
    EXPECT_EQ(nlohmann::json::parse(slurp(work.path() / "train_history.json"))["seed"], 11);
    EXPECT_EQ(nlohmann::json::parse(slurp(work.path() / "train_history.json"))["epochs"].size(), 1u);
    const auto aug = streamgate::read_manifest(work.path() / "augmented_train.jsonl");
    bool any_generated = false;
    for (const auto& r : aug.records())
        if (r.stage == streamgate::Stage::Augmented) {
            any_generated = true;
            EXPECT_EQ(r.seed, 11u);
        }
    EXPECT_TRUE(any_generated);

    // validation partition is never augmented
    EXPECT_EQ(run_cli(base + "augment --partition val").code, 1);
}

TEST_F(PipelineCli, DeletingDownstreamLeavesUpstreamIntact) {
    TempDir work;
    const std::string base = "--workdir " + q(work.path()) + " --config " + q(config()) + " ";
    ASSERT_EQ(run_cli(base + "pipeline --mode train --raw " + q(raw())).code, 0);
    const std::string catalog = slurp(work.path() / "catalog.jsonl");
    const std::string enhanced = slurp(work.path() / "enhanced.jsonl");
    fs::remove(work.path() / "augmented_train.jsonl");
    const auto r = run_cli(base + "train");
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.out.find("augmented_train.jsonl"), std::string::npos) << r.out;
    EXPECT_EQ(slurp(work.path() / "catalog.jsonl"), catalog);
    EXPECT_EQ(slurp(work.path() / "enhanced.jsonl"), enhanced);
    ASSERT_EQ(run_cli(base + "augment --partition train").code, 0);
    EXPECT_EQ(run_cli(base + "train").code, 0);
}

TEST_F(PipelineCli, ExitCodes) {
    TempDir work;
    EXPECT_EQ(run_cli("--workdir " + q(work.path()) + " filter").code, 1);
    EXPECT_EQ(run_cli("frobnicate").code, 1);
    EXPECT_EQ(run_cli("--task 3 ingest --raw " + q(raw())).code, 1);
    std::ofstream(work / "bad.json") << R"({"sed": 1})";
    const auto r = run_cli("--workdir " + q(work.path()) + " --config " + q(work / "bad.json") + " ingest --raw " + q(raw()));
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.out.find("sed"), std::string::npos);
    EXPECT_EQ(run_cli("--workdir " + q(work.path()) + " enhance --beta 0.5").code, 1);
}

TEST_F(PipelineCli, WorkdirFromEnvironment) {
    TempDir work;
    const std::string cmd = "STREAMGATE_WORKDIR=" + q(work.path()) + " " + std::string(STREAMGATE_CLI) + " ingest --raw " +
                            q(raw()) + " > /dev/null 2>&1";
    ASSERT_EQ(std::system(cmd.c_str()), 0);
    EXPECT_TRUE(fs::exists(work / "catalog.jsonl"));
}
