#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string out;
};

/// Runs the CLI inside `cwd`, capturing stdout. stderr is discarded.
Run cli(const std::string& args, const fs::path& cwd) {
    const std::string cmd =
        "cd '" + cwd.string() + "' && env -u STYLE_RECAL_DATA '" SRM_CLI_PATH "' " + args + " 2>/dev/null";
    Run r;
    FILE* p = popen(cmd.c_str(), "r");
    if (!p) return r;
    char buf[4096];
    std::size_t n;
    while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
    const int status = pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("srm_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    std::vector<std::string> entries() const {
        std::vector<std::string> names;
        for (auto& e : fs::directory_iterator(dir_)) names.push_back(e.path().filename().string());
        std::sort(names.begin(), names.end());
        return names;
    }

    fs::path dir_;
};

const std::string kConfigs = SRM_CONFIG_DIR;

}  // namespace

TEST_F(CliTest, ComplexityReportsSrmDeltaOnResNet50) {
    auto r = cli("complexity --arch " + kConfigs + "/resnet50.json --recalib srm --out rep", dir_);
    ASSERT_EQ(r.code, 0);
    auto j = nlohmann::json::parse(r.out);
    EXPECT_EQ(j["added_by_recalib"].get<long>(), 60416);
    EXPECT_EQ(j["total_params"].get<long>(), 25617448);
    EXPECT_EQ(nlohmann::json::parse(slurp(dir_ / "rep" / "complexity.json")), j);
    EXPECT_TRUE(fs::exists(dir_ / "rep" / "manifest.json"));

    auto se = nlohmann::json::parse(cli("complexity --arch resnet50 --recalib se", dir_).out);
    EXPECT_EQ(se["added_by_recalib"].get<long>(), 2530992);
    auto stats = nlohmann::json::parse(cli("complexity --arch resnet50 --recalib srm --running-stats", dir_).out);
    EXPECT_EQ(stats["added_by_recalib"].get<long>(), 90624);
}

TEST_F(CliTest, GradcheckPassesAndReportsMaximum) {
    auto r = cli("gradcheck --seed 7", dir_);
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("max relative error"), std::string::npos);
    EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
}

TEST_F(CliTest, UsageErrorsExitWithTwo) {
    EXPECT_EQ(cli("", dir_).code, 2);
    EXPECT_EQ(cli("fly", dir_).code, 2);
    EXPECT_EQ(cli("complexity --bogus", dir_).code, 2);
    std::ofstream(dir_ / "bad.json") << "{\"stages\": [";
    EXPECT_EQ(cli("complexity --arch bad.json", dir_).code, 2);
    std::ofstream(dir_ / "unknown.json") << "{\"depth\": 3}";
    EXPECT_EQ(cli("complexity --arch unknown.json", dir_).code, 2);
    EXPECT_EQ(cli("complexity --recalib srm:bogus", dir_).code, 2);
    EXPECT_EQ(cli("train --out run --data missing --steps 1", dir_).code, 2);
    EXPECT_EQ(cli("train --out run --precision f16 --steps 1", dir_).code, 2);
    EXPECT_EQ(cli("eval --ckpt nowhere.bin --data missing", dir_).code, 2);
}

TEST_F(CliTest, RuntimeFailureExitsWithOne) {
    std::ofstream(dir_ / "junk.bin") << "not a checkpoint";
    ASSERT_EQ(cli("synth --out data --per-class 4", dir_).code, 0);
    EXPECT_EQ(cli("eval --ckpt junk.bin --data data", dir_).code, 1);
}

TEST_F(CliTest, PipelineIsDeterministicAndStaysUnderOut) {
    ASSERT_EQ(cli("synth --out data --per-class 16 --seed 2", dir_).code, 0);
    const std::string train = "train --arch resnet20 --recalib srm --data data --steps 8 --batch 16 --lr 0.05 "
                              "--log-every 2 --seed 4 --ckpt-every 4 --out ";
    ASSERT_EQ(cli(train + "a", dir_).code, 0);
    ASSERT_EQ(cli(train + "b", dir_).code, 0);
    EXPECT_EQ(entries(), (std::vector<std::string>{"a", "b", "data"}));
    for (auto f : {"metrics.csv", "checkpoint.bin", "checkpoint_4.bin", "manifest.json", "eval.json"}) {
        EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "b" / f)) << f;
    }
    auto manifest = nlohmann::json::parse(slurp(dir_ / "a" / "manifest.json"));
    EXPECT_EQ(manifest["train"]["steps"], 8);
    EXPECT_EQ(manifest["arch"]["recalib"], "avg+std:cfc+bn");
    EXPECT_EQ(manifest["seed"], 4);

    // A run resumed from the mid-way checkpoint ends in the same state.
    fs::create_directories(dir_ / "c");
    fs::copy_file(dir_ / "a" / "metrics.csv", dir_ / "c" / "metrics.csv");
    ASSERT_EQ(cli(train + "c --resume a/checkpoint_4.bin", dir_).code, 0);
    EXPECT_EQ(slurp(dir_ / "a" / "checkpoint.bin"), slurp(dir_ / "c" / "checkpoint.bin"));
    EXPECT_EQ(slurp(dir_ / "a" / "metrics.csv"), slurp(dir_ / "c" / "metrics.csv"));

    auto p = cli("prune --ckpt a/checkpoint.bin --data data --stage 2 --ratios 0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0 "
                 "--out prune",
                 dir_);
    ASSERT_EQ(p.code, 0);
    const auto csv = slurp(dir_ / "prune" / "prune_stage2.csv");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 12);
    EXPECT_EQ(csv.substr(0, 11), "ratio,top1\n");

    auto ev = cli("eval --ckpt a/checkpoint.bin --data data", dir_);
    ASSERT_EQ(ev.code, 0);
    const double top1 = nlohmann::json::parse(ev.out)["top1"];
    std::istringstream rows(csv);
    std::string line;
    std::getline(rows, line);
    std::getline(rows, line);
    EXPECT_EQ(std::stod(line.substr(line.find(',') + 1)), top1);

    EXPECT_EQ(cli("prune --ckpt a/checkpoint.bin --data data --stage 4 --out prune", dir_).code, 2);

    ASSERT_EQ(cli("analyze --ckpt a/checkpoint.bin --data data --top-k 3 --out an", dir_).code, 0);
    for (auto f : {"record.bin", "summary.json", "top_activated.csv", "corr/stage3.block2.csv"}) {
        EXPECT_TRUE(fs::exists(dir_ / "an" / f)) << f;
    }
    auto summary = nlohmann::json::parse(slurp(dir_ / "an" / "summary.json"));
    EXPECT_GT(summary["sum_squared_corr"].get<double>(), 0.0);
    EXPECT_EQ(summary["per_layer"].size(), 9u);
    EXPECT_EQ(entries(), (std::vector<std::string>{"a", "an", "b", "c", "data", "prune"}));
}

TEST_F(CliTest, PlainModelsCannotBePrunedOrAnalyzed) {
    ASSERT_EQ(cli("synth --out data --per-class 4", dir_).code, 0);
    ASSERT_EQ(cli("train --arch resnet20 --recalib none --data data --steps 1 --batch 8 --out p", dir_).code, 0);
    EXPECT_EQ(cli("prune --ckpt p/checkpoint.bin --data data --stage 1 --out x", dir_).code, 2);
    EXPECT_EQ(cli("analyze --ckpt p/checkpoint.bin --data data --out y", dir_).code, 2);
    EXPECT_EQ(entries(), (std::vector<std::string>{"data", "p"}));
}

TEST_F(CliTest, DataDefaultsToEnvironmentRoot) {
    ASSERT_EQ(cli("synth --out data --per-class 4", dir_).code, 0);
    auto r = cli("train --arch resnet20 --steps 1 --batch 8 --precision f64 --out run", dir_);
    EXPECT_EQ(r.code, 2);
    const std::string env = "STYLE_RECAL_DATA='" + (dir_ / "data").string() + "' ";
    const std::string cmd = "cd '" + dir_.string() + "' && " + env + "'" SRM_CLI_PATH
                            "' train --arch resnet20 --steps 1 --batch 8 --precision f64 --out run >/dev/null 2>&1";
    EXPECT_EQ(std::system(cmd.c_str()), 0);
    auto ev = cli("eval --ckpt run/checkpoint.bin --data data", dir_);
    EXPECT_EQ(ev.code, 0);
}
