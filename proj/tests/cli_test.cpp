#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "rala/analysis.hpp"

namespace {

namespace fs = std::filesystem;

struct RunResult {
  int status = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("rala_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  RunResult run(const std::string& args) const {
    const fs::path out = dir_ / "stdout", err = dir_ / "stderr";
    const std::string cmd = std::string(RALA_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
    const int raw = std::system(cmd.c_str());
    RunResult r;
    r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").status, 2);
  EXPECT_EQ(run("rank --bogus").status, 2);
  EXPECT_EQ(run("frobnicate").status, 2);
  EXPECT_EQ(run("rank --format xml").status, 2);
  EXPECT_EQ(run("rank --variant hydra").status, 2);
  EXPECT_EQ(run("rank --preset toy --n 10").status, 2);
  EXPECT_EQ(run("rank --key-rank 65").status, 2);
  EXPECT_EQ(run("info --preset ravlt-xl").status, 2);
  EXPECT_EQ(run("gradcheck --ops nope").status, 2);
  const RunResult single = run("bench --n-list 196");
  EXPECT_EQ(single.status, 2);
  EXPECT_NE(single.err.find("sequence lengths"), std::string::npos);
}

TEST_F(Cli, HelpExitsZero) {
  EXPECT_EQ(run("--help").status, 0);
  EXPECT_EQ(run("gradcheck --help").status, 0);
}

TEST_F(Cli, RuntimeFailuresExitOne) {
  EXPECT_EQ(run("rank --n 16 --d 4 --key-rank 2 --out /nonexistent-dir/x.csv").status, 1);
  EXPECT_EQ(run("train --config " + path("missing.json")).status, 1);
  std::ofstream(path("bad.json")) << "{\"epochs\": 2, \"learning_rate_typo\": 1}";
  EXPECT_EQ(run("train --config " + path("bad.json")).status, 1);
}

TEST_F(Cli, RankOutputRanks) {
  const RunResult r = run("rank --variant rala --n 196 --d 64 --key-rank 8");
  ASSERT_EQ(r.status, 0) << r.err;
  const auto recs = rala::analysis::parse_rank_csv(r.out);
  bool seen = false;
  for (const auto& rec : recs)
    if (rec.report.name == "output") {
      EXPECT_EQ(rec.report.numerical_rank, 64u);
      seen = true;
    }
  EXPECT_TRUE(seen);
  EXPECT_NE(r.err.find("\"seed\":0"), std::string::npos);

  const RunResult v = run("rank --variant linear_vanilla --key-rank 8 --seed 9");
  ASSERT_EQ(v.status, 0);
  for (const auto& rec : rala::analysis::parse_rank_csv(v.out)) {
    if (rec.report.name == "output") {
      EXPECT_LE(rec.report.numerical_rank, 8u);
    }
  }
}

TEST_F(Cli, RankPresetJson) {
  const RunResult r = run("--format json rank --preset toy --head 0");
  ASSERT_EQ(r.status, 0) << r.err;
  const auto t = rala::analysis::parse_rank_json(nlohmann::json::parse(r.out));
  EXPECT_EQ(t.records.size(), 20u);  // 5 layers x 4 matrices
}

TEST_F(Cli, InfoMatchesPresetRow) {
  const RunResult r = run("info --preset ravlt-s --format json");
  ASSERT_EQ(r.status, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j.at("architecture"), "[3,5,9,3]/[64,128,320,512]/[1,2,5,8]");
  EXPECT_EQ(j.at("resolution"), 224);

  const RunResult t = run("info --preset ravlt-t --resolution 224");
  ASSERT_EQ(t.status, 0);
  std::istringstream lines(t.out);
  std::string line, last;
  while (std::getline(lines, line)) last = line;
  unsigned long long params = 0, flops = 0;
  ASSERT_EQ(std::sscanf(last.c_str(), "total,%llu,%llu", &params, &flops), 2) << last;
  EXPECT_NEAR(static_cast<double>(params), 15e6, 0.15 * 15e6);
  EXPECT_NEAR(static_cast<double>(flops), 2.4e9, 0.15 * 2.4e9);
}

TEST_F(Cli, GradcheckSingleOp) {
  const RunResult r = run("gradcheck --ops block --trials 2");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(r.out.substr(0, r.out.find('\n')), "op,trials,h,max_rel_error,passed");
  EXPECT_NE(r.out.find("block,2,1e-05,"), std::string::npos);
}

TEST_F(Cli, BenchWarnsOnSingleRepeat) {
  const RunResult r = run("bench --variants softmax,rala --n-list 8,16,32,128 --d 4 --repeats 1");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_NE(r.err.find("warning"), std::string::npos);
  EXPECT_NE(r.err.find("slope softmax: flops=2"), std::string::npos);
  EXPECT_EQ(rala::analysis::parse_scaling_csv(r.out).size(), 8u);
}

TEST_F(Cli, TrainWritesMetricsAndCheckpoint) {
  std::ofstream(path("cfg.json")) << R"({"epochs": 2, "n_samples": 20, "seed": 4})";
  const RunResult r =
      run("train --config " + path("cfg.json") + " --out " + path("m.csv") + " --checkpoint " + path("m.ckpt"));
  ASSERT_EQ(r.status, 0) << r.err;
  const std::string csv = slurp(path("m.csv"));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_TRUE(fs::exists(path("m.ckpt")));
  EXPECT_NE(r.err.find("\"seed\":4"), std::string::npos);
}

TEST_F(Cli, SameSeedSameFiles) {
  for (const std::string args : {"rank --key-rank 4 --n 32 --d 8", "gradcheck --ops rala_attention --trials 2",
                                 "info --preset ravlt-b --format json", "train --epochs 1 --samples 10"}) {
    ASSERT_EQ(run("--seed 11 " + args + " --out " + path("a")).status, 0) << args;
    ASSERT_EQ(run("--seed 11 " + args + " --out " + path("b")).status, 0) << args;
    EXPECT_EQ(slurp(path("a")), slurp(path("b"))) << args;
  }
}

}  // namespace
