#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cli.hpp"
#include "ehpe/metrics.hpp"
#include "ehpe/params.hpp"

namespace ehpe::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Result {
  int code;
  std::string out, err;
};

Result call(std::vector<std::string> args) {
  args.insert(args.begin(), "ehpe");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

class Cli : public ::testing::Test {
 protected:
  static fs::path dir;
  static void SetUpTestSuite() {
    dir = fs::temp_directory_path() / ("ehpe_cli_test_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    ASSERT_EQ(call({"gen-data", "--n", "40", "--seed", "7", "--out", p("d.bin")}).code, kOk);
    std::ofstream(dir / "tiny.json") << R"({"epochs": 1, "batch_size": 4, "train_limit": 8, "val_limit": 4})";
  }
  static void TearDownTestSuite() { fs::remove_all(dir); }
  static std::string p(const std::string& name) { return (dir / name).string(); }
};
fs::path Cli::dir;

TEST_F(Cli, GenDataIsDeterministicAndWritesManifest) {
  const auto r = call({"gen-data", "--n", "40", "--seed", "7", "--out", p("d2.bin")});
  ASSERT_EQ(r.code, kOk) << r.err;
  EXPECT_EQ(slurp(p("d.bin")), slurp(p("d2.bin")));
  const auto m = json::parse(slurp(p("d2.bin.manifest.json")));
  EXPECT_EQ(m["command"], "gen-data");
  EXPECT_EQ(m["outputs"][0]["sha256"], sha256_hex(slurp(p("d2.bin"))));
  EXPECT_EQ(m["dataset_sha256"], m["outputs"][0]["sha256"]);
}

TEST_F(Cli, GenDataRejectsEmptyDatasetAndBadPaths) {
  EXPECT_EQ(call({"gen-data", "--n", "0", "--out", p("x.bin")}).code, kUsage);
  EXPECT_EQ(call({"gen-data", "--out", p("x.bin")}).code, kUsage);
  EXPECT_EQ(call({"gen-data", "--n", "3", "--out", p("no/such/dir/x.bin")}).code, kData);
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(call({}).code, kUsage);
  EXPECT_EQ(call({"frobnicate"}).code, kUsage);
  EXPECT_EQ(call({"ablate", "--suite", "table9", "--dataset", p("d.bin")}).code, kUsage);
  EXPECT_EQ(call({"eval", "--dataset", p("d.bin"), "--report", p("r.json")}).code, kUsage);
  EXPECT_EQ(call({"--version"}).code, kOk);
}

TEST_F(Cli, PgWithoutTwCheckpointNamesTheFlag) {
  const auto r = call({"train", "--phase", "pg", "--config", p("tiny.json"), "--dataset", p("d.bin"), "--out", p("x.ck")});
  EXPECT_EQ(r.code, kUsage);
  EXPECT_NE(r.err.find("--tw-checkpoint"), std::string::npos);
}

TEST_F(Cli, UnknownConfigKeyIsAUsageError) {
  std::ofstream(dir / "bad.json") << R"({"epochs": 1, "momentum": 0.9})";
  const auto r = call({"train", "--phase", "tw", "--config", p("bad.json"), "--dataset", p("d.bin"), "--out", p("x.ck")});
  EXPECT_EQ(r.code, kUsage);
  EXPECT_NE(r.err.find("momentum"), std::string::npos);
}

TEST_F(Cli, DegenerateBranchConfigIsRejected) {
  std::ofstream(dir / "nobranch.json") << R"({"spi": false, "fem": false})";
  const auto r = call({"train", "--phase", "pg", "--config", p("nobranch.json"), "--dataset", p("d.bin"), "--out",
                       p("x.ck"), "--tw-checkpoint", p("t.ck")});
  EXPECT_EQ(r.code, kUsage);
}

TEST_F(Cli, MissingFilesAreDataErrors) {
  EXPECT_EQ(call({"train", "--phase", "tw", "--dataset", p("none.bin"), "--out", p("x.ck")}).code, kData);
  EXPECT_EQ(call({"train", "--phase", "pg", "--config", p("tiny.json"), "--dataset", p("d.bin"), "--out", p("x.ck"),
                  "--tw-checkpoint", p("none.ck")})
                .code,
            kData);
  EXPECT_EQ(call({"eval", "--checkpoint", p("none.ck"), "--dataset", p("d.bin"), "--report", p("r.json")}).code, kData);
}

TEST_F(Cli, BadSeedEnvironmentIsAUsageError) {
  ::setenv("EHPE_SEED", "twelve", 1);
  const auto r = call({"train", "--phase", "tw", "--config", p("tiny.json"), "--dataset", p("d.bin"), "--out", p("x.ck")});
  ::unsetenv("EHPE_SEED");
  EXPECT_EQ(r.code, kUsage);
}

TEST_F(Cli, TwoPhaseTrainingAndEvaluation) {
  auto r = call({"train", "--phase", "tw", "--config", p("tiny.json"), "--dataset", p("d.bin"), "--out", p("t.ck"),
                 "--log", p("t.ndjson")});
  ASSERT_EQ(r.code, kOk) << r.err;
  EXPECT_EQ(read_checkpoint(p("t.ck")).stage, "TW");
  std::ifstream log(p("t.ndjson"));
  std::string line;
  std::size_t lines = 0;
  while (std::getline(log, line)) {
    const auto rec = json::parse(line);
    EXPECT_EQ(rec["epoch"], lines);
    ++lines;
  }
  EXPECT_EQ(lines, 2u);
  auto m = json::parse(slurp(p("t.ck.manifest.json")));
  EXPECT_EQ(m["outputs"].size(), 2u);
  EXPECT_EQ(m["dataset_sha256"], sha256_hex(slurp(p("d.bin"))));

  r = call({"train", "--phase", "pg", "--config", p("tiny.json"), "--dataset", p("d.bin"), "--out", p("p.ck"),
            "--tw-checkpoint", p("t.ck"), "--verify-repro"});
  ASSERT_EQ(r.code, kOk) << r.err;
  const auto pg = read_checkpoint(p("p.ck"));
  EXPECT_EQ(pg.stage, "PG");
  EXPECT_EQ(pg.meta["tw_checkpoint_sha256"], sha256_hex(slurp(p("t.ck"))));

  // A TW checkpoint over 6 joints cannot stand in for the full model.
  r = call({"eval", "--checkpoint", p("t.ck"), "--dataset", p("d.bin"), "--report", p("r.json")});
  EXPECT_EQ(r.code, kData);
  EXPECT_NE(r.err.find("stage mismatch"), std::string::npos);

  r = call({"eval", "--checkpoint", p("p.ck"), "--dataset", p("d.bin"), "--report", p("r.json"), "--split", "val"});
  ASSERT_EQ(r.code, kOk) << r.err;
  EXPECT_NE(r.out.find("PA-MPJPE"), std::string::npos);
  const auto report = metrics::EvalReport::from_json(json::parse(slurp(p("r.json"))));
  EXPECT_GT(report.n_samples, 0u);
  EXPECT_EQ(slurp(p("r.csv")), report.category_csv());
}

TEST_F(Cli, SeedEnvironmentOverridesConfig) {
  ::setenv("EHPE_SEED", "5", 1);
  auto r = call({"train", "--phase", "tw", "--config", p("tiny.json"), "--dataset", p("d.bin"), "--out", p("s5.ck"),
                 "--epochs", "0"});
  ::unsetenv("EHPE_SEED");
  ASSERT_EQ(r.code, kOk) << r.err;
  std::ofstream(dir / "seed5.json") << R"({"epochs": 0, "batch_size": 4, "train_limit": 8, "val_limit": 4, "seed": 5})";
  r = call({"train", "--phase", "tw", "--config", p("seed5.json"), "--dataset", p("d.bin"), "--out", p("c5.ck")});
  ASSERT_EQ(r.code, kOk) << r.err;
  EXPECT_EQ(slurp(p("s5.ck")), slurp(p("c5.ck")));
  EXPECT_EQ(read_checkpoint(p("s5.ck")).meta["train_config"]["seed"], 5u);
}

TEST_F(Cli, OracleEvaluationIsExact) {
  const auto r = call({"eval", "--oracle", "--dataset", p("d.bin"), "--report", p("o.json"), "--split", "train"});
  ASSERT_EQ(r.code, kOk) << r.err;
  const auto j = json::parse(slurp(p("o.json")));
  EXPECT_EQ(j["mpjpe"].get<double>(), 0.0);
  EXPECT_NEAR(j["pa_mpjpe"].get<double>(), 0.0, 1e-12);
  // Alignment can leave rounding residue, so only the t = 0 point may miss.
  const auto& f = j["pck"]["fractions"];
  for (std::size_t i = 1; i < f.size(); ++i) EXPECT_EQ(f[i].get<double>(), 1.0);
  EXPECT_GE(j["pck_auc"].get<double>(), 0.99);
  EXPECT_LE(j["pck_auc"].get<double>(), 1.0);
}

}  // namespace
}  // namespace ehpe::cli
