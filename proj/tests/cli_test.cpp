#include "autointerp/cli.hpp"

#include <gtest/gtest.h>

#include <map>
#include <sstream>

#include "autointerp/error.hpp"
#include "support.hpp"

namespace autointerp::cli {
namespace {

using testing::MockEnv;
using testing::read_file;
using testing::TempDir;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "autointerp");
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<nlohmann::json> jsonl(const std::filesystem::path& p) {
  std::vector<nlohmann::json> rows;
  std::istringstream in(read_file(p));
  for (std::string line; std::getline(in, line);) rows.push_back(nlohmann::json::parse(line));
  return rows;
}

TEST(ParseFeatures, ListsAndRanges) {
  EXPECT_EQ(parse_features("all", 3), (std::vector<std::uint32_t>{0, 1, 2}));
  EXPECT_EQ(parse_features("5,0-2,1", 10), (std::vector<std::uint32_t>{0, 1, 2, 5}));
  EXPECT_THROW(parse_features("3-1", 10), ConfigError);
  EXPECT_THROW(parse_features("10", 10), ConfigError);
  EXPECT_THROW(parse_features("a", 10), ConfigError);
  EXPECT_THROW(parse_features("", 10), ConfigError);
}

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { env_ = new MockEnv(); }
  static void TearDownTestSuite() {
    delete env_;
    env_ = nullptr;
  }

  std::vector<std::string> roles() const {
    const auto url = env_->server.base_url();
    return {"--judge-url", url, "--judge-model", "oracle", "--base-url", url, "--base-model", "oracle",
            "--embedder-url", url, "--embedder-model", "oracle"};
  }
  std::string cache() const { return (env_->dir / "cache").string(); }

  static MockEnv* env_;
};

MockEnv* CliTest::env_ = nullptr;

TEST_F(CliTest, StatsReportsRareFeatures) {
  TempDir out;
  const auto r = run_cli({"stats", "--cache", cache(), "--out", out.path().string(), "--min-fires", "100000"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("12 of 12 features fire fewer than 100000 times"), std::string::npos) << r.out;
  const auto doc = nlohmann::json::parse(read_file(out / "stats.json"));
  EXPECT_TRUE(doc.contains("features"));
}

TEST_F(CliTest, ExplainThenScoreAllMethods) {
  TempDir out;
  const auto url = env_->server.base_url();
  auto r = run_cli({"explain", "--cache", cache(), "--features", "0-2", "--out", out.path().string(),
                    "--explainer-url", url, "--explainer-model", "oracle"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto interps = jsonl(out / "interpretations.jsonl");
  ASSERT_EQ(interps.size(), 3u);
  EXPECT_EQ(interps[1]["text"], env_->world->features()[1].description);

  std::vector<std::string> args{"score", "--cache", cache(), "--features", "0-2", "--out", out.path().string(),
                                "--methods", "detection,fuzzing,surprisal,embedding,simulation",
                                "--n-activating", "20", "--n-nonactivating", "20"};
  for (const auto& a : roles()) args.push_back(a);
  r = run_cli(args);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = jsonl(out / "scores.jsonl");
  ASSERT_EQ(rows.size(), 15u);
  std::map<std::uint32_t, int> per_feature;
  for (const auto& row : rows) {
    per_feature[row["feature_id"]]++;
    ASSERT_FALSE(row["score"].is_null()) << row.dump();
    EXPECT_GT(row["score"].get<double>(), 0.9) << row.dump();
  }
  for (const auto& [f, n] : per_feature) EXPECT_EQ(n, 5);
  EXPECT_TRUE(std::filesystem::exists(out / "usage_score.json"));

  // A rerun is served from the response cache and rewrites identical files.
  const auto first = read_file(out / "scores.jsonl");
  const auto before = env_->server.stats().requests;
  r = run_cli(args);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(env_->server.stats().requests, before);
  EXPECT_EQ(read_file(out / "scores.jsonl"), first);

  r = run_cli({"analyze", "--out", out.path().string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(std::filesystem::exists(out / "report.json"));
  r = run_cli({"cost", "--out", out.path().string(), "--input-price", "0.5", "--output-price", "1.5"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto cost = nlohmann::json::parse(read_file(out / "cost.json"));
  EXPECT_GT(cost["total_dollars"].get<double>(), 0.0);
}

TEST_F(CliTest, ShuffledControlDropsToChance) {
  TempDir out;
  const auto url = env_->server.base_url();
  ASSERT_EQ(run_cli({"explain", "--cache", cache(), "--out", out.path().string(), "--explainer-url", url,
                     "--explainer-model", "oracle"}).code,
            0);
  std::vector<std::string> args{"score", "--cache", cache(), "--out", out.path().string(), "--methods",
                                "detection", "--n-activating", "20", "--n-nonactivating", "20",
                                "--shuffle-interpretations"};
  for (const auto& a : roles()) args.push_back(a);
  const auto r = run_cli(args);
  ASSERT_EQ(r.code, 0) << r.err;
  for (const auto& row : jsonl(out / "scores.jsonl")) {
    EXPECT_EQ(row["control"], "shuffled");
    EXPECT_LT(row["score"].get<double>(), 0.8);
  }
}

TEST_F(CliTest, ConfigFileFillsFlagsAndCommandLineWins) {
  TempDir out;
  testing::write_file(out / "run.toml", "features = \"0-3\"\nseed = 4\n[explainer]\nmodel = \"oracle\"\nurl = \"" +
                                            env_->server.base_url() + "\"\n");
  auto r = run_cli({"explain", "--config", (out / "run.toml").string(), "--cache", cache(), "--features", "2",
                    "--out", out.path().string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = jsonl(out / "interpretations.jsonl");
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0]["feature_id"], 2);

  testing::write_file(out / "bad.toml", "colour = \"blue\"\n");
  r = run_cli({"explain", "--config", (out / "bad.toml").string(), "--cache", cache()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("unknown key 'colour'"), std::string::npos) << r.err;
}

TEST_F(CliTest, ExitCodes) {
  EXPECT_EQ(run_cli({}).code, 2);
  EXPECT_EQ(run_cli({"frobnicate"}).code, 2);
  EXPECT_EQ(run_cli({"stats"}).code, 2);  // --cache is required
  TempDir out;
  // Scoring without the judge endpoint is a configuration error.
  const auto r = run_cli({"score", "--cache", cache(), "--out", out.path().string(), "--methods", "detection"});
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(run_cli({"stats", "--cache", (out / "nowhere").string(), "--out", out.path().string()}).code, 1);
  EXPECT_EQ(run_cli({"intervene", "--cache", cache(), "--subject-url", "http://x", "--explainer-url", "http://x",
                     "--explainer-model", "m", "--base-url", "http://x", "--base-model", "m"})
                .code,
            2);  // additive mode without --target-kl
}

TEST_F(CliTest, InterveneWritesScoresAndShuffledBaseline) {
  TempDir out;
  const auto url = env_->server.base_url();
  const auto r = run_cli({"intervene", "--cache", cache(), "--features", "0-3", "--out", out.path().string(),
                          "--target-kl", "1", "--subject-url", url, "--explainer-url", url, "--explainer-model",
                          "oracle", "--base-url", url, "--base-model", "oracle", "--shuffle-interpretations"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = jsonl(out / "intervention_scores.jsonl");
  EXPECT_FALSE(rows.empty());
  for (const auto& row : jsonl(out / "calibrations.jsonl")) EXPECT_TRUE(row["success"].get<bool>()) << row.dump();
  EXPECT_NE(r.out.find("target_kl 1"), std::string::npos) << r.out;
}

}  // namespace
}  // namespace autointerp::cli
