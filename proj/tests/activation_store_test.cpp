#include "autointerp/activation_store.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <random>

#include "autointerp/error.hpp"
#include "support.hpp"

namespace autointerp {
namespace {

using testing::TempDir;

struct Fixture {
  std::vector<std::vector<std::uint32_t>> contexts;
  std::vector<SparseActivationRecord> records;
};

// Random sparse cache content, records in arbitrary order.
Fixture random_fixture(std::uint32_t n_contexts, std::uint32_t len, std::uint32_t n_features, double density,
                       std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_int_distribution<std::uint32_t> tok(0, 499);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Fixture fx;
  for (std::uint32_t c = 0; c < n_contexts; ++c) {
    std::vector<std::uint32_t> t(len);
    for (auto& x : t) x = tok(gen);
    fx.contexts.push_back(t);
    for (std::uint32_t p = 0; p < len; ++p) {
      for (std::uint32_t f = 0; f < n_features; ++f) {
        if (u(gen) < density) fx.records.push_back({f, c, p, static_cast<float>(0.01 + 10.0 * u(gen))});
      }
    }
  }
  std::shuffle(fx.records.begin(), fx.records.end(), gen);
  return fx;
}

CacheManifest write(const std::filesystem::path& dir, const Fixture& fx, std::uint32_t len, std::uint32_t n_features,
                    CacheWriterOptions options = {}, bool skip_bos = false) {
  auto m = testing::small_manifest(len, n_features);
  m.skip_bos = skip_bos;
  CacheWriter w(dir, m, options);
  for (const auto& c : fx.contexts) w.add_context(c);
  for (const auto& r : fx.records) w.add_record(r);
  return w.finish();
}

// Independent linear-scan answer: filter and sort the raw records.
std::vector<SparseActivationRecord> scan(const Fixture& fx, std::uint32_t feature) {
  std::vector<SparseActivationRecord> out;
  for (const auto& r : fx.records) {
    if (r.feature_id == feature) out.push_back(r);
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.key_compare(b) < 0; });
  return out;
}

TEST(ActivationStore, RoundTripMatchesLinearScan) {
  TempDir tmp;
  const auto fx = random_fixture(60, 16, 9, 0.05, 11);
  write(tmp.path(), fx, 16, 9, {.contexts_per_shard = 7, .features_per_shard = 4});
  const auto cache = open_cache(tmp.path());
  EXPECT_EQ(cache.manifest().n_contexts, 60u);
  EXPECT_EQ(cache.manifest().token_shards.size(), 9u);
  EXPECT_EQ(cache.manifest().activation_shards.size(), 3u);
  EXPECT_EQ(cache.total_records(), fx.records.size());
  for (std::uint32_t c = 0; c < 60; ++c) {
    const auto t = cache.context_tokens(c);
    EXPECT_TRUE(std::equal(t.begin(), t.end(), fx.contexts[c].begin(), fx.contexts[c].end()));
  }
  std::uint64_t total = 0;
  for (std::uint32_t f = 0; f < 9; ++f) {
    EXPECT_EQ(cache.feature_records(f), scan(fx, f)) << "feature " << f;
    total += cache.feature_stats(f).fire_count;
  }
  EXPECT_EQ(total, fx.records.size());
  EXPECT_TRUE(validate_cache(tmp.path()).ok());
}

TEST(ActivationStore, JsonlFormatReadsTheSameRecords) {
  TempDir bin, text;
  const auto fx = random_fixture(20, 8, 5, 0.1, 5);
  write(bin.path(), fx, 8, 5);
  write(text.path(), fx, 8, 5, {.format = CacheFormat::jsonl, .contexts_per_shard = 6, .features_per_shard = 2});
  const auto a = open_cache(bin.path());
  const auto b = open_cache(text.path());
  EXPECT_EQ(b.manifest().format, CacheFormat::jsonl);
  for (std::uint32_t f = 0; f < 5; ++f) EXPECT_EQ(a.feature_records(f), b.feature_records(f));
  for (std::uint32_t c = 0; c < 20; ++c) {
    const auto x = a.context_tokens(c), y = b.context_tokens(c);
    EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin(), y.end()));
  }
  EXPECT_TRUE(validate_cache(text.path()).ok());
}

TEST(ActivationStore, SkipBosHidesPositionZero) {
  TempDir tmp;
  Fixture fx;
  fx.contexts = {{1, 2, 3, 4}, {5, 6, 7, 8}};
  fx.records = {{0, 0, 0, 3.0f}, {0, 0, 2, 1.0f}, {0, 1, 0, 9.0f}};
  write(tmp.path(), fx, 4, 1, {}, /*skip_bos=*/true);
  const auto cache = open_cache(tmp.path());
  ASSERT_EQ(cache.feature_records(0).size(), 1u);
  EXPECT_EQ(cache.feature_records(0)[0].position, 2u);
  EXPECT_EQ(cache.feature_records(0, /*include_bos=*/true).size(), 3u);
  EXPECT_EQ(cache.feature_stats(0).fire_count, 1u);
  EXPECT_FLOAT_EQ(cache.feature_stats(0).max_activation, 1.0f);
}

TEST(ActivationStore, MissingShardIsReported) {
  TempDir tmp;
  write(tmp.path(), random_fixture(10, 8, 3, 0.1, 2), 8, 3);
  std::filesystem::remove(tmp / "activations_0.bin");
  try {
    open_cache(tmp.path());
    FAIL() << "expected CacheError";
  } catch (const CacheError& e) {
    EXPECT_EQ(std::string(e.what()).rfind("missing shard:", 0), 0u) << e.what();
  }
  const auto report = validate_cache(tmp.path());
  EXPECT_EQ(report.count(ViolationKind::missing_shard), 1u);
}

TEST(ActivationStore, MagicMismatchIsFormatMismatch) {
  TempDir tmp;
  write(tmp.path(), random_fixture(10, 8, 3, 0.1, 2), 8, 3);
  auto bytes = testing::read_file(tmp / "tokens_0.bin");
  bytes[0] = 'X';
  testing::write_file(tmp / "tokens_0.bin", bytes);
  try {
    open_cache(tmp.path());
    FAIL() << "expected CacheError";
  } catch (const CacheError& e) {
    EXPECT_EQ(std::string(e.what()).rfind("format mismatch:", 0), 0u) << e.what();
  }
  EXPECT_GE(validate_cache(tmp.path()).count(ViolationKind::format_mismatch), 1u);
}

TEST(ActivationStore, TruncatedShardIsReported) {
  TempDir tmp;
  write(tmp.path(), random_fixture(10, 8, 3, 0.2, 2), 8, 3);
  auto bytes = testing::read_file(tmp / "activations_0.bin");
  bytes.resize(bytes.size() - 5);
  testing::write_file(tmp / "activations_0.bin", bytes);
  try {
    open_cache(tmp.path());
    FAIL() << "expected CacheError";
  } catch (const CacheError& e) {
    EXPECT_EQ(std::string(e.what()).rfind("truncated shard:", 0), 0u) << e.what();
  }
  EXPECT_GE(validate_cache(tmp.path()).count(ViolationKind::truncated_shard), 1u);
}

TEST(ActivationStore, CorruptAndMissingManifest) {
  TempDir tmp;
  EXPECT_THROW(open_cache(tmp.path()), CacheError);
  testing::write_file(tmp / "manifest.json", "{not json");
  EXPECT_THROW(open_cache(tmp.path()), CacheError);
  EXPECT_GE(validate_cache(tmp.path()).count(ViolationKind::manifest), 1u);
}

// Binary record i of an activation shard starts after the 16-byte header.
void patch_record(std::string& bytes, std::size_t i, const SparseActivationRecord& r) {
  char* p = bytes.data() + 16 + 16 * i;
  std::memcpy(p, &r.feature_id, 4);
  std::memcpy(p + 4, &r.context_id, 4);
  std::memcpy(p + 8, &r.position, 4);
  std::memcpy(p + 12, &r.value, 4);
}

TEST(ActivationStore, ValidateFindsDuplicateAndZeroRecords) {
  TempDir tmp;
  Fixture fx;
  fx.contexts = {{1, 2, 3, 4}, {5, 6, 7, 8}};
  fx.records = {{0, 0, 1, 1.0f}, {0, 0, 2, 2.0f}, {0, 1, 3, 3.0f}, {1, 1, 1, 4.0f}};
  write(tmp.path(), fx, 4, 2);
  auto bytes = testing::read_file(tmp / "activations_0.bin");
  patch_record(bytes, 1, {0, 0, 1, 2.0f});  // same key as record 0
  patch_record(bytes, 2, {0, 1, 3, 0.0f});
  testing::write_file(tmp / "activations_0.bin", bytes);

  const auto report = validate_cache(tmp.path());
  EXPECT_EQ(report.records_checked, 4u);
  EXPECT_EQ(report.count(ViolationKind::duplicate), 1u);
  EXPECT_EQ(report.count(ViolationKind::zero_value), 1u);
  EXPECT_EQ(report.violations.size(), 2u);
  for (const auto& v : report.violations) ASSERT_TRUE(v.record.has_value());
}

TEST(ActivationStore, ValidateFindsOutOfOrderAndRangeErrors) {
  TempDir tmp;
  Fixture fx;
  fx.contexts = {{1, 2, 3, 4}, {5, 6, 7, 8}};
  fx.records = {{0, 0, 1, 1.0f}, {0, 1, 2, 2.0f}, {0, 1, 3, 3.0f}};
  write(tmp.path(), fx, 4, 1);
  auto bytes = testing::read_file(tmp / "activations_0.bin");
  patch_record(bytes, 1, {0, 0, 0, 2.0f});  // sorts before record 0
  patch_record(bytes, 2, {0, 1, 9, 3.0f});  // position past context_len
  testing::write_file(tmp / "activations_0.bin", bytes);
  const auto report = validate_cache(tmp.path());
  EXPECT_EQ(report.count(ViolationKind::out_of_order), 1u);
  EXPECT_EQ(report.count(ViolationKind::position_out_of_range), 1u);
}

TEST(ActivationStore, WriterRejectsBadRecords) {
  TempDir tmp;
  CacheWriter w(tmp.path(), testing::small_manifest(4, 2));
  EXPECT_THROW(w.add_context(std::vector<std::uint32_t>{1, 2, 3}), DomainError);
  w.add_context(std::vector<std::uint32_t>{1, 2, 3, 4});
  EXPECT_THROW(w.add_record({0, 0, 0, 0.0f}), DomainError);
  EXPECT_THROW(w.add_record({2, 0, 0, 1.0f}), DomainError);
  EXPECT_THROW(w.add_record({0, 0, 4, 1.0f}), DomainError);
  w.add_record({0, 0, 1, 1.0f});
  w.add_record({0, 0, 1, 2.0f});
  EXPECT_THROW(w.finish(), DomainError);
}

FeatureStats stats_of(const std::vector<float>& values) {
  TempDir tmp;
  const auto len = static_cast<std::uint32_t>(values.size() + 1);
  CacheWriter w(tmp.path(), testing::small_manifest(len, 1));
  w.add_context(std::vector<std::uint32_t>(len, 7));
  for (std::uint32_t i = 0; i < values.size(); ++i) w.add_record({0, 0, i + 1, values[i]});
  w.finish();
  return open_cache(tmp.path()).feature_stats(0);
}

TEST(FeatureStats, SingleActivation) {
  const auto s = stats_of({9.3f});
  EXPECT_EQ(s.fire_count, 1u);
  EXPECT_EQ(s.distinct_contexts, 1u);
  EXPECT_FLOAT_EQ(s.max_activation, 9.3f);
  for (double q : s.quantiles) EXPECT_DOUBLE_EQ(q, double(9.3f));
}

TEST(FeatureStats, UniformDecilesNearCutPoints) {
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<float> u(0.0001f, 1.0f);
  std::vector<float> values(1000);
  for (auto& v : values) v = u(gen);
  const auto s = stats_of(values);
  EXPECT_EQ(s.fire_count, 1000u);
  for (int k = 1; k < 10; ++k) EXPECT_NEAR(s.quantiles[k], k / 10.0, 0.02) << "decile " << k;

  // Independent interpolation at h = q (n - 1).
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  for (int k = 0; k <= 10; ++k) {
    const double h = k / 10.0 * 999.0;
    const auto lo = static_cast<std::size_t>(h);
    const double want = lo + 1 < sorted.size() ? sorted[lo] + (h - lo) * (sorted[lo + 1] - sorted[lo]) : sorted[lo];
    EXPECT_NEAR(s.quantiles[k], want, 1e-12);
  }
}

TEST(FeatureStats, FireCountAndSilentFeature) {
  std::vector<float> values(150, 2.5f);
  const auto s = stats_of(values);
  EXPECT_EQ(s.fire_count, 150u);

  TempDir tmp;
  CacheWriter w(tmp.path(), testing::small_manifest(4, 3));
  w.add_context(std::vector<std::uint32_t>{1, 2, 3, 4});
  w.add_record({1, 0, 2, 1.0f});
  w.finish();
  const auto silent = open_cache(tmp.path()).feature_stats(2);
  EXPECT_EQ(silent.fire_count, 0u);
  for (double q : silent.quantiles) EXPECT_EQ(q, 0.0);
}

TEST(FeatureStats, QuantileSortedInterpolates) {
  const std::vector<double> v{1.0, 2.0, 4.0, 8.0};
  EXPECT_DOUBLE_EQ(quantile_sorted(v, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(quantile_sorted(v, 0.5), 3.0);
  EXPECT_DOUBLE_EQ(quantile_sorted(v, 1.0), 8.0);
  EXPECT_THROW(quantile_sorted(std::vector<double>{}, 0.5), DomainError);
}

TEST(ActivationStore, ManifestJsonRoundTrip) {
  auto m = testing::small_manifest(32, 10);
  m.layer = 7;
  m.skip_bos = true;
  m.activation_convention = "post-relu";
  m.token_shards = {{"tokens_0.bin", 0, 5}};
  const auto back = CacheManifest::from_json(m.to_json());
  EXPECT_EQ(back.to_json(), m.to_json());
}

}  // namespace
}  // namespace autointerp
