#include "autointerp/sampling.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <random>
#include <set>

#include "autointerp/error.hpp"
#include "support.hpp"

namespace autointerp {
namespace {

using testing::TempDir;

// Feature 0 fires once in each of the first `n_firing` contexts with value
// 1 + context id; feature 1 never fires.
CacheHandle ladder_cache(const TempDir& tmp, std::uint32_t n_firing, std::uint32_t n_contexts, std::uint32_t len) {
  CacheWriter w(tmp.path(), testing::small_manifest(len, 2));
  for (std::uint32_t c = 0; c < n_contexts; ++c) {
    std::vector<std::uint32_t> t(len);
    for (std::uint32_t p = 0; p < len; ++p) t[p] = c * 1000 + p;
    w.add_context(t);
    if (c < n_firing) w.add_record({0, c, (c * 7) % (len - 1) + 1, 1.0f + float(c)});
  }
  w.finish();
  return open_cache(tmp.path());
}

TEST(Sampling, QuantileTakesEqualCountsPerDecile) {
  TempDir tmp;
  const auto cache = ladder_cache(tmp, 200, 260, 48);
  SamplerConfig cfg;
  cfg.n_examples = 100;
  cfg.window = 32;
  const auto r = sample_activating(cache, 0, cfg);
  ASSERT_EQ(r.examples.size(), 100u);
  EXPECT_EQ(r.available, 200u);
  EXPECT_EQ(r.shortfall, 0u);
  std::map<int, int> per_decile;
  for (const auto& ex : r.examples) per_decile[*ex.decile]++;
  ASSERT_EQ(per_decile.size(), 10u);
  for (const auto& [d, n] : per_decile) EXPECT_EQ(n, 10) << "decile " << d;
  // Ladder values make deciles a function of the context id.
  for (const auto& ex : r.examples) EXPECT_EQ(*ex.decile, int(ex.context_id / 20) + 1);
}

TEST(Sampling, ExamplesAreFixedWidthWindowsWithAlignedActivations) {
  TempDir tmp;
  const auto cache = ladder_cache(tmp, 60, 80, 64);
  SamplerConfig cfg;
  cfg.n_examples = 40;
  cfg.window = 32;
  const auto r = sample_activating(cache, 0, cfg);
  ASSERT_EQ(r.examples.size(), 40u);
  std::set<std::uint64_t> seen;
  for (const auto& ex : r.examples) {
    ASSERT_EQ(ex.tokens.size(), 32u);
    ASSERT_EQ(ex.activations.size(), 32u);
    EXPECT_TRUE(ex.is_activating);
    EXPECT_TRUE(seen.insert(ex.context_id).second) << "drawn twice";
    const auto ctx = cache.context_tokens(ex.context_id);
    EXPECT_TRUE(std::equal(ex.tokens.begin(), ex.tokens.end(), ctx.begin() + ex.start));
    EXPECT_FLOAT_EQ(ex.max_activation, 1.0f + float(ex.context_id));
    EXPECT_EQ(std::count_if(ex.activations.begin(), ex.activations.end(), [](float a) { return a > 0; }), 1);
  }
}

TEST(Sampling, ShortfallIsReportedWithoutReplacement) {
  TempDir tmp;
  const auto cache = ladder_cache(tmp, 3, 10, 16);
  for (auto strategy : {SamplerStrategy::top, SamplerStrategy::random, SamplerStrategy::quantile}) {
    SamplerConfig cfg;
    cfg.strategy = strategy;
    cfg.n_examples = 10;
    cfg.window = 8;
    const auto r = sample_activating(cache, 0, cfg);
    EXPECT_EQ(r.examples.size(), 3u);
    EXPECT_EQ(r.shortfall, 7u);
    EXPECT_EQ(r.available, 3u);
  }
  SamplerConfig cfg;
  EXPECT_THROW(sample_activating(cache, 1, cfg), DomainError);
}

TEST(Sampling, TopStrategyTakesStrongestWindows) {
  TempDir tmp;
  const auto cache = ladder_cache(tmp, 30, 30, 16);
  SamplerConfig cfg;
  cfg.strategy = SamplerStrategy::top;
  cfg.n_examples = 5;
  cfg.window = 8;
  const auto r = sample_activating(cache, 0, cfg);
  std::vector<std::uint64_t> ids;
  for (const auto& ex : r.examples) ids.push_back(ex.context_id);
  EXPECT_EQ(ids, (std::vector<std::uint64_t>{29, 28, 27, 26, 25}));
}

TEST(Sampling, GreedyWindowsCoverEveryActivation) {
  TempDir tmp;
  CacheWriter w(tmp.path(), testing::small_manifest(40, 1));
  w.add_context(std::vector<std::uint32_t>(40, 3));
  for (std::uint32_t p : {2u, 5u, 20u, 38u}) w.add_record({0, 0, p, float(p)});
  w.finish();
  const auto cache = open_cache(tmp.path());
  const auto windows = activating_windows(cache, 0, 10);
  // Peak 38 -> [30,40); 20 -> [15,25); 5 -> [0,10) also covers 2.
  ASSERT_EQ(windows.size(), 3u);
  EXPECT_EQ(windows[0].start, 0u);
  EXPECT_EQ(windows[1].start, 15u);
  EXPECT_EQ(windows[2].start, 30u);
  EXPECT_FLOAT_EQ(windows[0].max_activation, 5.0f);
}

TEST(Sampling, NonActivatingComesFromSilentContexts) {
  TempDir tmp;
  const auto cache = ladder_cache(tmp, 50, 120, 32);
  const auto ex = sample_nonactivating(cache, 0, 40, 16, 9);
  ASSERT_EQ(ex.size(), 40u);
  std::set<std::uint64_t> ids;
  for (const auto& e : ex) {
    EXPECT_GE(e.context_id, 50u);
    EXPECT_FALSE(e.is_activating);
    EXPECT_EQ(e.tokens.size(), 16u);
    EXPECT_TRUE(std::all_of(e.activations.begin(), e.activations.end(), [](float a) { return a == 0.0f; }));
    ids.insert(e.context_id);
  }
  EXPECT_EQ(ids.size(), 40u);
  EXPECT_EQ(sample_nonactivating(cache, 0, 70, 16, 9).size(), 70u);
  EXPECT_THROW(sample_nonactivating(cache, 0, 71, 16, 9), DomainError);
}

TEST(Sampling, SameSeedSameSample) {
  TempDir tmp;
  const auto cache = ladder_cache(tmp, 200, 260, 48);
  for (auto strategy : {SamplerStrategy::random, SamplerStrategy::quantile}) {
    SamplerConfig cfg;
    cfg.strategy = strategy;
    cfg.seed = 42;
    const auto a = sample_activating(cache, 0, cfg);
    const auto b = sample_activating(cache, 0, cfg);
    cfg.seed = 43;
    const auto c = sample_activating(cache, 0, cfg);
    auto ids = [](const SampleResult& r) {
      std::vector<std::uint64_t> out;
      for (const auto& e : r.examples) out.push_back(e.context_id);
      return out;
    };
    EXPECT_EQ(ids(a), ids(b));
    EXPECT_NE(ids(a), ids(c));
  }
  EXPECT_EQ(sample_nonactivating(cache, 0, 20, 8, 1)[3].context_id, sample_nonactivating(cache, 0, 20, 8, 1)[3].context_id);
}

TEST(DisplayQuantize, RoundsToTenLevels) {
  EXPECT_EQ(display_quantize(4.65, 9.3), 5);
  EXPECT_EQ(display_quantize(9.3, 9.3), 10);
  EXPECT_EQ(display_quantize(0.0, 9.3), 0);
  EXPECT_EQ(display_quantize(0.001, 9.3), 1);
  EXPECT_EQ(display_quantize(12.0, 9.3), 10);
  int last = 0;
  for (int i = 0; i <= 1000; ++i) {
    const int level = display_quantize(i * 0.0093, 9.3);
    EXPECT_GE(level, last);
    last = level;
  }
  EXPECT_THROW(display_quantize(1.0, 0.0), DomainError);
  EXPECT_THROW(display_quantize(-1.0, 1.0), DomainError);
}

TEST(AssignDeciles, MatchesRankCountingOracle) {
  std::mt19937_64 gen(17);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + gen() % 50;
    std::vector<RankedWindow> w(n);
    for (auto& x : w) x = {double(gen() % 6), gen() % 4, std::uint32_t(gen() % 3)};
    const auto labels = assign_deciles(w);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t rank = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const auto a = std::tie(w[j].max_activation, w[j].context_id, w[j].start);
        const auto b = std::tie(w[i].max_activation, w[i].context_id, w[i].start);
        rank += a < b;
      }
      // Fully tied windows share the same rank in the oracle; skip those.
      bool unique = true;
      for (std::size_t j = 0; j < n; ++j) {
        unique &= j == i || w[j].max_activation != w[i].max_activation || w[j].context_id != w[i].context_id ||
                  w[j].start != w[i].start;
      }
      if (unique) {
        EXPECT_EQ(labels[i], int(rank * 10 / n) + 1);
      }
    }
  }
}

TEST(Sampling, ParseStrategy) {
  EXPECT_EQ(parse_sampler_strategy("top"), SamplerStrategy::top);
  EXPECT_EQ(parse_sampler_strategy(to_string(SamplerStrategy::quantile)), SamplerStrategy::quantile);
  EXPECT_THROW(parse_sampler_strategy("best"), ConfigError);
}

}  // namespace
}  // namespace autointerp
