#include "autointerp/analysis.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "autointerp/error.hpp"

namespace autointerp {
namespace {

double pair_auroc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      pairs += 1.0;
      wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  }
  return wins / pairs;
}

TEST(Auroc, WorkedExample) {
  const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  const std::vector<int> y{0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(auroc(s, y), 0.75);
}

TEST(Auroc, TiesCountHalf) {
  const std::vector<double> s{1, 1, 1, 1};
  const std::vector<int> y{0, 1, 0, 1};
  EXPECT_DOUBLE_EQ(auroc(s, y), 0.5);
}

TEST(Auroc, MatchesPairwiseOracle) {
  std::mt19937_64 gen(1);
  for (int t = 0; t < 300; ++t) {
    const std::size_t n = 2 + gen() % 49;
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = double(gen() % 7);
      y[i] = int(gen() % 2);
    }
    y[0] = 0;
    y[1] = 1;
    EXPECT_NEAR(auroc(s, y), pair_auroc(s, y), 1e-12);
  }
}

TEST(Auroc, InvariantUnderMonotoneMapAndFlipsUnderNegation) {
  std::mt19937_64 gen(2);
  std::normal_distribution<double> nd;
  std::vector<double> s(40), mapped(40), neg(40);
  std::vector<int> y(40);
  for (std::size_t i = 0; i < 40; ++i) {
    s[i] = nd(gen);
    y[i] = int(i % 2);
    mapped[i] = std::exp(3.0 * s[i]) + 2.0;
    neg[i] = -s[i];
  }
  const double a = auroc(s, y);
  EXPECT_NEAR(auroc(mapped, y), a, 1e-12);
  EXPECT_NEAR(auroc(neg, y), 1.0 - a, 1e-12);
}

TEST(Auroc, RequiresBothClasses) {
  const std::vector<double> s{1, 2};
  EXPECT_THROW(auroc(s, std::vector<int>{1, 1}), DomainError);
  EXPECT_THROW(auroc(s, std::vector<int>{1}), DomainError);
}

TEST(Correlation, PearsonKnownValues) {
  const std::vector<double> x{1, 2, 3, 4, 5};
  const std::vector<double> y{2, 4, 6, 8, 10};
  const std::vector<double> z{5, 4, 3, 2, 1};
  EXPECT_DOUBLE_EQ(pearson(x, y), 1.0);
  EXPECT_DOUBLE_EQ(pearson(x, z), -1.0);
  EXPECT_THROW(pearson(x, std::vector<double>(5, 1.0)), DomainError);
  EXPECT_THROW(pearson(std::vector<double>{1}, std::vector<double>{1}), DomainError);
}

TEST(Correlation, SpearmanMatchesSortRankOracle) {
  std::mt19937_64 gen(3);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 3 + gen() % 48;
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = double(gen() % 10);
      y[i] = double(gen() % 10);
    }
    x[0] = 0, x[1] = 11, y[0] = 0, y[1] = 11;
    // Oracle ranks: count strictly smaller plus half the ties (1-based).
    auto ranks = [](const std::vector<double>& v) {
      std::vector<double> r(v.size());
      for (std::size_t i = 0; i < v.size(); ++i) {
        double less = 0, equal = 0;
        for (double w : v) less += w < v[i], equal += w == v[i];
        r[i] = less + (equal + 1.0) / 2.0;
      }
      return r;
    };
    const auto rx = ranks(x), ry = ranks(y);
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < n; ++i) {
      sxy += (rx[i] - mx) * (ry[i] - my);
      sxx += (rx[i] - mx) * (rx[i] - mx);
      syy += (ry[i] - my) * (ry[i] - my);
    }
    EXPECT_NEAR(spearman(x, y), sxy / std::sqrt(sxx * syy), 1e-12);
  }
}

TEST(Correlation, AverageRanks) {
  EXPECT_EQ(average_ranks(std::vector<double>{10, 20, 20, 5}), (std::vector<double>{2, 3.5, 3.5, 1}));
}

TEST(Summary, MedianAndQuartiles) {
  const std::vector<double> v{4, 1, 3, 2, 5};
  const auto s = summarize(v);
  EXPECT_EQ(s.n, 5u);
  EXPECT_DOUBLE_EQ(s.median, 3.0);
  EXPECT_DOUBLE_EQ(s.q25, 2.0);
  EXPECT_DOUBLE_EQ(s.q75, 4.0);
  EXPECT_THROW(summarize(std::vector<double>{}), DomainError);
}

TEST(ScoreMatrix, PairwiseCompleteCorrelations) {
  ScoreMatrix m;
  for (std::uint32_t f = 0; f < 6; ++f) {
    m.set(f, "a", double(f));
    m.set(f, "b", f == 2 ? std::nullopt : std::optional<double>(double(f * f)));
    m.set(f, "c", 1.0);
  }
  EXPECT_EQ(m.methods(), (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_EQ(m.column("b").size(), 5u);
  const auto t = correlation_matrix(m);
  EXPECT_EQ(t.overlap[0][1], 5u);
  ASSERT_TRUE(t.spearman[0][1].has_value());
  EXPECT_DOUBLE_EQ(*t.spearman[0][1], 1.0);
  EXPECT_LT(*t.pearson[0][1], 1.0);
  EXPECT_FALSE(t.spearman[0][2].has_value());  // constant column
  EXPECT_DOUBLE_EQ(*t.spearman[0][0], 1.0);
  EXPECT_FALSE(render_correlation_table(t, true).empty());
}

TEST(Cost, DollarsScaleLinearly) {
  const Prices p{0.5e-6, 1.5e-6};
  EXPECT_DOUBLE_EQ(cost_dollars(1000, 100, p, 1.0), 0.5e-3 + 0.15e-3);
  EXPECT_DOUBLE_EQ(cost_dollars(1000, 100, p, 100000.0), 100000.0 * (0.5e-3 + 0.15e-3));
}

TEST(Cost, EstimateIsSumOfLines) {
  CostModel model;
  model.per_model["big"] = {0.25e-6, 0.5e-6};
  model.fallback = Prices{0.125e-6, 0.125e-6};
  const std::vector<MethodTokens> measured{{"detection", "big", 1700.0, 24.0, 1200.0},
                                           {"fuzzing", "other", 1960.0, 25.0, 0.0}};
  const auto est = cost_estimate(measured, 10.0, model, 100000.0);
  ASSERT_EQ(est.lines.size(), 2u);
  EXPECT_DOUBLE_EQ(est.lines[0].per_feature.input_tokens, 170.0);
  EXPECT_DOUBLE_EQ(est.lines[0].dollars, 100000.0 * (170.0 * 0.25e-6 + 2.4 * 0.5e-6));
  EXPECT_DOUBLE_EQ(est.total_dollars, est.lines[0].dollars + est.lines[1].dollars);
  CostModel strict;
  EXPECT_THROW(cost_estimate(measured, 10.0, strict, 1.0), ConfigError);
  EXPECT_THROW(cost_estimate(measured, 0.0, model, 1.0), DomainError);
}

}  // namespace
}  // namespace autointerp
