#include "autointerp/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "autointerp/activation_store.hpp"
#include "autointerp/error.hpp"

namespace autointerp {

std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DomainError("auroc: scores and labels differ in length");
  const auto ranks = average_ranks(scores);
  double positives = 0.0;
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 0) {
      positives += 1.0;
      rank_sum += ranks[i];
    }
  }
  const double negatives = static_cast<double>(scores.size()) - positives;
  if (positives == 0.0 || negatives == 0.0) throw DomainError("auroc needs both positive and negative labels");
  return (rank_sum - positives * (positives + 1.0) / 2.0) / (positives * negatives);
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DomainError("pearson: inputs differ in length");
  if (x.size() < 2) throw DomainError("pearson: need at least two points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw DomainError("pearson: degenerate variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DomainError("spearman: inputs differ in length");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return pearson(rx, ry);
}

Summary summarize(std::span<const double> values) {
  if (values.empty()) throw DomainError("summarize: empty input");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  return {sorted.size(), quantile_sorted(sorted, 0.5), quantile_sorted(sorted, 0.25),
          quantile_sorted(sorted, 0.75)};
}

// ---------------------------------------------------------------------------

void ScoreMatrix::set(std::uint32_t feature_id, const std::string& method, std::optional<double> value) {
  auto mit = std::find(methods_.begin(), methods_.end(), method);
  std::size_t col = static_cast<std::size_t>(mit - methods_.begin());
  if (mit == methods_.end()) {
    methods_.push_back(method);
    for (auto& row : rows_) row.emplace_back();
  }
  auto [it, inserted] = row_of_.try_emplace(feature_id, rows_.size());
  if (inserted) {
    features_.push_back(feature_id);
    rows_.emplace_back(methods_.size());
  }
  rows_[it->second][col] = value;
}

std::optional<double> ScoreMatrix::get(std::size_t row, std::size_t method) const {
  return rows_.at(row).at(method);
}

std::vector<double> ScoreMatrix::column(const std::string& method) const {
  auto mit = std::find(methods_.begin(), methods_.end(), method);
  if (mit == methods_.end()) return {};
  const auto col = static_cast<std::size_t>(mit - methods_.begin());
  std::vector<double> out;
  for (const auto& row : rows_) {
    if (row[col]) out.push_back(*row[col]);
  }
  return out;
}

CorrelationTable correlation_matrix(const ScoreMatrix& scores, std::size_t min_overlap) {
  const auto& methods = scores.methods();
  const std::size_t m = methods.size();
  if (m < 2) throw DomainError("correlation_matrix needs at least two methods");
  CorrelationTable t;
  t.methods = methods;
  t.spearman.assign(m, std::vector<std::optional<double>>(m));
  t.pearson.assign(m, std::vector<std::optional<double>>(m));
  t.overlap.assign(m, std::vector<std::size_t>(m, 0));
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t b = a; b < m; ++b) {
      std::vector<double> xs, ys;
      for (std::size_t r = 0; r < scores.features().size(); ++r) {
        const auto x = scores.get(r, a);
        const auto y = scores.get(r, b);
        if (x && y) {
          xs.push_back(*x);
          ys.push_back(*y);
        }
      }
      t.overlap[a][b] = t.overlap[b][a] = xs.size();
      if (a == b) {
        t.spearman[a][a] = 1.0;
        t.pearson[a][a] = 1.0;
        continue;
      }
      if (xs.size() < min_overlap) continue;
      try {
        t.pearson[a][b] = t.pearson[b][a] = pearson(xs, ys);
        t.spearman[a][b] = t.spearman[b][a] = spearman(xs, ys);
      } catch (const DomainError&) {
        // constant column on this overlap: leave missing
      }
    }
  }
  return t;
}

// ---------------------------------------------------------------------------

const Prices& CostModel::prices_for(const std::string& model) const {
  if (auto it = per_model.find(model); it != per_model.end()) return it->second;
  if (fallback) return *fallback;
  throw ConfigError("no prices configured for model '" + model + "'");
}

double cost_dollars(double input_tokens, double output_tokens, const Prices& prices, double n_features) {
  return n_features * (input_tokens * prices.input_per_token + output_tokens * prices.output_per_token);
}

CostEstimate cost_estimate(std::span<const MethodTokens> measured, double features_measured,
                           const CostModel& model, double n_features) {
  if (!(features_measured > 0.0)) throw DomainError("cost_estimate: no features measured");
  CostEstimate est;
  est.n_features = n_features;
  for (const auto& m : measured) {
    const auto& prices = model.prices_for(m.model);
    if (prices.input_per_token < 0.0 || prices.output_per_token < 0.0) {
      throw ConfigError("prices must be nonnegative");
    }
    CostLine line;
    line.per_feature = m;
    line.per_feature.input_tokens /= features_measured;
    line.per_feature.output_tokens /= features_measured;
    line.per_feature.cacheable_input_tokens /= features_measured;
    line.dollars = cost_dollars(line.per_feature.input_tokens, line.per_feature.output_tokens, prices, n_features);
    est.total_dollars += line.dollars;
    est.lines.push_back(std::move(line));
  }
  return est;
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::string fixed(double v, int digits) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(digits) << v;
  return ss.str();
}

std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

std::string lpad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : std::string(width - s.size(), ' ') + s;
}

}  // namespace

nlohmann::json to_json(const Summary& s) {
  return {{"n", s.n}, {"median", s.median}, {"q25", s.q25}, {"q75", s.q75}};
}

nlohmann::json to_json(const CorrelationTable& t) {
  auto grid = [](const std::vector<std::vector<std::optional<double>>>& g) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : g) {
      nlohmann::json r = nlohmann::json::array();
      for (const auto& v : row) r.push_back(optional_json(v));
      rows.push_back(std::move(r));
    }
    return rows;
  };
  return {{"methods", t.methods}, {"spearman", grid(t.spearman)}, {"pearson", grid(t.pearson)},
          {"overlap", t.overlap}};
}

nlohmann::json to_json(const CostEstimate& c) {
  nlohmann::json lines = nlohmann::json::array();
  for (const auto& l : c.lines) {
    lines.push_back({{"method", l.per_feature.method},
                     {"model", l.per_feature.model},
                     {"input_tokens_per_feature", l.per_feature.input_tokens},
                     {"output_tokens_per_feature", l.per_feature.output_tokens},
                     {"cacheable_input_tokens_per_feature", l.per_feature.cacheable_input_tokens},
                     {"dollars", l.dollars}});
  }
  return {{"n_features", c.n_features}, {"lines", lines}, {"total_dollars", c.total_dollars}};
}

std::string render_correlation_table(const CorrelationTable& t, bool spearman_table) {
  const auto& grid = spearman_table ? t.spearman : t.pearson;
  std::size_t w = 10;
  for (const auto& m : t.methods) w = std::max(w, m.size() + 2);
  std::ostringstream out;
  out << pad("", w);
  for (const auto& m : t.methods) out << lpad(m, w);
  out << '\n';
  for (std::size_t a = 0; a < t.methods.size(); ++a) {
    out << pad(t.methods[a], w);
    for (std::size_t b = 0; b < t.methods.size(); ++b) {
      out << lpad(grid[a][b] ? fixed(*grid[a][b], 2) : "-", w);
    }
    out << '\n';
  }
  return out.str();
}

std::string render_summary_table(const std::vector<std::pair<std::string, Summary>>& rows) {
  std::size_t w = 12;
  for (const auto& [name, _] : rows) w = std::max(w, name.size() + 2);
  std::ostringstream out;
  out << pad("method", w) << lpad("n", 6) << lpad("median", 10) << "   (25%-75%)\n";
  for (const auto& [name, s] : rows) {
    out << pad(name, w) << lpad(std::to_string(s.n), 6) << lpad(fixed(s.median, 2), 10) << "   ("
        << fixed(s.q25, 2) << "-" << fixed(s.q75, 2) << ")\n";
  }
  return out.str();
}

std::string render_cost_table(const CostEstimate& c) {
  std::ostringstream out;
  out << pad("method", 14) << pad("model", 24) << lpad("input", 12) << lpad("(cacheable)", 13)
      << lpad("output", 10) << lpad("$", 14) << '\n';
  for (const auto& l : c.lines) {
    out << pad(l.per_feature.method, 14) << pad(l.per_feature.model, 24)
        << lpad(fixed(l.per_feature.input_tokens, 1), 12)
        << lpad("(" + fixed(l.per_feature.cacheable_input_tokens, 1) + ")", 13)
        << lpad(fixed(l.per_feature.output_tokens, 1), 10) << lpad(fixed(l.dollars, 2), 14) << '\n';
  }
  out << "total for " << fixed(c.n_features, 0) << " features: $" << fixed(c.total_dollars, 2) << '\n';
  return out.str();
}

}  // namespace autointerp
