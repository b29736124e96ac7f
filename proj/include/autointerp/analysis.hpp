#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace autointerp {

/// Area under the ROC curve via the Mann-Whitney statistic; tied scores
/// count 1/2. labels are 0/1. Throws DomainError without both classes.
double auroc(std::span<const double> scores, std::span<const int> labels);

/// Ranks starting at 1, ties replaced by their average rank.
std::vector<double> average_ranks(std::span<const double> values);

/// Throws DomainError on length mismatch, n < 2 or zero variance.
double pearson(std::span<const double> x, std::span<const double> y);
double spearman(std::span<const double> x, std::span<const double> y);

struct Summary {
  std::size_t n = 0;
  double median = 0.0;
  double q25 = 0.0;
  double q75 = 0.0;
};

/// Median and quartiles, linear interpolation (inclusive).
Summary summarize(std::span<const double> values);

/// Features x methods with missing entries.
class ScoreMatrix {
 public:
  void set(std::uint32_t feature_id, const std::string& method, std::optional<double> value);

  const std::vector<std::uint32_t>& features() const noexcept { return features_; }
  const std::vector<std::string>& methods() const noexcept { return methods_; }
  std::optional<double> get(std::size_t row, std::size_t method) const;
  /// Non-missing values of one method column.
  std::vector<double> column(const std::string& method) const;

 private:
  std::vector<std::uint32_t> features_;
  std::map<std::uint32_t, std::size_t> row_of_;
  std::vector<std::string> methods_;
  std::vector<std::vector<std::optional<double>>> rows_;
};

struct CorrelationTable {
  std::vector<std::string> methods;
  std::vector<std::vector<std::optional<double>>> spearman;
  std::vector<std::vector<std::optional<double>>> pearson;
  std::vector<std::vector<std::size_t>> overlap;
};

/// Pairwise-complete correlations. Pairs with fewer than min_overlap common
/// rows, or with a constant column on the overlap, are left missing.
CorrelationTable correlation_matrix(const ScoreMatrix& scores, std::size_t min_overlap = 3);

struct Prices {
  double input_per_token = 0.0;
  double output_per_token = 0.0;
};

/// Token usage of one method (per feature, or summed; see cost_estimate).
struct MethodTokens {
  std::string method;
  std::string model;
  double input_tokens = 0.0;
  double output_tokens = 0.0;
  double cacheable_input_tokens = 0.0;
};

struct CostModel {
  std::map<std::string, Prices> per_model;
  std::optional<Prices> fallback;

  const Prices& prices_for(const std::string& model) const;
};

struct CostLine {
  MethodTokens per_feature;
  double dollars = 0.0;
};

struct CostEstimate {
  double n_features = 0.0;
  std::vector<CostLine> lines;
  double total_dollars = 0.0;
};

/// dollars = n_features * (input * input_price + output * output_price)
double cost_dollars(double input_tokens, double output_tokens, const Prices& prices, double n_features);

/// Scales per-feature token counts to n_features. `measured` holds totals
/// over `features_measured` features.
CostEstimate cost_estimate(std::span<const MethodTokens> measured, double features_measured,
                           const CostModel& model, double n_features);

nlohmann::json to_json(const Summary& s);
nlohmann::json to_json(const CorrelationTable& t);
nlohmann::json to_json(const CostEstimate& c);

/// Aligned plain-text layout of a method x method table.
std::string render_correlation_table(const CorrelationTable& t, bool spearman_table);
std::string render_summary_table(const std::vector<std::pair<std::string, Summary>>& rows);
std::string render_cost_table(const CostEstimate& c);

}  // namespace autointerp
