#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "autointerp/activation_store.hpp"

namespace autointerp {

enum class SamplerStrategy { top, random, quantile };

std::string to_string(SamplerStrategy s);
SamplerStrategy parse_sampler_strategy(const std::string& s);

struct SamplerConfig {
  SamplerStrategy strategy = SamplerStrategy::quantile;
  std::size_t n_examples = 40;
  std::uint32_t window = 32;
  std::uint32_t deciles = 10;
  std::uint64_t seed = 0;
};

/// A fixed-width token window with aligned activations.
struct FeatureExample {
  std::vector<std::uint32_t> tokens;
  std::vector<float> activations;
  float max_activation = 0.0f;
  std::optional<int> decile;
  bool is_activating = false;
  std::uint64_t context_id = 0;
  std::uint32_t start = 0;
};

struct SampleResult {
  std::vector<FeatureExample> examples;
  std::size_t available = 0;  // distinct activating windows that exist
  std::size_t shortfall = 0;  // requested minus returned
};

/// Every distinct activating window of a feature, in (context, start) order.
/// Within a context, windows are placed greedily: centre on the strongest
/// activation not yet covered, clamp to the context, repeat.
std::vector<FeatureExample> activating_windows(const CacheHandle& cache, std::uint32_t feature_id,
                                               std::uint32_t window);

/// Draws activating examples. Throws DomainError if the feature never fires.
/// Never samples with replacement; a short supply is reported in `shortfall`.
SampleResult sample_activating(const CacheHandle& cache, std::uint32_t feature_id,
                               const SamplerConfig& config);

/// Uniformly drawn windows from contexts in which the feature never fires
/// (position 0 included regardless of skip_bos). Throws DomainError when
/// fewer than n such contexts exist.
std::vector<FeatureExample> sample_nonactivating(const CacheHandle& cache, std::uint32_t feature_id,
                                                 std::size_t n, std::uint32_t window,
                                                 std::uint64_t seed);

/// Integer display level 0..10: round(10 a / max), nonzero a maps to >= 1.
int display_quantize(double activation, double feature_max);

struct RankedWindow {
  double max_activation = 0.0;
  std::uint64_t context_id = 0;
  std::uint32_t start = 0;
};

/// Equal-count bins 1..n_bins by rank of max_activation, ties broken by
/// (context_id, start). Label of the r-th smallest (0-based) of N windows is
/// floor(r * n_bins / N) + 1.
std::vector<int> assign_quantile_bins(std::span<const RankedWindow> windows, std::uint32_t n_bins);

inline std::vector<int> assign_deciles(std::span<const RankedWindow> windows) {
  return assign_quantile_bins(windows, 10);
}

}  // namespace autointerp
