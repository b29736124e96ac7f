#include "autointerp/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "autointerp/error.hpp"
#include "autointerp/rng.hpp"

namespace autointerp {

std::string to_string(SamplerStrategy s) {
  switch (s) {
    case SamplerStrategy::top: return "top";
    case SamplerStrategy::random: return "random";
    case SamplerStrategy::quantile: return "quantile";
  }
  return "unknown";
}

SamplerStrategy parse_sampler_strategy(const std::string& s) {
  if (s == "top") return SamplerStrategy::top;
  if (s == "random") return SamplerStrategy::random;
  if (s == "quantile") return SamplerStrategy::quantile;
  throw ConfigError("unknown sampler '" + s + "' (expected top, random or quantile)");
}

int display_quantize(double activation, double feature_max) {
  if (!(feature_max > 0.0)) throw DomainError("feature_max must be positive");
  if (activation < 0.0) throw DomainError("activations must be nonnegative");
  if (activation == 0.0) return 0;
  const auto level = static_cast<int>(std::lround(10.0 * activation / feature_max));
  return std::clamp(level, 1, 10);
}

std::vector<int> assign_quantile_bins(std::span<const RankedWindow> windows, std::uint32_t n_bins) {
  if (n_bins == 0) throw DomainError("need at least one bin");
  std::vector<std::size_t> order(windows.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = windows[a];
    const auto& y = windows[b];
    if (x.max_activation != y.max_activation) return x.max_activation < y.max_activation;
    if (x.context_id != y.context_id) return x.context_id < y.context_id;
    return x.start < y.start;
  });
  std::vector<int> labels(windows.size());
  const std::size_t n = windows.size();
  for (std::size_t rank = 0; rank < n; ++rank) {
    labels[order[rank]] = static_cast<int>(rank * n_bins / n) + 1;
  }
  return labels;
}

std::vector<FeatureExample> activating_windows(const CacheHandle& cache, std::uint32_t feature_id,
                                               std::uint32_t window) {
  const auto len = cache.manifest().context_len;
  if (window == 0 || window > len) {
    throw DomainError("window " + std::to_string(window) + " does not fit context length " +
                      std::to_string(len));
  }
  const auto records = cache.feature_records(feature_id);
  std::vector<FeatureExample> out;
  std::vector<float> dense(len);
  std::vector<bool> covered(len);
  for (std::size_t i = 0; i < records.size();) {
    const auto context = records[i].context_id;
    std::fill(dense.begin(), dense.end(), 0.0f);
    std::fill(covered.begin(), covered.end(), false);
    std::vector<std::uint32_t> positions;
    for (; i < records.size() && records[i].context_id == context; ++i) {
      dense[records[i].position] = records[i].value;
      positions.push_back(records[i].position);
    }
    const auto tokens = cache.context_tokens(context);
    std::vector<std::uint32_t> starts;
    for (;;) {
      std::optional<std::uint32_t> peak;
      for (auto p : positions) {
        if (!covered[p] && (!peak || dense[p] > dense[*peak])) peak = p;
      }
      if (!peak) break;
      const auto start = static_cast<std::uint32_t>(
          std::clamp<std::int64_t>(static_cast<std::int64_t>(*peak) - window / 2, 0, len - window));
      for (std::uint32_t t = start; t < start + window; ++t) covered[t] = true;
      starts.push_back(start);
    }
    std::sort(starts.begin(), starts.end());
    for (auto start : starts) {
      FeatureExample ex;
      ex.tokens.assign(tokens.begin() + start, tokens.begin() + start + window);
      ex.activations.assign(dense.begin() + start, dense.begin() + start + window);
      ex.max_activation = *std::max_element(ex.activations.begin(), ex.activations.end());
      ex.is_activating = true;
      ex.context_id = context;
      ex.start = start;
      out.push_back(std::move(ex));
    }
  }
  return out;
}

SampleResult sample_activating(const CacheHandle& cache, std::uint32_t feature_id,
                               const SamplerConfig& config) {
  if (config.n_examples == 0) throw DomainError("n_examples must be positive");
  auto windows = activating_windows(cache, feature_id, config.window);
  if (windows.empty()) {
    throw DomainError("feature " + std::to_string(feature_id) + " never fires");
  }
  const std::uint32_t n_bins = std::max<std::uint32_t>(config.deciles, 1);
  {
    std::vector<RankedWindow> ranked;
    ranked.reserve(windows.size());
    for (const auto& w : windows) ranked.push_back({w.max_activation, w.context_id, w.start});
    const auto labels = assign_quantile_bins(ranked, n_bins);
    for (std::size_t i = 0; i < windows.size(); ++i) windows[i].decile = labels[i];
  }

  SampleResult result;
  result.available = windows.size();
  const std::size_t n = std::min(config.n_examples, windows.size());
  result.shortfall = config.n_examples - n;
  Rng rng(mix_seed(config.seed, feature_id, static_cast<std::uint64_t>(config.strategy)));
  std::vector<std::size_t> chosen;

  switch (config.strategy) {
    case SamplerStrategy::top: {
      std::vector<std::size_t> order(windows.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return windows[a].max_activation > windows[b].max_activation;
      });
      chosen.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
      break;
    }
    case SamplerStrategy::random: {
      std::vector<std::size_t> order(windows.size());
      std::iota(order.begin(), order.end(), 0);
      rng.shuffle(std::span(order));
      chosen.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
      break;
    }
    case SamplerStrategy::quantile: {
      std::vector<std::vector<std::size_t>> bins(n_bins);
      for (std::size_t i = 0; i < windows.size(); ++i) bins[*windows[i].decile - 1].push_back(i);
      // Even split, remainder to the highest bins; shortages are refilled from
      // bins with spare supply, highest first.
      std::vector<std::size_t> take(n_bins);
      std::size_t taken = 0;
      for (std::uint32_t d = 0; d < n_bins; ++d) {
        const std::size_t target = n / n_bins + (d >= n_bins - n % n_bins ? 1 : 0);
        take[d] = std::min(target, bins[d].size());
        taken += take[d];
      }
      while (taken < n) {
        bool progressed = false;
        for (std::uint32_t d = n_bins; d-- > 0 && taken < n;) {
          if (take[d] < bins[d].size()) {
            ++take[d];
            ++taken;
            progressed = true;
          }
        }
        if (!progressed) break;
      }
      for (std::uint32_t d = 0; d < n_bins; ++d) {
        Rng bin_rng(mix_seed(config.seed, feature_id, d, 0x5eedULL));
        bin_rng.shuffle(std::span(bins[d]));
        chosen.insert(chosen.end(), bins[d].begin(), bins[d].begin() + static_cast<std::ptrdiff_t>(take[d]));
      }
      rng.shuffle(std::span(chosen));
      break;
    }
  }
  result.examples.reserve(chosen.size());
  for (auto i : chosen) result.examples.push_back(std::move(windows[i]));
  return result;
}

std::vector<FeatureExample> sample_nonactivating(const CacheHandle& cache, std::uint32_t feature_id,
                                                 std::size_t n, std::uint32_t window,
                                                 std::uint64_t seed) {
  const auto& m = cache.manifest();
  if (window == 0 || window > m.context_len) {
    throw DomainError("window " + std::to_string(window) + " does not fit context length " +
                      std::to_string(m.context_len));
  }
  std::unordered_set<std::uint64_t> firing;
  for (const auto& r : cache.feature_records(feature_id, /*include_bos=*/true)) firing.insert(r.context_id);
  const std::uint64_t candidates = m.n_contexts - firing.size();
  if (candidates < n) {
    throw DomainError("insufficient non-activating contexts for feature " + std::to_string(feature_id) +
                      ": need " + std::to_string(n) + ", have " + std::to_string(candidates));
  }
  Rng rng(mix_seed(seed, feature_id, 0x0ffULL));
  std::vector<std::uint64_t> contexts;
  contexts.reserve(n);
  if (candidates >= 2 * n) {
    std::unordered_set<std::uint64_t> seen;
    while (contexts.size() < n) {
      const auto c = rng.below(m.n_contexts);
      if (firing.contains(c) || !seen.insert(c).second) continue;
      contexts.push_back(c);
    }
  } else {
    std::vector<std::uint64_t> pool;
    pool.reserve(candidates);
    for (std::uint64_t c = 0; c < m.n_contexts; ++c) {
      if (!firing.contains(c)) pool.push_back(c);
    }
    for (std::size_t i = 0; i < n; ++i) {
      std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
      contexts.push_back(pool[i]);
    }
  }
  std::vector<FeatureExample> out;
  out.reserve(n);
  for (auto c : contexts) {
    const auto start = static_cast<std::uint32_t>(rng.below(m.context_len - window + 1));
    const auto tokens = cache.context_tokens(c);
    FeatureExample ex;
    ex.tokens.assign(tokens.begin() + start, tokens.begin() + start + window);
    ex.activations.assign(window, 0.0f);
    ex.context_id = c;
    ex.start = start;
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace autointerp
