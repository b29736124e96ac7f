#pragma once

// Synthetic corpus with planted features. Every occurrence of a feature's
// trigger word activates that feature and nothing else does, so judges with
// access to the plant can answer exactly.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "autointerp/activation_store.hpp"
#include "autointerp/vocabulary.hpp"

namespace autointerp::mock {

struct WorldConfig {
  std::uint32_t n_features = 100;
  std::uint32_t contexts_per_feature = 90;
  std::uint32_t background_contexts = 1000;
  std::uint32_t context_len = 64;
  std::uint32_t n_filler = 1200;
  std::uint32_t triggers_per_feature = 3;
  std::uint32_t boosts_per_feature = 3;
  std::uint32_t insertions_min = 2;
  std::uint32_t insertions_max = 4;
  double cross_talk = 0.3;  // chance a context also carries another feature's trigger
  double noise = 0.15;      // relative activation jitter
  std::uint64_t seed = 1;
};

struct PlantedFeature {
  std::uint32_t id = 0;
  std::string description;         // what it responds to
  std::string output_description;  // what steering it promotes
  std::vector<std::uint32_t> triggers;
  std::vector<double> trigger_base;  // aligned with triggers
  std::vector<std::uint32_t> boosts;
  double kl_coefficient = 1.0;  // sigma(s) = c s^2
};

class PlantedWorld {
 public:
  static PlantedWorld generate(const WorldConfig& config);

  const WorldConfig& config() const noexcept { return config_; }
  const std::vector<PlantedFeature>& features() const noexcept { return features_; }
  const Vocabulary& vocab() const noexcept { return vocab_; }
  const std::vector<std::vector<std::uint32_t>>& contexts() const noexcept { return contexts_; }
  const std::vector<std::uint32_t>& filler() const noexcept { return filler_; }

  std::optional<std::uint32_t> feature_for_description(std::string_view text) const;
  std::optional<std::uint32_t> feature_for_output(std::string_view text) const;
  /// Feature triggered by a bare word, if any.
  std::optional<std::uint32_t> trigger_of(std::string_view word) const;
  std::optional<std::uint32_t> boost_of(std::string_view word) const;
  /// Planted base activation of a token for a feature (0 if not a trigger).
  double base_value(std::uint32_t feature, std::uint32_t token) const;

  /// Writes the cache (skip_bos set) and vocab.json into dir.
  CacheManifest write_cache(const std::filesystem::path& dir, CacheFormat format = CacheFormat::binary) const;

 private:
  WorldConfig config_;
  Vocabulary vocab_;
  std::vector<PlantedFeature> features_;
  std::vector<std::vector<std::uint32_t>> contexts_;
  std::vector<std::vector<float>> noise_;  // per context, per position multiplier
  std::vector<std::uint32_t> filler_;
  std::unordered_map<std::string, std::uint32_t> description_index_;
  std::unordered_map<std::string, std::uint32_t> output_index_;
  std::unordered_map<std::string, std::uint32_t> trigger_index_;
  std::unordered_map<std::string, std::uint32_t> boost_index_;
  std::unordered_map<std::uint32_t, std::pair<std::uint32_t, double>> trigger_token_;  // token -> (feature, base)
};

}  // namespace autointerp::mock
