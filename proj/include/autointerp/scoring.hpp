#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "autointerp/activation_store.hpp"
#include "autointerp/gateway.hpp"
#include "autointerp/sampling.hpp"
#include "autointerp/vocabulary.hpp"
#include "json.hpp"

namespace autointerp {

struct EvalConfig {
  std::size_t n_activating = 100;
  std::size_t n_nonactivating = 100;
  std::uint32_t window = 32;
  std::uint32_t deciles = 10;
  std::uint64_t seed = 0;
};

struct EvalSet {
  std::uint32_t feature_id = 0;
  std::vector<FeatureExample> activating;     // decile-stratified
  std::vector<FeatureExample> nonactivating;  // from contexts where the feature never fires
  double feature_max = 0.0;
  std::size_t shortfall = 0;
  std::uint64_t seed = 0;
};

EvalSet build_eval_set(const CacheHandle& cache, std::uint32_t feature_id, const EvalConfig& config);

/// Judgement of one item. Classifier methods fill `verdict`; continuous
/// methods fill `value`.
struct Verdict {
  int label = 0;  // 1 = activating / correctly marked
  std::optional<int> verdict;
  std::optional<double> value;
  std::optional<double> probability;  // judge P(1), when logprobs were returned
};

struct MethodScore {
  std::string method;
  std::uint32_t feature_id = 0;
  std::optional<double> score;  // undefined when degenerate
  std::vector<Verdict> verdicts;
  std::size_t n_judged = 0;
  std::size_t n_unjudged = 0;
  Usage usage;
  std::string scorer_model;
  std::optional<double> probability_auroc;
  std::vector<std::string> warnings;

  /// Report line: feature_id, method, score, n_judged, usage and extras.
  nlohmann::json to_json() const;
  static MethodScore from_json(const nlohmann::json& j);
};

struct ScoringOptions {
  std::size_t batch_size = 5;
  std::uint64_t seed = 0;
  int judge_max_tokens = 64;
  std::optional<int> judge_top_logprobs = 5;
  std::size_t embed_batch = 64;
  int simulation_top_k = 15;
  bool simulation_tbt = false;
  std::size_t workers = 8;  // concurrent requests within one feature
};

inline constexpr std::string_view kDetection = "detection";
inline constexpr std::string_view kFuzzing = "fuzzing";
inline constexpr std::string_view kSurprisal = "surprisal";
inline constexpr std::string_view kEmbedding = "embedding";
inline constexpr std::string_view kSimulation = "simulation";

/// Balanced accuracy of binary verdicts; nullopt unless both classes have a
/// judged item.
std::optional<double> balanced_accuracy(std::span<const Verdict> verdicts);

/// Last bracketed list of 0/1 integers in a judge reply. Throws ParseError if
/// absent or of the wrong length.
std::vector<int> parse_verdict_list(std::string_view reply, std::size_t expected);

/// Marks `count` distinct zero-activation positions, seeded. count is capped
/// at the number of such positions.
std::vector<bool> false_marks(const FeatureExample& example, std::size_t count, std::uint64_t seed);

MethodScore detection_score(Gateway& gateway, const Endpoint& judge, const Vocabulary& vocab,
                            const std::string& interpretation, const EvalSet& eval, const ScoringOptions& options);

/// Each activating example appears twice: with its true marks (label 1) and
/// with as many randomly chosen zero-activation tokens marked (label 0).
MethodScore fuzzing_score(Gateway& gateway, const Endpoint& judge, const Vocabulary& vocab,
                          const std::string& interpretation, const EvalSet& eval, const ScoringOptions& options);

/// Prompt text before the scored example; the example starts at prefix.size().
std::string surprisal_prefix(std::string_view description);

MethodScore surprisal_score(Gateway& gateway, const Endpoint& base, const Vocabulary& vocab,
                            const std::string& interpretation, const EvalSet& eval, const ScoringOptions& options);

MethodScore embedding_score(Gateway& gateway, const Endpoint& embedder, const Vocabulary& vocab,
                            const std::string& interpretation, const EvalSet& eval, const ScoringOptions& options);

/// The all-at-once prompt plus the byte offset of each slot's "unknown".
struct SimulationPrompt {
  std::string text;
  std::vector<std::size_t> slot_offsets;
};

SimulationPrompt build_simulation_prompt(std::string_view interpretation, std::span<const std::string> pieces);

/// Expected level per token, or nullopt when a slot cannot be aligned or no
/// alternative parses as a level 0..10.
std::optional<std::vector<double>> simulate_aao(Gateway& gateway, const Endpoint& base,
                                                const std::string& interpretation,
                                                std::span<const std::string> pieces, int top_k,
                                                Usage* usage = nullptr);

/// Expected level from top alternatives: sum v p(v) over those parsing as
/// integers 0..10, renormalized. nullopt if none parse.
std::optional<double> expected_level(std::span<const TopLogprob> alternatives);

MethodScore simulation_score(Gateway& gateway, const Endpoint& base, const Vocabulary& vocab,
                             const std::string& interpretation, const EvalSet& eval, const ScoringOptions& options);

}  // namespace autointerp
