#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "autointerp/activation_store.hpp"
#include "autointerp/explainer.hpp"
#include "autointerp/gateway.hpp"
#include "autointerp/subject_protocol.hpp"
#include "autointerp/vocabulary.hpp"
#include "json.hpp"

namespace autointerp {

struct PoolPrompt {
  std::uint64_t context_id = 0;
  std::vector<std::uint32_t> tokens;  // ends at the first activating token
  double context_max = 0.0;
  int quintile = 0;  // 1..n_strata
};

struct PoolConfig {
  std::size_t n_prompts = 40;
  std::size_t n_scoring = 30;
  std::uint32_t prompt_len = 64;
  std::uint32_t n_strata = 5;
  std::uint64_t min_fires = 200;
  std::size_t min_prompts = 5;
  std::uint64_t seed = 0;
};

struct PromptPool {
  std::uint32_t feature_id = 0;
  std::vector<PoolPrompt> scoring;
  std::vector<PoolPrompt> explainer;
  std::size_t eligible_contexts = 0;
  bool shrunk = false;  // fewer than n_prompts were available

  nlohmann::json to_json() const;
};

/// Prompts are the first prompt_len tokens of a context, cut just after the
/// feature's first activation there. Contexts whose first stored activation is
/// at position 0 are excluded. Contexts are ranked by their maximum activation
/// into n_strata equal-count bands and n_prompts / n_strata are drawn from
/// each, then split by a seeded shuffle into scoring and explainer sets (the
/// split shrinks proportionally when supply is short). Throws DomainError below
/// min_fires or when fewer than min_prompts contexts qualify.
PromptPool build_prompt_pool(const CacheHandle& cache, std::uint32_t feature_id, const PoolConfig& config);

/// Mean KL over the scoring prompts, as reported by the subject service.
double measure_strength(SubjectClient& subject, const InterventionSpec& spec, std::span<const PoolPrompt> prompts);

struct CalibrationStep {
  double strength = 0.0;
  double sigma = 0.0;
};

struct CalibrationOptions {
  double initial_strength = 1.0;
  double max_strength = 1048576.0;  // 2^20
  int max_iterations = 20;
  double tolerance = 0.1;  // relative
};

struct InterventionCalibration {
  std::uint32_t feature_id = 0;
  double target = 0.0;
  double strength = 0.0;  // best seen
  double measured = 0.0;  // sigma at `strength`
  int iterations = 0;
  bool success = false;
  std::vector<CalibrationStep> trace;

  nlohmann::json to_json() const;
};

/// Doubles from initial_strength until sigma >= target, then bisects. Every
/// measurement counts as one iteration. Returns the best strength seen;
/// success only when its sigma is within tolerance of the target.
InterventionCalibration calibrate_strength(std::uint32_t feature_id, double target,
                                           const std::function<double(double)>& measure,
                                           const CalibrationOptions& options = {});

/// "+0.11", "+0.1"; two decimals, trailing zeros dropped.
std::string format_delta(double delta);

/// One "<PROMPT>...</PROMPT>\nMost increased tokens: ..." block.
std::string render_delta_block(const std::string& prompt_text, std::span<const TokenDelta> deltas);

/// Text after the last "interpretation:" or, without the marker, the first
/// nonempty line. Throws ParseError when empty.
std::string parse_intervention_interpretation(std::string_view response);

struct InterventionOptions {
  int top_delta_k = 10;
  int max_new_tokens = 8;
  double temperature = 1.0;
  int samples_per_prompt = 1;
  std::size_t min_pairs = 10;
  int max_parse_retries = 3;
  std::uint64_t seed = 0;
};

inline constexpr std::string_view kInterventionExplainMethod = "intervention_explain";
inline constexpr std::string_view kInterventionScoreMethod = "intervention_score";
inline constexpr std::string_view kInterventionCalibrateMethod = "intervention_calibrate";

ExplainOutcome explain_intervention(Gateway& gateway, const Endpoint& explainer, SubjectClient& subject,
                                    const Vocabulary& vocab, const PromptPool& pool, const InterventionSpec& spec,
                                    const InterventionOptions& options);

struct InterventionScore {
  std::uint32_t feature_id = 0;
  std::string interpretation;
  double target_kl = 0.0;
  InterventionSpec spec;
  std::optional<double> score;  // S in nats
  std::size_t n_pairs = 0;
  std::size_t n_failed = 0;
  bool reliable = false;
  std::vector<double> differences;  // per pair, scoring-prompt order

  nlohmann::json to_json() const;
};

/// Builds the amplified-passage scorer prompt; `span_begin`/`span_end` receive
/// the byte range of the interpretation inside it.
std::string build_amplified_prompt(const std::string& passage, const std::string& interpretation,
                                   std::size_t* span_begin, std::size_t* span_end);

/// S = mean over prompt pairs of log p(z | intervened passage) - log p(z | clean passage).
InterventionScore intervention_score(Gateway& gateway, const Endpoint& base, SubjectClient& subject,
                                     const Vocabulary& vocab, const std::string& interpretation,
                                     const PromptPool& pool, const InterventionSpec& spec, double target_kl,
                                     const InterventionOptions& options);

/// Mean of S. Throws DomainError if the scores were calibrated to different
/// target KL values or none carries a value.
double mean_intervention_score(std::span<const InterventionScore> scores);

/// Random permutation with no fixed points (n >= 2); a single cycle.
std::vector<std::size_t> derangement(std::size_t n, std::uint64_t seed);

/// Rescores each feature with another feature's interpretation, assigned by
/// derangement(features.size(), seed). Returns scores in feature order.
std::vector<std::optional<double>> shuffled_interpretation_baseline(
    std::span<const std::pair<std::uint32_t, std::string>> features, std::uint64_t seed,
    const std::function<std::optional<double>(std::uint32_t, const std::string&)>& score);

}  // namespace autointerp
