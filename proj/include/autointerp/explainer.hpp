#pragma once

#include <cstdint>
#include <filesystem>
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

enum class PromptVariant { plain, cot, no_activations };

std::string to_string(PromptVariant v);
PromptVariant parse_prompt_variant(const std::string& s);

/// Where a marked run's leading whitespace goes relative to "<<".
enum class MarkStyle {
  whitespace_outside,  // "he was <<over the moon>>"
  whitespace_inside,   // "Patriots<< tight end>>"
};

/// Concatenates pieces, wrapping each run of consecutive marked pieces in one
/// "<<" ">>" pair. Removing the delimiters restores the plain concatenation.
std::string mark_tokens(std::span<const std::string> pieces, std::span<const bool> marked,
                        MarkStyle style = MarkStyle::whitespace_outside);

struct RenderedExample {
  std::string text;         // delimited window text
  std::string activations;  // "Activations: (...)" line
};

/// Throws DomainError if the example has no nonzero activation or
/// feature_max <= 0.
RenderedExample render_example(const FeatureExample& example, const Vocabulary& vocab, double feature_max);

/// System prompt, one few-shot exchange, then the numbered examples.
std::vector<Message> build_explainer_prompt(std::span<const RenderedExample> examples, PromptVariant variant);

/// Text after the last "[interpretation]:" marker, first line, trimmed, with
/// any "<<" ">>" removed. Throws ParseError when the marker is missing or
/// nothing is left.
std::string parse_interpretation(std::string_view response);

struct Provenance {
  std::string source = "activations";  // or "intervention"
  SamplerStrategy sampler = SamplerStrategy::quantile;
  std::size_t n_examples = 0;
  std::uint32_t window = 0;
  PromptVariant variant = PromptVariant::plain;
  std::string explainer_model;
};

struct Interpretation {
  std::uint32_t feature_id = 0;
  std::string text;
  Provenance provenance;

  nlohmann::json to_json() const;
  static Interpretation from_json(const nlohmann::json& j);
};

std::vector<Interpretation> read_interpretations(const std::filesystem::path& path);
/// One JSON object per line, sorted by feature id.
void write_interpretations(const std::filesystem::path& path, std::vector<Interpretation> items);

struct ExplainerConfig {
  SamplerConfig sampler;
  PromptVariant variant = PromptVariant::plain;
  std::uint64_t min_fires = 200;
  int max_parse_retries = 3;
  double temperature = 0.0;
  int max_tokens = 1024;
};

enum class ExplainStatus { ok, skipped, failed };

struct ExplainOutcome {
  std::uint32_t feature_id = 0;
  ExplainStatus status = ExplainStatus::failed;
  std::optional<Interpretation> interpretation;
  std::string reason;
  int attempts = 0;

  nlohmann::json to_json() const;
};

std::string to_string(ExplainStatus s);

inline constexpr std::string_view kExplainMethod = "explain";

/// sample -> render -> prompt -> chat -> parse. A parse failure appends the
/// reply plus a format reminder and asks again, up to max_parse_retries
/// times. Features under min_fires are skipped without any request.
ExplainOutcome explain_feature(const CacheHandle& cache, const Vocabulary& vocab, Gateway& gateway,
                               const Endpoint& endpoint, std::uint32_t feature_id, const ExplainerConfig& config);

}  // namespace autointerp
