#pragma once

// Wire types for the subject service, which runs the real model + SAE:
//   POST /generate  GenerateRequest -> GenerateResponse
//   POST /harvest   {corpus, model_id, sae_id, hook_point, context_len,
//                    token_budget, seed, out}                -> {cache, manifest}
//   POST /baseline  {k, n_features, seed}                   -> {sae_id}

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "autointerp/gateway.hpp"
#include "json.hpp"

namespace autointerp {

enum class InterventionMode { additive, zero_clamp };

std::string to_string(InterventionMode m);
InterventionMode parse_intervention_mode(const std::string& s);

/// Applied at every position from the final prompt token onward.
struct InterventionSpec {
  std::uint32_t feature_id = 0;
  InterventionMode mode = InterventionMode::additive;
  double strength = 0.0;  // ignored by zero_clamp

  nlohmann::json to_json() const;
  static InterventionSpec from_json(const nlohmann::json& j);
};

struct GenerateRequest {
  std::vector<std::uint32_t> prompt;
  std::optional<InterventionSpec> intervention;
  int max_new_tokens = 0;
  double temperature = 1.0;
  int top_delta_k = 0;
  bool return_kl = false;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static GenerateRequest from_json(const nlohmann::json& j);
};

struct TokenDelta {
  std::uint32_t token_id = 0;
  std::string token;
  double delta = 0.0;  // next-token probability, intervened minus clean
};

struct GenerateResponse {
  std::vector<std::uint32_t> tokens;  // new tokens only
  std::string text;                   // detokenized new tokens
  std::vector<TokenDelta> top_deltas;  // descending by delta
  std::optional<double> kl;            // KL(clean || intervened) at the final prompt position

  nlohmann::json to_json() const;
  /// Throws ParseError on a malformed body or unsorted deltas.
  static GenerateResponse from_json(const nlohmann::json& j);
};

class SubjectClient {
 public:
  SubjectClient(Gateway& gateway, Endpoint endpoint) : gateway_(gateway), endpoint_(std::move(endpoint)) {}

  GenerateResponse generate(const GenerateRequest& request, const std::string& method);
  nlohmann::json harvest(const nlohmann::json& job);
  nlohmann::json baseline(const nlohmann::json& request);

  const Endpoint& endpoint() const noexcept { return endpoint_; }

 private:
  Gateway& gateway_;
  Endpoint endpoint_;
};

}  // namespace autointerp
