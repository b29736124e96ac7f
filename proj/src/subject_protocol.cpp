#include "autointerp/subject_protocol.hpp"

#include <cmath>

#include "autointerp/error.hpp"

namespace autointerp {

using nlohmann::json;

std::string to_string(InterventionMode m) {
  return m == InterventionMode::additive ? "additive" : "zero_clamp";
}

InterventionMode parse_intervention_mode(const std::string& s) {
  if (s == "additive") return InterventionMode::additive;
  if (s == "zero_clamp") return InterventionMode::zero_clamp;
  throw ConfigError("unknown intervention mode '" + s + "' (expected additive or zero_clamp)");
}

json InterventionSpec::to_json() const {
  json j = {{"feature", feature_id}, {"mode", to_string(mode)}};
  j["strength"] = mode == InterventionMode::additive ? strength : 0.0;
  return j;
}

InterventionSpec InterventionSpec::from_json(const json& j) {
  InterventionSpec s;
  s.feature_id = j.at("feature").get<std::uint32_t>();
  s.mode = parse_intervention_mode(j.value("mode", "additive"));
  s.strength = j.value("strength", 0.0);
  if (!std::isfinite(s.strength)) throw DomainError("intervention strength must be finite");
  return s;
}

json GenerateRequest::to_json() const {
  return {{"prompt", prompt},
          {"intervention", intervention ? intervention->to_json() : json(nullptr)},
          {"max_new_tokens", max_new_tokens},
          {"temperature", temperature},
          {"top_delta_k", top_delta_k},
          {"return_kl", return_kl},
          {"seed", seed}};
}

GenerateRequest GenerateRequest::from_json(const json& j) {
  GenerateRequest r;
  r.prompt = j.at("prompt").get<std::vector<std::uint32_t>>();
  if (auto it = j.find("intervention"); it != j.end() && !it->is_null()) {
    r.intervention = InterventionSpec::from_json(*it);
  }
  r.max_new_tokens = j.value("max_new_tokens", 0);
  r.temperature = j.value("temperature", 1.0);
  r.top_delta_k = j.value("top_delta_k", 0);
  r.return_kl = j.value("return_kl", false);
  r.seed = j.value("seed", std::uint64_t{0});
  return r;
}

json GenerateResponse::to_json() const {
  json deltas = json::array();
  for (const auto& d : top_deltas) deltas.push_back({{"token_id", d.token_id}, {"token", d.token}, {"delta", d.delta}});
  return {{"tokens", tokens}, {"text", text}, {"top_deltas", deltas}, {"kl", kl ? json(*kl) : json(nullptr)}};
}

GenerateResponse GenerateResponse::from_json(const json& j) {
  GenerateResponse r;
  try {
    r.tokens = j.value("tokens", std::vector<std::uint32_t>{});
    r.text = j.value("text", "");
    if (auto it = j.find("top_deltas"); it != j.end() && it->is_array()) {
      for (const auto& d : *it) {
        r.top_deltas.push_back({d.at("token_id").get<std::uint32_t>(), d.at("token").get<std::string>(),
                                d.at("delta").get<double>()});
      }
    }
    if (auto it = j.find("kl"); it != j.end() && !it->is_null()) r.kl = it->get<double>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed generate response: ") + e.what(), j.dump());
  }
  for (std::size_t i = 1; i < r.top_deltas.size(); ++i) {
    if (r.top_deltas[i].delta > r.top_deltas[i - 1].delta) {
      throw ParseError("generate response deltas are not sorted descending", j.dump());
    }
  }
  return r;
}

GenerateResponse SubjectClient::generate(const GenerateRequest& request, const std::string& method) {
  return GenerateResponse::from_json(gateway_.post_json(endpoint_, "/generate", request.to_json(), method));
}

json SubjectClient::harvest(const json& job) { return gateway_.post_json(endpoint_, "/harvest", job, "harvest"); }

json SubjectClient::baseline(const json& request) {
  return gateway_.post_json(endpoint_, "/baseline", request, "baseline");
}

}  // namespace autointerp
