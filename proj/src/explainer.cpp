#include "autointerp/explainer.hpp"

#include <algorithm>
#include <fstream>
#include <memory>

#include "autointerp/error.hpp"
#include "autointerp/prompts.hpp"

namespace autointerp {

using nlohmann::json;

std::string to_string(PromptVariant v) {
  switch (v) {
    case PromptVariant::plain: return "plain";
    case PromptVariant::cot: return "cot";
    case PromptVariant::no_activations: return "no-activations";
  }
  return "plain";
}

PromptVariant parse_prompt_variant(const std::string& s) {
  if (s == "plain") return PromptVariant::plain;
  if (s == "cot") return PromptVariant::cot;
  if (s == "no-activations") return PromptVariant::no_activations;
  throw ConfigError("unknown prompt variant '" + s + "' (expected plain, cot or no-activations)");
}

std::string to_string(ExplainStatus s) {
  switch (s) {
    case ExplainStatus::ok: return "ok";
    case ExplainStatus::skipped: return "skipped";
    case ExplainStatus::failed: return "failed";
  }
  return "failed";
}

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

std::string_view strip_leading_space(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  return s;
}

std::string quote(const std::string& s) {
  return json(s).dump(-1, ' ', false, json::error_handler_t::replace);
}

}  // namespace

std::string mark_tokens(std::span<const std::string> pieces, std::span<const bool> marked, MarkStyle style) {
  if (pieces.size() != marked.size()) throw DomainError("mark_tokens: length mismatch");
  std::string out;
  for (std::size_t i = 0; i < pieces.size(); ++i) {
    const bool opens = marked[i] && (i == 0 || !marked[i - 1]);
    const bool closes = marked[i] && (i + 1 == pieces.size() || !marked[i + 1]);
    std::string_view piece = pieces[i];
    if (opens) {
      if (style == MarkStyle::whitespace_outside) {
        const auto body = strip_leading_space(piece);
        out.append(piece.substr(0, piece.size() - body.size()));
        piece = body;
      }
      out += "<<";
    }
    out.append(piece);
    if (closes) out += ">>";
  }
  return out;
}

RenderedExample render_example(const FeatureExample& example, const Vocabulary& vocab, double feature_max) {
  if (!(feature_max > 0.0)) throw DomainError("render_example: feature_max must be positive");
  const auto pieces = vocab.pieces(example.tokens);
  std::vector<char> mask(pieces.size());
  bool any = false;
  for (std::size_t i = 0; i < pieces.size(); ++i) {
    mask[i] = example.activations[i] > 0.0f;
    any = any || mask[i];
  }
  if (!any) throw DomainError("render_example: example has no activating tokens");

  // std::vector<bool> is not contiguous.
  const auto flags = std::make_unique<bool[]>(pieces.size());
  for (std::size_t i = 0; i < pieces.size(); ++i) flags[i] = mask[i] != 0;
  RenderedExample out;
  out.text = mark_tokens(pieces, std::span<const bool>(flags.get(), pieces.size()));

  out.activations = "Activations: ";
  bool first = true;
  for (std::size_t i = 0; i < pieces.size(); ++i) {
    if (!mask[i]) continue;
    const bool run_start = i == 0 || !mask[i - 1];
    const std::string shown = run_start ? std::string(strip_leading_space(pieces[i])) : pieces[i];
    if (!first) out.activations += ", ";
    first = false;
    out.activations += "(" + quote(shown) + ", " +
                       std::to_string(display_quantize(example.activations[i], feature_max)) + ")";
  }
  return out;
}

std::vector<Message> build_explainer_prompt(std::span<const RenderedExample> examples, PromptVariant variant) {
  const bool with_acts = variant != PromptVariant::no_activations;
  const bool cot = variant == PromptVariant::cot;
  std::string system(prompts::explainer_system());
  if (cot) {
    system += "\n\n";
    system += prompts::explainer_cot_addendum();
  }
  std::string body;
  for (std::size_t k = 0; k < examples.size(); ++k) {
    if (k > 0) body += "\n\n";
    body += "Example " + std::to_string(k + 1) + ": " + examples[k].text;
    if (with_acts) body += "\n\n" + examples[k].activations;
  }
  return {{"system", system},
          {"user", prompts::explainer_fewshot_user(with_acts)},
          {"assistant", prompts::explainer_fewshot_assistant(cot)},
          {"user", body}};
}

std::string parse_interpretation(std::string_view response) {
  const auto pos = response.rfind(prompts::kInterpretationMarker);
  if (pos == std::string_view::npos) {
    throw ParseError("no [interpretation]: marker in explainer response", std::string(response));
  }
  std::string_view rest = response.substr(pos + prompts::kInterpretationMarker.size());
  rest = strip_leading_space(rest);
  rest = rest.substr(0, rest.find('\n'));
  std::string text(trim(rest));
  for (const char* delim : {"<<", ">>"}) {
    for (auto p = text.find(delim); p != std::string::npos; p = text.find(delim)) text.erase(p, 2);
  }
  text = std::string(trim(text));
  if (text.empty()) throw ParseError("empty interpretation", std::string(response));
  return text;
}

json Interpretation::to_json() const {
  return {{"feature_id", feature_id},
          {"text", text},
          {"provenance",
           {{"source", provenance.source},
            {"sampler", to_string(provenance.sampler)},
            {"n_examples", provenance.n_examples},
            {"window", provenance.window},
            {"variant", to_string(provenance.variant)},
            {"explainer_model", provenance.explainer_model}}}};
}

Interpretation Interpretation::from_json(const json& j) {
  Interpretation out;
  out.feature_id = j.at("feature_id").get<std::uint32_t>();
  out.text = j.at("text").get<std::string>();
  if (auto p = j.find("provenance"); p != j.end() && p->is_object()) {
    out.provenance.source = p->value("source", "activations");
    out.provenance.sampler = parse_sampler_strategy(p->value("sampler", "quantile"));
    out.provenance.n_examples = p->value("n_examples", std::size_t{0});
    out.provenance.window = p->value("window", std::uint32_t{0});
    out.provenance.variant = parse_prompt_variant(p->value("variant", "plain"));
    out.provenance.explainer_model = p->value("explainer_model", "");
  }
  return out;
}

std::vector<Interpretation> read_interpretations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open interpretations file " + path.string());
  std::vector<Interpretation> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      out.push_back(Interpretation::from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what(), line);
    }
  }
  return out;
}

void write_interpretations(const std::filesystem::path& path, std::vector<Interpretation> items) {
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& a, const auto& b) { return a.feature_id < b.feature_id; });
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  for (const auto& it : items) out << it.to_json().dump() << '\n';
}

json ExplainOutcome::to_json() const {
  json j = {{"feature_id", feature_id}, {"status", to_string(status)}, {"attempts", attempts}};
  if (!reason.empty()) j["reason"] = reason;
  if (interpretation) j["text"] = interpretation->text;
  return j;
}

ExplainOutcome explain_feature(const CacheHandle& cache, const Vocabulary& vocab, Gateway& gateway,
                               const Endpoint& endpoint, std::uint32_t feature_id, const ExplainerConfig& config) {
  ExplainOutcome outcome;
  outcome.feature_id = feature_id;
  const FeatureStats stats = cache.feature_stats(feature_id);
  if (stats.fire_count < config.min_fires) {
    outcome.status = ExplainStatus::skipped;
    outcome.reason = "fires " + std::to_string(stats.fire_count) + " times, below the minimum of " +
                     std::to_string(config.min_fires);
    return outcome;
  }

  const SampleResult sample = sample_activating(cache, feature_id, config.sampler);
  std::vector<RenderedExample> rendered;
  rendered.reserve(sample.examples.size());
  for (const auto& ex : sample.examples) rendered.push_back(render_example(ex, vocab, stats.max_activation));

  ChatRequest request;
  request.messages = build_explainer_prompt(rendered, config.variant);
  request.temperature = config.temperature;
  request.max_tokens = config.max_tokens;

  for (int attempt = 0; attempt <= config.max_parse_retries; ++attempt) {
    ++outcome.attempts;
    const ChatResponse response = gateway.chat(endpoint, request, std::string(kExplainMethod));
    try {
      Interpretation interp;
      interp.feature_id = feature_id;
      interp.text = parse_interpretation(response.text);
      interp.provenance = {.source = "activations",
                           .sampler = config.sampler.strategy,
                           .n_examples = sample.examples.size(),
                           .window = config.sampler.window,
                           .variant = config.variant,
                           .explainer_model = endpoint.model};
      outcome.status = ExplainStatus::ok;
      outcome.interpretation = std::move(interp);
      if (sample.shortfall > 0) {
        outcome.reason = "sampled " + std::to_string(sample.examples.size()) + " of " +
                         std::to_string(config.sampler.n_examples) + " requested examples";
      }
      return outcome;
    } catch (const ParseError&) {
      request.messages.push_back({"assistant", response.text});
      request.messages.push_back(
          {"user", "Your response did not end with the formatted interpretation. Reply again and make the last "
                   "line start with [interpretation]:"});
    }
  }
  outcome.status = ExplainStatus::failed;
  outcome.reason = "no parseable interpretation after " + std::to_string(outcome.attempts) + " attempts";
  return outcome;
}

}  // namespace autointerp
