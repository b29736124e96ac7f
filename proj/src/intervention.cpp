#include "autointerp/intervention.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

#include "autointerp/error.hpp"
#include "autointerp/parallel.hpp"
#include "autointerp/prompts.hpp"
#include "autointerp/rng.hpp"
#include "autointerp/sampling.hpp"

namespace autointerp {

using nlohmann::json;

namespace {

constexpr std::size_t kPromptWorkers = 8;

json prompt_list(const std::vector<PoolPrompt>& prompts) {
  json arr = json::array();
  for (const auto& p : prompts) {
    arr.push_back({{"context_id", p.context_id},
                   {"length", p.tokens.size()},
                   {"context_max", p.context_max},
                   {"quintile", p.quintile}});
  }
  return arr;
}

std::string_view trim(std::string_view s) {
  auto space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; };
  while (!s.empty() && space(s.front())) s.remove_prefix(1);
  while (!s.empty() && space(s.back())) s.remove_suffix(1);
  return s;
}

}  // namespace

json PromptPool::to_json() const {
  return {{"feature_id", feature_id},
          {"eligible_contexts", eligible_contexts},
          {"shrunk", shrunk},
          {"scoring", prompt_list(scoring)},
          {"explainer", prompt_list(explainer)}};
}

PromptPool build_prompt_pool(const CacheHandle& cache, std::uint32_t feature_id, const PoolConfig& config) {
  if (config.n_strata == 0 || config.n_prompts == 0) throw DomainError("prompt pool: empty configuration");
  const auto& manifest = cache.manifest();
  if (manifest.context_len < config.prompt_len) {
    throw DomainError("prompt pool: contexts of " + std::to_string(manifest.context_len) +
                      " tokens are shorter than the prompt length " + std::to_string(config.prompt_len));
  }
  const FeatureStats stats = cache.feature_stats(feature_id);
  if (stats.fire_count < config.min_fires) {
    throw DomainError("feature " + std::to_string(feature_id) + " fires " + std::to_string(stats.fire_count) +
                      " times, below the minimum of " + std::to_string(config.min_fires));
  }

  struct Candidate {
    std::uint64_t context_id;
    std::uint32_t first;
    double max;
  };
  std::vector<Candidate> candidates;
  const auto records = cache.feature_records(feature_id, /*include_bos=*/true);
  for (std::size_t i = 0; i < records.size();) {
    const std::uint32_t ctx = records[i].context_id;
    const std::uint32_t first = records[i].position;
    double max = 0.0;
    std::size_t j = i;
    for (; j < records.size() && records[j].context_id == ctx; ++j) max = std::max(max, double(records[j].value));
    if (first > 0 && first < config.prompt_len) candidates.push_back({ctx, first, max});
    i = j;
  }

  PromptPool pool;
  pool.feature_id = feature_id;
  pool.eligible_contexts = candidates.size();
  if (candidates.size() < config.min_prompts) {
    throw DomainError("feature " + std::to_string(feature_id) + " has only " + std::to_string(candidates.size()) +
                      " usable prompt contexts (need " + std::to_string(config.min_prompts) + ")");
  }

  std::vector<RankedWindow> ranked;
  ranked.reserve(candidates.size());
  for (const auto& c : candidates) ranked.push_back({c.max, c.context_id, 0});
  const auto bins = assign_quantile_bins(ranked, config.n_strata);

  const std::size_t per_stratum = config.n_prompts / config.n_strata;
  std::vector<PoolPrompt> chosen;
  for (std::uint32_t b = 1; b <= config.n_strata; ++b) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      if (bins[i] == static_cast<int>(b)) members.push_back(i);
    }
    Rng rng(mix_seed(config.seed, feature_id, b));
    rng.shuffle(std::span<std::size_t>(members));
    members.resize(std::min(members.size(), per_stratum));
    std::sort(members.begin(), members.end());
    for (std::size_t i : members) {
      const auto& c = candidates[i];
      const auto ctx = cache.context_tokens(c.context_id);
      chosen.push_back({c.context_id, {ctx.begin(), ctx.begin() + c.first + 1}, c.max, static_cast<int>(b)});
    }
  }
  if (chosen.size() < config.min_prompts) {
    throw DomainError("feature " + std::to_string(feature_id) + ": only " + std::to_string(chosen.size()) +
                      " prompts selected (need " + std::to_string(config.min_prompts) + ")");
  }

  const std::size_t target_total = per_stratum * config.n_strata;
  pool.shrunk = chosen.size() < target_total;
  std::size_t n_scoring = config.n_scoring;
  if (chosen.size() != target_total) {
    n_scoring = static_cast<std::size_t>(
        std::lround(double(chosen.size()) * double(config.n_scoring) / double(target_total)));
  }
  n_scoring = std::clamp<std::size_t>(n_scoring, 1, chosen.size() - 1);

  Rng rng(mix_seed(config.seed, feature_id, 0xC0FFEEu));
  rng.shuffle(std::span<PoolPrompt>(chosen));
  pool.scoring.assign(chosen.begin(), chosen.begin() + static_cast<std::ptrdiff_t>(n_scoring));
  pool.explainer.assign(chosen.begin() + static_cast<std::ptrdiff_t>(n_scoring), chosen.end());
  return pool;
}

double measure_strength(SubjectClient& subject, const InterventionSpec& spec, std::span<const PoolPrompt> prompts) {
  if (prompts.empty()) throw DomainError("measure_strength: no prompts");
  std::vector<double> kl(prompts.size());
  parallel_for(prompts.size(), kPromptWorkers, [&](std::size_t i) {
    GenerateRequest req;
    req.prompt = prompts[i].tokens;
    req.intervention = spec;
    req.max_new_tokens = 0;
    req.return_kl = true;
    const auto resp = subject.generate(req, std::string(kInterventionCalibrateMethod));
    if (!resp.kl) throw ParseError("subject service returned no KL", resp.to_json().dump());
    if (!std::isfinite(*resp.kl)) throw ParseError("subject service returned a non-finite KL", resp.to_json().dump());
    kl[i] = std::max(0.0, *resp.kl);
  });
  double sum = 0.0;
  for (double v : kl) sum += v;
  return sum / double(kl.size());
}

json InterventionCalibration::to_json() const {
  json steps = json::array();
  for (const auto& s : trace) steps.push_back({{"strength", s.strength}, {"sigma", s.sigma}});
  return {{"feature_id", feature_id}, {"target", target},     {"strength", strength}, {"measured", measured},
          {"iterations", iterations}, {"success", success},   {"trace", steps}};
}

InterventionCalibration calibrate_strength(std::uint32_t feature_id, double target,
                                           const std::function<double(double)>& measure,
                                           const CalibrationOptions& options) {
  if (!(target > 0.0) || !std::isfinite(target)) throw DomainError("calibration target must be positive");
  InterventionCalibration out;
  out.feature_id = feature_id;
  out.target = target;

  auto rel_error = [&](double sigma) { return std::abs(sigma - target) / target; };
  double best_error = std::numeric_limits<double>::infinity();
  auto probe = [&](double s) {
    const double sigma = measure(s);
    out.trace.push_back({s, sigma});
    if (rel_error(sigma) < best_error) {
      best_error = rel_error(sigma);
      out.strength = s;
      out.measured = sigma;
    }
    return sigma;
  };

  double lo = 0.0;
  std::optional<double> hi;
  double s = options.initial_strength;
  while (static_cast<int>(out.trace.size()) < options.max_iterations) {
    const double sigma = probe(s);
    if (rel_error(sigma) <= options.tolerance) break;
    if (sigma < target) {
      lo = s;
      if (hi) {
        s = 0.5 * (lo + *hi);
      } else {
        if (s * 2.0 > options.max_strength) break;
        s *= 2.0;
      }
    } else {
      hi = s;
      s = 0.5 * (lo + *hi);
    }
  }
  out.iterations = static_cast<int>(out.trace.size());
  out.success = best_error <= options.tolerance;
  return out;
}

std::string format_delta(double delta) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", std::abs(delta));
  std::string s(buf);
  while (!s.empty() && s.back() == '0') s.pop_back();
  if (!s.empty() && s.back() == '.') s.pop_back();
  return (delta < 0 ? "-" : "+") + s;
}

std::string render_delta_block(const std::string& prompt_text, std::span<const TokenDelta> deltas) {
  std::vector<TokenDelta> sorted(deltas.begin(), deltas.end());
  std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.delta > b.delta; });
  std::string out = "<PROMPT>" + prompt_text + "</PROMPT>\nMost increased tokens:";
  bool first = true;
  for (const auto& d : sorted) {
    const std::string shown = format_delta(d.delta);
    if (d.delta <= 0.0 || shown == "+0") continue;
    out += first ? " " : ", ";
    first = false;
    out += "'" + d.token + "' (" + shown + ")";
  }
  return out;
}

std::string parse_intervention_interpretation(std::string_view response) {
  std::string_view rest = response;
  if (const auto pos = response.rfind(prompts::kInterventionMarker); pos != std::string_view::npos) {
    rest = response.substr(pos + prompts::kInterventionMarker.size());
  }
  rest = trim(rest);
  rest = trim(rest.substr(0, rest.find('\n')));
  if (rest.empty()) throw ParseError("empty intervention interpretation", std::string(response));
  return std::string(rest);
}

ExplainOutcome explain_intervention(Gateway& gateway, const Endpoint& explainer, SubjectClient& subject,
                                    const Vocabulary& vocab, const PromptPool& pool, const InterventionSpec& spec,
                                    const InterventionOptions& options) {
  ExplainOutcome outcome;
  outcome.feature_id = pool.feature_id;
  std::vector<std::string> blocks(pool.explainer.size());
  parallel_for(pool.explainer.size(), kPromptWorkers, [&](std::size_t i) {
    GenerateRequest req;
    req.prompt = pool.explainer[i].tokens;
    req.intervention = spec;
    req.max_new_tokens = 0;
    req.top_delta_k = options.top_delta_k;
    const auto resp = subject.generate(req, std::string(kInterventionExplainMethod));
    blocks[i] = render_delta_block(vocab.detokenize(pool.explainer[i].tokens), resp.top_deltas);
  });

  std::string user(prompts::intervention_explainer_preamble());
  user += "Neuron 2\n";
  for (const auto& b : blocks) user += b + "\n\n";
  user += std::string(prompts::kInterventionMarker);

  ChatRequest request;
  request.messages = {{"user", user}};
  request.temperature = 0.0;
  request.max_tokens = 256;
  for (int attempt = 0; attempt <= options.max_parse_retries; ++attempt) {
    ++outcome.attempts;
    const auto response = gateway.chat(explainer, request, std::string(kInterventionExplainMethod));
    try {
      Interpretation interp;
      interp.feature_id = pool.feature_id;
      interp.text = parse_intervention_interpretation(response.text);
      interp.provenance.source = "intervention";
      interp.provenance.n_examples = pool.explainer.size();
      interp.provenance.window = 0;
      interp.provenance.explainer_model = explainer.model;
      outcome.status = ExplainStatus::ok;
      outcome.interpretation = std::move(interp);
      return outcome;
    } catch (const ParseError&) {
      request.messages.push_back({"assistant", response.text});
      request.messages.push_back({"user", "Reply with one line of the form interpretation: <summary>"});
    }
  }
  outcome.status = ExplainStatus::failed;
  outcome.reason = "no parseable interpretation after " + std::to_string(outcome.attempts) + " attempts";
  return outcome;
}

json InterventionScore::to_json() const {
  return {{"feature_id", feature_id},
          {"interpretation", interpretation},
          {"target_kl", target_kl},
          {"intervention", spec.to_json()},
          {"score", score ? json(*score) : json(nullptr)},
          {"n_pairs", n_pairs},
          {"n_failed", n_failed},
          {"reliable", reliable}};
}

std::string build_amplified_prompt(const std::string& passage, const std::string& interpretation,
                                   std::size_t* span_begin, std::size_t* span_end) {
  std::string out(prompts::intervention_scorer_fewshot());
  out += "<PASSAGE>\n";
  out += passage;
  out += "\n\n";
  out += prompts::kAmplifiedPhrase;
  out += " \"";
  if (span_begin) *span_begin = out.size();
  out += interpretation;
  if (span_end) *span_end = out.size();
  out += "\"";
  return out;
}

namespace {

double span_logprob(Gateway& gateway, const Endpoint& base, const std::string& passage,
                    const std::string& interpretation) {
  std::size_t b = 0, e = 0;
  const std::string prompt = build_amplified_prompt(passage, interpretation, &b, &e);
  const auto tokens = gateway.prompt_logprobs(base, prompt, 0, std::string(kInterventionScoreMethod));
  double sum = 0.0;
  bool any = false;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::size_t start = tokens[i].offset;
    const std::size_t end = i + 1 < tokens.size() ? tokens[i + 1].offset : prompt.size();
    if (start < e && end > b) {
      sum += tokens[i].logprob;
      any = true;
    }
  }
  if (!any) throw ParseError("no scored tokens cover the interpretation", prompt);
  return sum;
}

}  // namespace

InterventionScore intervention_score(Gateway& gateway, const Endpoint& base, SubjectClient& subject,
                                     const Vocabulary& vocab, const std::string& interpretation,
                                     const PromptPool& pool, const InterventionSpec& spec, double target_kl,
                                     const InterventionOptions& options) {
  InterventionScore out;
  out.feature_id = pool.feature_id;
  out.interpretation = interpretation;
  out.target_kl = target_kl;
  out.spec = spec;

  const int samples = std::max(1, options.samples_per_prompt);
  std::vector<std::optional<double>> diffs(pool.scoring.size() * samples);
  parallel_for(diffs.size(), kPromptWorkers, [&](std::size_t k) {
    const auto& prompt = pool.scoring[k / samples];
    GenerateRequest req;
    req.prompt = prompt.tokens;
    req.max_new_tokens = options.max_new_tokens;
    req.temperature = options.temperature;
    req.seed = mix_seed(options.seed, pool.feature_id, prompt.context_id, k % samples);
    try {
      const auto clean = subject.generate(req, std::string(kInterventionScoreMethod));
      req.intervention = spec;
      const auto steered = subject.generate(req, std::string(kInterventionScoreMethod));
      const std::string prefix = vocab.detokenize(prompt.tokens);
      const double lp_clean = span_logprob(gateway, base, prefix + clean.text, interpretation);
      const double lp_steered = span_logprob(gateway, base, prefix + steered.text, interpretation);
      diffs[k] = lp_steered - lp_clean;
    } catch (const ProviderError&) {
    } catch (const RetryExhaustedError&) {
    } catch (const ParseError&) {
    }
  });

  double sum = 0.0;
  for (const auto& d : diffs) {
    if (!d) {
      ++out.n_failed;
      continue;
    }
    out.differences.push_back(*d);
    sum += *d;
    ++out.n_pairs;
  }
  if (out.n_pairs > 0) out.score = sum / double(out.n_pairs);
  out.reliable = out.n_pairs >= options.min_pairs;
  return out;
}

double mean_intervention_score(std::span<const InterventionScore> scores) {
  if (scores.empty()) throw DomainError("no intervention scores to aggregate");
  const double target = scores.front().target_kl;
  for (const auto& s : scores) {
    if (s.target_kl != target) {
      throw DomainError("refusing to aggregate intervention scores calibrated to different target KL values (" +
                        std::to_string(target) + " and " + std::to_string(s.target_kl) + ")");
    }
  }
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& s : scores) {
    if (!s.score) continue;
    sum += *s.score;
    ++n;
  }
  if (n == 0) throw DomainError("no intervention score carries a value");
  return sum / double(n);
}

std::vector<std::size_t> derangement(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  Rng rng(seed);
  // Sattolo's algorithm yields a single n-cycle, so no fixed points.
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i - 1)]);
  return p;
}

std::vector<std::optional<double>> shuffled_interpretation_baseline(
    std::span<const std::pair<std::uint32_t, std::string>> features, std::uint64_t seed,
    const std::function<std::optional<double>(std::uint32_t, const std::string&)>& score) {
  if (features.size() < 2) throw DomainError("shuffled baseline needs at least 2 features");
  const auto perm = derangement(features.size(), seed);
  std::vector<std::optional<double>> out(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) out[i] = score(features[i].first, features[perm[i]].second);
  return out;
}

}  // namespace autointerp
