#include "autointerp/scoring.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <memory>
#include <mutex>

#include "autointerp/analysis.hpp"
#include "autointerp/error.hpp"
#include "autointerp/explainer.hpp"
#include "autointerp/parallel.hpp"
#include "autointerp/prompts.hpp"
#include "autointerp/rng.hpp"

namespace autointerp {

using nlohmann::json;

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

/// Per-call accumulation shared by concurrent requests of one score.
struct Accumulator {
  std::mutex mutex;
  Usage usage;
  std::vector<std::string> warnings;

  void add(const Usage& u) {
    std::lock_guard lock(mutex);
    usage += u;
  }
  void warn(std::string w) {
    std::lock_guard lock(mutex);
    warnings.push_back(std::move(w));
  }
};

std::optional<double> try_auroc(const std::vector<double>& values, const std::vector<int>& labels) {
  bool pos = false, neg = false;
  for (int l : labels) (l ? pos : neg) = true;
  if (!pos || !neg) return std::nullopt;
  return auroc(values, labels);
}

std::uint64_t method_seed(const ScoringOptions& o, std::uint32_t feature, std::string_view method) {
  return mix_seed(o.seed, feature, fnv1a64(method));
}

// --- classifier judges (detection, fuzzing) ---------------------------------

struct JudgeItem {
  std::string text;
  int label = 0;
};

struct JudgePrompts {
  std::string_view system;
  std::string_view fewshot_user;
  std::string_view fewshot_assistant;
};

/// P(verdict = 1) for each list digit, read from chat logprobs. nullopt when
/// the reply tokens cannot be aligned with the list.
std::optional<std::vector<double>> list_probabilities(const ChatResponse& r, std::size_t expected) {
  if (!r.logprobs) return std::nullopt;
  const auto open = r.text.rfind('[');
  const auto close = r.text.find(']', open == std::string::npos ? 0 : open);
  if (open == std::string::npos || close == std::string::npos) return std::nullopt;
  std::vector<double> out;
  std::size_t pos = 0;
  std::string rebuilt;
  for (const auto& t : *r.logprobs) {
    const std::size_t start = pos;
    pos += t.token.size();
    rebuilt += t.token;
    if (start <= open || start >= close) continue;
    const auto body = trim(t.token);
    if (body != "0" && body != "1") continue;
    std::optional<double> lp0, lp1;
    for (const auto& alt : t.top) {
      const auto a = trim(alt.token);
      if (a == "0" && !lp0) lp0 = alt.logprob;
      if (a == "1" && !lp1) lp1 = alt.logprob;
    }
    double p1;
    if (lp0 && lp1) {
      const double e0 = std::exp(*lp0), e1 = std::exp(*lp1);
      p1 = e1 / (e0 + e1);
    } else if (t.logprob) {
      const double p = std::clamp(std::exp(*t.logprob), 0.0, 1.0);
      p1 = body == "1" ? p : 1.0 - p;
    } else {
      return std::nullopt;
    }
    out.push_back(p1);
  }
  if (rebuilt != r.text || out.size() != expected) return std::nullopt;
  return out;
}

std::string judge_user_message(const std::string& interpretation, std::span<const JudgeItem* const> batch) {
  std::string msg = "feature interpretation: " + interpretation + "\n\nText examples:";
  for (std::size_t k = 0; k < batch.size(); ++k) {
    msg += "\n\nExample " + std::to_string(k) + ":" + batch[k]->text;
  }
  return msg;
}

MethodScore run_judge(std::string_view method, const JudgePrompts& prompts_, Gateway& gateway, const Endpoint& judge,
                      const std::string& interpretation, std::uint32_t feature_id, std::vector<JudgeItem> items,
                      const ScoringOptions& options, Accumulator& acc) {
  MethodScore out;
  out.method = std::string(method);
  out.feature_id = feature_id;
  out.scorer_model = judge.model;

  std::vector<std::size_t> order(items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(method_seed(options, feature_id, method));
  rng.shuffle(std::span<std::size_t>(order));

  const std::size_t bs = std::max<std::size_t>(1, options.batch_size);
  const std::size_t n_batches = (order.size() + bs - 1) / bs;
  out.verdicts.resize(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) out.verdicts[i].label = items[i].label;

  parallel_for(n_batches, options.workers, [&](std::size_t b) {
    const std::size_t lo = b * bs, hi = std::min(order.size(), lo + bs);
    std::vector<const JudgeItem*> batch;
    for (std::size_t k = lo; k < hi; ++k) batch.push_back(&items[order[k]]);

    ChatRequest req;
    req.messages = {{"system", std::string(prompts_.system)},
                    {"user", std::string(prompts_.fewshot_user)},
                    {"assistant", std::string(prompts_.fewshot_assistant)},
                    {"user", judge_user_message(interpretation, batch)}};
    req.temperature = 0.0;
    req.max_tokens = options.judge_max_tokens;
    req.top_logprobs = options.judge_top_logprobs;

    for (int attempt = 0; attempt < 2; ++attempt) {
      ChatResponse resp;
      try {
        resp = gateway.chat(judge, req, out.method);
      } catch (const ParseError& e) {
        acc.warn("batch " + std::to_string(b) + ": " + e.what());
        continue;
      } catch (const RetryExhaustedError& e) {
        acc.warn("batch " + std::to_string(b) + ": " + e.what());
        return;
      }
      acc.add(resp.usage);
      try {
        const auto verdicts = parse_verdict_list(resp.text, batch.size());
        const auto probs = list_probabilities(resp, batch.size());
        for (std::size_t k = 0; k < batch.size(); ++k) {
          auto& v = out.verdicts[order[lo + k]];
          v.verdict = verdicts[k];
          if (probs) v.probability = (*probs)[k];
        }
        return;
      } catch (const ParseError&) {
        req.messages.push_back({"assistant", resp.text});
        req.messages.push_back({"user", "Return only a Python list of " + std::to_string(batch.size()) +
                                            " integers, each 0 or 1."});
      }
    }
    acc.warn("batch " + std::to_string(b) + ": unparseable judge reply; " + std::to_string(batch.size()) +
             " examples left unjudged");
  });

  for (const auto& v : out.verdicts) (v.verdict ? out.n_judged : out.n_unjudged) += 1;
  out.score = balanced_accuracy(out.verdicts);
  std::vector<double> probs;
  std::vector<int> labels;
  for (const auto& v : out.verdicts) {
    if (!v.probability) continue;
    probs.push_back(*v.probability);
    labels.push_back(v.label);
  }
  if (probs.size() == out.n_judged) out.probability_auroc = try_auroc(probs, labels);
  return out;
}

void finish(MethodScore& score, Accumulator& acc) {
  score.usage = acc.usage;
  score.warnings = std::move(acc.warnings);
  std::sort(score.warnings.begin(), score.warnings.end());
}

std::string escape_slot_token(std::string_view piece) {
  std::string out;
  for (char c : piece) {
    switch (c) {
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

EvalSet build_eval_set(const CacheHandle& cache, std::uint32_t feature_id, const EvalConfig& config) {
  EvalSet out;
  out.feature_id = feature_id;
  out.seed = config.seed;
  out.feature_max = cache.feature_stats(feature_id).max_activation;
  SamplerConfig sc;
  sc.strategy = SamplerStrategy::quantile;
  sc.n_examples = config.n_activating;
  sc.window = config.window;
  sc.deciles = config.deciles;
  sc.seed = mix_seed(config.seed, feature_id, 1);
  auto sample = sample_activating(cache, feature_id, sc);
  out.activating = std::move(sample.examples);
  out.shortfall = sample.shortfall;
  out.nonactivating =
      sample_nonactivating(cache, feature_id, config.n_nonactivating, config.window, mix_seed(config.seed, feature_id, 2));
  return out;
}

json MethodScore::to_json() const {
  json verdict_rows = json::array();
  for (const auto& v : verdicts) {
    json row = {{"label", v.label}};
    if (v.verdict) row["verdict"] = *v.verdict;
    if (v.value) row["value"] = *v.value;
    if (v.probability) row["p"] = *v.probability;
    verdict_rows.push_back(std::move(row));
  }
  json j = {{"feature_id", feature_id},
            {"method", method},
            {"score", score ? json(*score) : json(nullptr)},
            {"n_judged", n_judged},
            {"n_unjudged", n_unjudged},
            {"usage", usage.to_json()},
            {"scorer_model", scorer_model},
            {"verdicts", verdict_rows}};
  if (probability_auroc) j["probability_auroc"] = *probability_auroc;
  if (!warnings.empty()) j["warnings"] = warnings;
  return j;
}

MethodScore MethodScore::from_json(const json& j) {
  MethodScore s;
  s.feature_id = j.at("feature_id").get<std::uint32_t>();
  s.method = j.at("method").get<std::string>();
  if (const auto& v = j.at("score"); !v.is_null()) s.score = v.get<double>();
  s.n_judged = j.value("n_judged", std::size_t{0});
  s.n_unjudged = j.value("n_unjudged", std::size_t{0});
  if (auto u = j.find("usage"); u != j.end()) s.usage = Usage::from_json(*u);
  s.scorer_model = j.value("scorer_model", "");
  if (auto p = j.find("probability_auroc"); p != j.end() && !p->is_null()) s.probability_auroc = p->get<double>();
  if (auto w = j.find("warnings"); w != j.end()) s.warnings = w->get<std::vector<std::string>>();
  if (auto vs = j.find("verdicts"); vs != j.end()) {
    for (const auto& row : *vs) {
      Verdict v;
      v.label = row.value("label", 0);
      if (auto it = row.find("verdict"); it != row.end()) v.verdict = it->get<int>();
      if (auto it = row.find("value"); it != row.end()) v.value = it->get<double>();
      if (auto it = row.find("p"); it != row.end()) v.probability = it->get<double>();
      s.verdicts.push_back(v);
    }
  }
  return s;
}

std::optional<double> balanced_accuracy(std::span<const Verdict> verdicts) {
  std::size_t pos = 0, neg = 0, tp = 0, tn = 0;
  for (const auto& v : verdicts) {
    if (!v.verdict) continue;
    if (v.label) {
      ++pos;
      tp += *v.verdict == 1;
    } else {
      ++neg;
      tn += *v.verdict == 0;
    }
  }
  if (pos == 0 || neg == 0) return std::nullopt;
  return 0.5 * (double(tp) / double(pos) + double(tn) / double(neg));
}

std::vector<int> parse_verdict_list(std::string_view reply, std::size_t expected) {
  const auto open = reply.rfind('[');
  if (open == std::string_view::npos) throw ParseError("no list in judge reply", std::string(reply));
  const auto close = reply.find(']', open);
  if (close == std::string_view::npos) throw ParseError("unterminated list in judge reply", std::string(reply));
  std::vector<int> out;
  std::string_view body = reply.substr(open + 1, close - open - 1);
  while (!body.empty()) {
    const auto comma = body.find(',');
    const auto item = trim(body.substr(0, comma));
    if (item != "0" && item != "1") throw ParseError("judge list entry is not 0 or 1", std::string(reply));
    out.push_back(item == "1");
    if (comma == std::string_view::npos) break;
    body.remove_prefix(comma + 1);
  }
  if (out.size() != expected) {
    throw ParseError("judge list has " + std::to_string(out.size()) + " entries, expected " + std::to_string(expected),
                     std::string(reply));
  }
  return out;
}

std::vector<bool> false_marks(const FeatureExample& example, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> zeros;
  for (std::size_t i = 0; i < example.activations.size(); ++i) {
    if (example.activations[i] == 0.0f) zeros.push_back(i);
  }
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(zeros));
  std::vector<bool> marks(example.activations.size(), false);
  for (std::size_t k = 0; k < std::min(count, zeros.size()); ++k) marks[zeros[k]] = true;
  return marks;
}

MethodScore detection_score(Gateway& gateway, const Endpoint& judge, const Vocabulary& vocab,
                            const std::string& interpretation, const EvalSet& eval, const ScoringOptions& options) {
  std::vector<JudgeItem> items;
  for (const auto& e : eval.activating) items.push_back({vocab.detokenize(e.tokens), 1});
  for (const auto& e : eval.nonactivating) items.push_back({vocab.detokenize(e.tokens), 0});
  if (items.empty()) throw DomainError("detection: empty evaluation set");
  Accumulator acc;
  auto score = run_judge(kDetection,
                         {prompts::detection_system(), prompts::detection_fewshot_user(),
                          prompts::detection_fewshot_assistant()},
                         gateway, judge, interpretation, eval.feature_id, std::move(items), options, acc);
  finish(score, acc);
  return score;
}

MethodScore fuzzing_score(Gateway& gateway, const Endpoint& judge, const Vocabulary& vocab,
                          const std::string& interpretation, const EvalSet& eval, const ScoringOptions& options) {
  if (eval.activating.empty()) throw DomainError("fuzzing: no activating examples");
  Accumulator acc;
  std::vector<JudgeItem> items;
  for (std::size_t i = 0; i < eval.activating.size(); ++i) {
    const auto& e = eval.activating[i];
    const auto pieces = vocab.pieces(e.tokens);
    const auto n = pieces.size();
    auto truth = std::make_unique<bool[]>(n);
    std::size_t n_active = 0;
    for (std::size_t k = 0; k < n; ++k) {
      truth[k] = e.activations[k] > 0.0f;
      n_active += truth[k];
    }
    items.push_back({mark_tokens(pieces, {truth.get(), n}, MarkStyle::whitespace_inside), 1});
    const auto wrong = false_marks(e, n_active, mix_seed(method_seed(options, eval.feature_id, kFuzzing), i));
    auto wrong_flags = std::make_unique<bool[]>(n);
    std::size_t n_wrong = 0;
    for (std::size_t k = 0; k < n; ++k) n_wrong += (wrong_flags[k] = wrong[k]);
    if (n_wrong == 0) {
      acc.warn("example " + std::to_string(i) + ": no zero-activation tokens to mislabel");
      continue;
    }
    items.push_back({mark_tokens(pieces, {wrong_flags.get(), n}, MarkStyle::whitespace_inside), 0});
  }
  auto score = run_judge(kFuzzing,
                         {prompts::fuzzing_system(), prompts::fuzzing_fewshot_user(),
                          prompts::fuzzing_fewshot_assistant()},
                         gateway, judge, interpretation, eval.feature_id, std::move(items), options, acc);
  finish(score, acc);
  return score;
}

std::string surprisal_prefix(std::string_view description) {
  std::string out(prompts::surprisal_fewshot());
  out += "Description: \n\n";
  out += description;
  out += "\n\nSentences: \n\n``";
  return out;
}

MethodScore surprisal_score(Gateway& gateway, const Endpoint& base, const Vocabulary& vocab,
                            const std::string& interpretation, const EvalSet& eval, const ScoringOptions& options) {
  MethodScore out;
  out.method = std::string(kSurprisal);
  out.feature_id = eval.feature_id;
  out.scorer_model = base.model;
  std::vector<const FeatureExample*> examples;
  for (const auto& e : eval.activating) examples.push_back(&e);
  for (const auto& e : eval.nonactivating) examples.push_back(&e);
  out.verdicts.resize(examples.size());
  Accumulator acc;

  auto example_logprob = [&](const std::string& description, const std::string& text) {
    const std::string prefix = surprisal_prefix(description);
    const std::string prompt = prefix + text;
    Usage u;
    const auto tokens = gateway.prompt_logprobs(base, prompt, 0, out.method, &u);
    acc.add(u);
    double sum = 0.0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const std::size_t end = i + 1 < tokens.size() ? tokens[i + 1].offset : prompt.size();
      if (end > prefix.size()) sum += tokens[i].logprob;
    }
    return sum;
  };

  const std::string pseudo(prompts::kPseudoInterpretation);
  parallel_for(examples.size(), options.workers, [&](std::size_t i) {
    out.verdicts[i].label = examples[i]->is_activating ? 1 : 0;
    const std::string text = vocab.detokenize(examples[i]->tokens);
    try {
      out.verdicts[i].value = example_logprob(interpretation, text) - example_logprob(pseudo, text);
    } catch (const ParseError& e) {
      acc.warn("example " + std::to_string(i) + ": " + e.what());
    } catch (const RetryExhaustedError& e) {
      acc.warn("example " + std::to_string(i) + ": " + e.what());
    }
  });

  std::vector<double> values;
  std::vector<int> labels;
  for (const auto& v : out.verdicts) {
    if (!v.value) continue;
    values.push_back(*v.value);
    labels.push_back(v.label);
  }
  out.n_judged = values.size();
  out.n_unjudged = out.verdicts.size() - values.size();
  out.score = try_auroc(values, labels);
  finish(out, acc);
  return out;
}

MethodScore embedding_score(Gateway& gateway, const Endpoint& embedder, const Vocabulary& vocab,
                            const std::string& interpretation, const EvalSet& eval, const ScoringOptions& options) {
  MethodScore out;
  out.method = std::string(kEmbedding);
  out.feature_id = eval.feature_id;
  out.scorer_model = embedder.model;
  Accumulator acc;

  std::vector<std::string> docs;
  for (const auto& e : eval.activating) {
    docs.push_back(vocab.detokenize(e.tokens));
    out.verdicts.emplace_back().label = 1;
  }
  for (const auto& e : eval.nonactivating) {
    docs.push_back(vocab.detokenize(e.tokens));
    out.verdicts.emplace_back().label = 0;
  }
  if (docs.empty()) throw DomainError("embedding: empty evaluation set");

  const std::vector<std::string> query{prompts::embedding_query(interpretation)};
  Usage qu;
  const auto q = gateway.embed(embedder, query, out.method, &qu).front();
  acc.add(qu);

  const std::size_t bs = std::max<std::size_t>(1, options.embed_batch);
  const std::size_t n_batches = (docs.size() + bs - 1) / bs;
  parallel_for(n_batches, options.workers, [&](std::size_t b) {
    const std::size_t lo = b * bs, hi = std::min(docs.size(), lo + bs);
    Usage u;
    const auto vecs = gateway.embed(embedder, std::span<const std::string>(docs).subspan(lo, hi - lo), out.method, &u);
    acc.add(u);
    for (std::size_t k = lo; k < hi; ++k) {
      const auto& v = vecs[k - lo];
      if (v.size() != q.size()) throw ParseError("embedding dimension mismatch", "");
      double dot = 0.0;
      for (std::size_t d = 0; d < v.size(); ++d) dot += v[d] * q[d];
      out.verdicts[k].value = dot;
    }
  });

  std::vector<double> values;
  std::vector<int> labels;
  for (const auto& v : out.verdicts) {
    values.push_back(*v.value);
    labels.push_back(v.label);
  }
  out.n_judged = values.size();
  out.score = try_auroc(values, labels);
  finish(out, acc);
  return out;
}

SimulationPrompt build_simulation_prompt(std::string_view interpretation, std::span<const std::string> pieces) {
  SimulationPrompt out;
  out.text = std::string(prompts::simulation_preamble());
  out.text += "Neuron: ";
  out.text += interpretation;
  out.text += "\nActivations:\n<start>\n";
  for (const auto& p : pieces) {
    out.text += escape_slot_token(p);
    out.text += '\t';
    out.slot_offsets.push_back(out.text.size());
    out.text += prompts::kSimulationUnknown;
    out.text += '\n';
  }
  out.text += "<end>\n";
  return out;
}

std::optional<double> expected_level(std::span<const TopLogprob> alternatives) {
  std::array<double, 11> mass{};
  double total = 0.0;
  for (const auto& alt : alternatives) {
    const auto t = trim(alt.token);
    int v = -1;
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || ptr != t.data() + t.size() || v < 0 || v > 10) continue;
    const double p = std::exp(alt.logprob);
    mass[v] += p;
    total += p;
  }
  if (!(total > 0.0)) return std::nullopt;
  double e = 0.0;
  for (int v = 0; v <= 10; ++v) e += v * mass[v];
  return e / total;
}

namespace {

std::optional<double> slot_level(std::span<const PromptToken> tokens, std::size_t offset, std::size_t text_size) {
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::size_t end = i + 1 < tokens.size() ? tokens[i + 1].offset : text_size;
    if (tokens[i].offset <= offset && offset < end) return expected_level(tokens[i].top);
  }
  return std::nullopt;
}

}  // namespace

std::optional<std::vector<double>> simulate_aao(Gateway& gateway, const Endpoint& base,
                                                const std::string& interpretation,
                                                std::span<const std::string> pieces, int top_k, Usage* usage) {
  const auto prompt = build_simulation_prompt(interpretation, pieces);
  const auto tokens = gateway.prompt_logprobs(base, prompt.text, top_k, std::string(kSimulation), usage);
  std::vector<double> out;
  out.reserve(pieces.size());
  for (std::size_t off : prompt.slot_offsets) {
    const auto level = slot_level(tokens, off, prompt.text.size());
    if (!level) return std::nullopt;
    out.push_back(*level);
  }
  return out;
}

MethodScore simulation_score(Gateway& gateway, const Endpoint& base, const Vocabulary& vocab,
                             const std::string& interpretation, const EvalSet& eval, const ScoringOptions& options) {
  MethodScore out;
  out.method = std::string(kSimulation);
  out.feature_id = eval.feature_id;
  out.scorer_model = base.model;
  if (!(eval.feature_max > 0.0)) throw DomainError("simulation: feature never fires");
  std::vector<const FeatureExample*> examples;
  for (const auto& e : eval.activating) examples.push_back(&e);
  for (const auto& e : eval.nonactivating) examples.push_back(&e);
  out.verdicts.resize(examples.size());
  std::vector<std::optional<std::vector<double>>> predicted(examples.size());
  Accumulator acc;

  parallel_for(examples.size(), options.workers, [&](std::size_t i) {
    out.verdicts[i].label = examples[i]->is_activating ? 1 : 0;
    const auto pieces = vocab.pieces(examples[i]->tokens);
    try {
      if (!options.simulation_tbt) {
        Usage u;
        predicted[i] = simulate_aao(gateway, base, interpretation, pieces, options.simulation_top_k, &u);
        acc.add(u);
      } else {
        std::vector<double> levels;
        for (std::size_t t = 0; t < pieces.size(); ++t) {
          const auto prompt = build_simulation_prompt(interpretation, std::span(pieces).first(t + 1));
          Usage u;
          const auto tokens = gateway.prompt_logprobs(base, prompt.text, options.simulation_top_k, out.method, &u);
          acc.add(u);
          const auto level = slot_level(tokens, prompt.slot_offsets.back(), prompt.text.size());
          if (!level) break;
          levels.push_back(*level);
        }
        if (levels.size() == pieces.size()) predicted[i] = std::move(levels);
      }
      if (!predicted[i]) acc.warn("example " + std::to_string(i) + ": slot alignment failed; skipped");
    } catch (const ParseError& e) {
      acc.warn("example " + std::to_string(i) + ": " + e.what());
    } catch (const RetryExhaustedError& e) {
      acc.warn("example " + std::to_string(i) + ": " + e.what());
    }
  });

  std::vector<double> pred_all, true_all;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (!predicted[i]) continue;
    ++out.n_judged;
    double mean = 0.0;
    for (std::size_t t = 0; t < predicted[i]->size(); ++t) {
      pred_all.push_back((*predicted[i])[t]);
      true_all.push_back(display_quantize(examples[i]->activations[t], eval.feature_max));
      mean += (*predicted[i])[t];
    }
    out.verdicts[i].value = predicted[i]->empty() ? 0.0 : mean / double(predicted[i]->size());
  }
  out.n_unjudged = examples.size() - out.n_judged;
  try {
    out.score = pearson(pred_all, true_all);
  } catch (const DomainError&) {
    acc.warn("degenerate variance; simulation score undefined");
  }
  finish(out, acc);
  return out;
}

}  // namespace autointerp
