#include "autointerp/cli.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "autointerp/activation_store.hpp"
#include "autointerp/analysis.hpp"
#include "autointerp/error.hpp"
#include "autointerp/intervention.hpp"
#include "autointerp/parallel.hpp"
#include "autointerp/rng.hpp"
#include "autointerp/scoring.hpp"
#include "autointerp/subject_protocol.hpp"
#include "autointerp/vocabulary.hpp"

namespace autointerp::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kAllMethods = {std::string(kDetection), std::string(kFuzzing),
                                              std::string(kSurprisal), std::string(kEmbedding),
                                              std::string(kSimulation)};

std::uint32_t parse_id(std::string_view s, const std::string& spec) {
  std::uint32_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError("--features: cannot parse '" + std::string(s) + "' in '" + spec +
                      "' (expected all, ids or ranges like 0-9)");
  }
  return v;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

void write_jsonl(const fs::path& path, const std::vector<json>& rows) {
  std::string text;
  for (const auto& r : rows) text += r.dump() + "\n";
  write_text(path, text);
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::vector<json> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what(), line);
    }
  }
  return out;
}

// --- configuration ---------------------------------------------------------

void add_role(CLI::App* sub, const std::string& role, Endpoint& ep, bool model) {
  sub->add_option("--" + role + "-url", ep.base_url, "Base URL of the " + role + " endpoint");
  if (model) sub->add_option("--" + role + "-model", ep.model, "Model name for the " + role + " role");
}

void add_execution(CLI::App* sub, RunConfig& c) {
  sub->add_option("--max-in-flight", c.max_in_flight, "Concurrent request bound")->check(CLI::PositiveNumber);
  sub->add_option("--workers", c.workers, "Features processed concurrently")->check(CLI::PositiveNumber);
  sub->add_option("--retries", c.retries, "Retries per request on transient failures")->check(CLI::NonNegativeNumber);
  sub->add_option("--gateway-cache", c.gateway_cache, "Response cache directory, or none");
}

/// Option name a config key maps to: "explainer.model" -> "--explainer-model".
std::string flag_for_key(std::string key) {
  std::replace(key.begin(), key.end(), '.', '-');
  std::replace(key.begin(), key.end(), '_', '-');
  return "--" + key;
}

bool given_on_command_line(const std::vector<std::string>& args, const std::string& flag) {
  return std::any_of(args.begin(), args.end(),
                     [&](const std::string& a) { return a == flag || a.starts_with(flag + "="); });
}

/// Expands the config file into flags placed before the command-line flags,
/// skipping any the command line sets itself.
std::vector<std::string> config_args(CLI::App* sub, const fs::path& file, const std::vector<std::string>& args) {
  if (!fs::exists(file)) throw ConfigError("config file " + file.string() + " does not exist");
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigTOML().from_file(file.string());
  } catch (const CLI::Error& e) {
    throw ConfigError("cannot parse config file " + file.string() + ": " + e.what());
  }
  static const std::set<std::string> known_roots = {
      "cache", "vocab", "features", "out", "seed", "sampler", "n_examples", "n-examples", "window", "variant",
      "min_fires", "min-fires", "methods", "n_activating", "n-activating", "n_nonactivating", "n-nonactivating",
      "batch_size", "batch-size", "interpretations", "simulation_tbt", "simulation-tbt", "target_kl", "target-kl",
      "mode", "scores", "usage", "n_features", "n-features", "input_price", "input-price", "output_price",
      "output-price", "model_price", "model-price", "max_in_flight", "max-in-flight", "workers", "retries",
      "gateway_cache", "gateway-cache", "shuffle_interpretations", "shuffle-interpretations", "explainer",
      "judge", "base", "embedder", "subject"};
  std::vector<std::string> out;
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") continue;
    const std::string root = item.parents.empty() ? item.name : item.parents.front();
    if (!known_roots.count(root)) {
      throw ConfigError("config file " + file.string() + ": unknown key '" + item.fullname() + "'");
    }
    const std::string flag = flag_for_key(item.fullname());
    CLI::Option* opt = sub->get_option_no_throw(flag);
    if (opt == nullptr || given_on_command_line(args, flag)) continue;
    if (opt->get_expected_min() == 0) {
      const std::string v = item.inputs.empty() ? "true" : item.inputs.front();
      if (v == "true" || v == "1" || v == "yes") out.push_back(flag);
      continue;
    }
    std::string joined;
    for (std::size_t i = 0; i < item.inputs.size(); ++i) joined += (i ? "," : "") + item.inputs[i];
    out.push_back(flag + "=" + joined);
  }
  return out;
}

void require_role(const Endpoint& ep, const std::string& role, const std::string& why, bool model = true) {
  if (ep.base_url.empty()) {
    throw ConfigError(why + " needs the " + role + " endpoint: set --" + role + "-url, [" + role +
                      "] url in the config file, or AUTOINTERP_BASE_URL");
  }
  if (model && ep.model.empty()) {
    throw ConfigError(why + " needs a " + role + " model: set --" + role + "-model or [" + role +
                      "] model in the config file");
  }
}

fs::path vocab_path(const RunConfig& c) { return c.vocab.empty() ? c.cache / "vocab.json" : c.vocab; }

GatewayOptions gateway_options(const RunConfig& c) {
  GatewayOptions o;
  o.max_in_flight = c.max_in_flight;
  o.max_retries = c.retries;
  if (c.gateway_cache != "none") o.cache_dir = c.gateway_cache.empty() ? c.out / "gateway-cache" : fs::path(c.gateway_cache);
  return o;
}

void write_usage(const RunConfig& c, const Gateway& gateway, std::size_t features) {
  write_json(c.out / ("usage_" + c.command + ".json"),
             {{"command", c.command}, {"features", features}, {"usage", gateway.ledger().to_json()}});
}

void report_gateway(const Gateway& gateway, std::ostream& err) {
  const auto s = gateway.stats();
  err << "gateway: " << s.network_requests << " network requests, " << s.cache_hits << " cache hits, " << s.retries
      << " retries\n";
}

// --- subcommands -----------------------------------------------------------

int cmd_stats(const RunConfig& c, std::ostream& out) {
  const ValidationReport report = validate_cache(c.cache);
  if (!report.ok()) {
    out << "cache " << c.cache.string() << " is invalid: " << report.violations.size() << " violations\n";
    const std::size_t shown = std::min<std::size_t>(report.violations.size(), 20);
    for (std::size_t i = 0; i < shown; ++i) {
      out << "  " << to_string(report.violations[i].kind) << ": " << report.violations[i].message << "\n";
    }
    return 1;
  }
  const CacheHandle cache = open_cache(c.cache);
  const auto& m = cache.manifest();
  const auto ids = parse_features(c.features, m.n_features);
  json features = json::array();
  std::size_t below = 0;
  std::uint64_t fires = 0;
  for (auto f : ids) {
    const FeatureStats s = cache.feature_stats(f);
    if (s.fire_count < c.min_fires) ++below;
    fires += s.fire_count;
    features.push_back({{"feature_id", f},
                        {"fire_count", s.fire_count},
                        {"distinct_contexts", s.distinct_contexts},
                        {"max_activation", s.max_activation},
                        {"quantiles", s.quantiles}});
  }
  const double fraction = ids.empty() ? 0.0 : static_cast<double>(below) / static_cast<double>(ids.size());
  const json doc = {{"cache", c.cache.string()},
                    {"model_id", m.model_id},
                    {"sae_id", m.sae_id},
                    {"layer", m.layer},
                    {"hook_point", m.hook_point},
                    {"n_contexts", m.n_contexts},
                    {"context_len", m.context_len},
                    {"n_features", m.n_features},
                    {"records_checked", report.records_checked},
                    {"min_fires", c.min_fires},
                    {"features_examined", ids.size()},
                    {"below_threshold", below},
                    {"below_threshold_fraction", fraction},
                    {"features", features}};
  fs::create_directories(c.out);
  write_json(c.out / "stats.json", doc);
  std::ostringstream text;
  text << "cache: " << c.cache.string() << " (valid, " << report.records_checked << " records)\n"
       << "model: " << m.model_id << "  sae: " << m.sae_id << "  layer: " << m.layer << " (" << m.hook_point
       << ")\n"
       << "contexts: " << m.n_contexts << " x " << m.context_len << " tokens\n"
       << "features examined: " << ids.size() << ", total fires: " << fires << "\n"
       << "layer " << m.layer << ": " << below << " of " << ids.size() << " features fire fewer than "
       << c.min_fires << " times (fraction " << fraction << ")\n";
  write_text(c.out / "stats.txt", text.str());
  out << text.str();
  return 0;
}

int cmd_explain(const RunConfig& c, std::ostream& out, std::ostream& err) {
  require_role(c.roles.explainer, "explainer", "explain");
  const CacheHandle cache = open_cache(c.cache);
  const Vocabulary vocab = Vocabulary::load(vocab_path(c));
  const auto ids = parse_features(c.features, cache.manifest().n_features);
  fs::create_directories(c.out);
  Gateway gateway(gateway_options(c));

  ExplainerConfig config;
  config.sampler = c.sampler;
  config.variant = c.variant;
  config.min_fires = c.min_fires;
  std::vector<ExplainOutcome> outcomes(ids.size());
  parallel_for(ids.size(), c.workers, [&](std::size_t i) {
    ExplainerConfig fc = config;
    fc.sampler.seed = mix_seed(c.seed, ids[i]);
    outcomes[i] = explain_feature(cache, vocab, gateway, c.roles.explainer, ids[i], fc);
  });

  std::vector<Interpretation> interps;
  std::vector<json> rows;
  std::size_t ok = 0, skipped = 0, failed = 0;
  for (const auto& o : outcomes) {
    rows.push_back(o.to_json());
    if (o.interpretation) interps.push_back(*o.interpretation);
    ok += o.status == ExplainStatus::ok;
    skipped += o.status == ExplainStatus::skipped;
    failed += o.status == ExplainStatus::failed;
  }
  write_interpretations(c.out / "interpretations.jsonl", interps);
  write_jsonl(c.out / "explain_outcomes.jsonl", rows);
  write_usage(c, gateway, ids.size());
  report_gateway(gateway, err);
  out << "explained " << ok << " features, skipped " << skipped << ", failed " << failed << "\n";
  return 0;
}

MethodScore unscored(const std::string& method, std::uint32_t f, const std::string& why) {
  MethodScore s;
  s.method = method;
  s.feature_id = f;
  s.warnings.push_back(why);
  return s;
}

int cmd_score(const RunConfig& c, std::ostream& out, std::ostream& err) {
  std::vector<std::string> methods = c.methods.empty() ? kAllMethods : c.methods;
  for (const auto& m : methods) {
    if (std::find(kAllMethods.begin(), kAllMethods.end(), m) == kAllMethods.end()) {
      throw ConfigError("unknown method '" + m + "' (expected detection, fuzzing, surprisal, embedding or simulation)");
    }
  }
  for (const auto& m : methods) {
    if (m == kDetection || m == kFuzzing) require_role(c.roles.judge, "judge", "method " + m);
    if (m == kSurprisal || m == kSimulation) require_role(c.roles.base, "base", "method " + m);
    if (m == kEmbedding) require_role(c.roles.embedder, "embedder", "method " + m);
  }
  const CacheHandle cache = open_cache(c.cache);
  const Vocabulary vocab = Vocabulary::load(vocab_path(c));
  const auto selected = parse_features(c.features, cache.manifest().n_features);
  const fs::path interp_path = c.interpretations.empty() ? c.out / "interpretations.jsonl" : c.interpretations;
  auto interps = read_interpretations(interp_path);
  std::stable_sort(interps.begin(), interps.end(), [](const auto& a, const auto& b) { return a.feature_id < b.feature_id; });
  std::vector<std::pair<std::uint32_t, std::string>> items;
  for (const auto& it : interps) {
    if (std::binary_search(selected.begin(), selected.end(), it.feature_id)) items.emplace_back(it.feature_id, it.text);
  }
  if (items.empty()) throw ConfigError("no interpretations for the selected features in " + interp_path.string());
  if (c.shuffle_interpretations) {
    if (items.size() < 2) throw ConfigError("--shuffle-interpretations needs at least two interpretations");
    const auto perm = derangement(items.size(), c.seed);
    std::vector<std::pair<std::uint32_t, std::string>> shuffled;
    for (std::size_t i = 0; i < items.size(); ++i) shuffled.emplace_back(items[i].first, items[perm[i]].second);
    items = std::move(shuffled);
  }
  fs::create_directories(c.out);
  Gateway gateway(gateway_options(c));

  EvalConfig ec;
  ec.n_activating = c.n_activating;
  ec.n_nonactivating = c.n_nonactivating;
  ec.window = c.eval_window;
  ec.seed = c.seed;
  ScoringOptions so;
  so.batch_size = c.batch_size;
  so.seed = c.seed;
  so.simulation_tbt = c.simulation_tbt;

  std::vector<std::vector<MethodScore>> results(items.size());
  parallel_for(items.size(), c.workers, [&](std::size_t i) {
    const auto [f, text] = items[i];
    std::optional<EvalSet> eval;
    try {
      eval = build_eval_set(cache, f, ec);
    } catch (const DomainError& e) {
      for (const auto& m : methods) results[i].push_back(unscored(m, f, e.what()));
      return;
    }
    for (const auto& m : methods) {
      if (m == kDetection) {
        results[i].push_back(detection_score(gateway, c.roles.judge, vocab, text, *eval, so));
      } else if (m == kFuzzing) {
        results[i].push_back(fuzzing_score(gateway, c.roles.judge, vocab, text, *eval, so));
      } else if (m == kSurprisal) {
        results[i].push_back(surprisal_score(gateway, c.roles.base, vocab, text, *eval, so));
      } else if (m == kEmbedding) {
        results[i].push_back(embedding_score(gateway, c.roles.embedder, vocab, text, *eval, so));
      } else {
        results[i].push_back(simulation_score(gateway, c.roles.base, vocab, text, *eval, so));
      }
    }
  });

  std::vector<json> rows;
  std::map<std::string, std::size_t> defined;
  for (const auto& per_feature : results) {
    for (const auto& s : per_feature) {
      auto row = s.to_json();
      if (c.shuffle_interpretations) row["control"] = "shuffled";
      rows.push_back(std::move(row));
      defined[s.method] += s.score.has_value();
    }
  }
  write_jsonl(c.out / "scores.jsonl", rows);
  write_usage(c, gateway, items.size());
  report_gateway(gateway, err);
  out << "scored " << items.size() << " features";
  for (const auto& m : methods) out << ", " << m << " " << defined[m];
  out << "\n";
  return 0;
}

int cmd_intervene(const RunConfig& c, std::ostream& out, std::ostream& err) {
  const bool additive = c.mode == "additive";
  if (!additive && c.mode != "zero_clamp") throw ConfigError("--mode must be additive or zero_clamp");
  if (additive && c.target_kl.empty()) {
    throw ConfigError("intervene --mode additive needs --target-kl (one or more values in nats); there is no default");
  }
  for (double t : c.target_kl) {
    if (!(t > 0.0)) throw ConfigError("--target-kl values must be positive");
  }
  require_role(c.roles.subject, "subject", "intervene", false);
  require_role(c.roles.explainer, "explainer", "intervene");
  require_role(c.roles.base, "base", "intervene");
  const CacheHandle cache = open_cache(c.cache);
  const Vocabulary vocab = Vocabulary::load(vocab_path(c));
  const auto ids = parse_features(c.features, cache.manifest().n_features);
  fs::create_directories(c.out);
  Gateway gateway(gateway_options(c));
  SubjectClient subject(gateway, c.roles.subject);

  PoolConfig pc;
  pc.min_fires = c.min_fires;
  pc.seed = c.seed;
  InterventionOptions io;
  io.seed = c.seed;
  const std::vector<double> targets = additive ? c.target_kl : std::vector<double>{0.0};

  struct FeatureRun {
    std::optional<PromptPool> pool;
    std::string skip_reason;
    std::vector<InterventionCalibration> calibrations;
    std::vector<InterventionSpec> specs;       // per target
    std::vector<ExplainOutcome> explanations;  // per target
    std::vector<InterventionScore> scores;     // per target, own interpretation
  };
  std::vector<FeatureRun> runs(ids.size());
  parallel_for(ids.size(), c.workers, [&](std::size_t i) {
    const auto f = ids[i];
    auto& run = runs[i];
    try {
      run.pool = build_prompt_pool(cache, f, pc);
    } catch (const DomainError& e) {
      run.skip_reason = e.what();
      return;
    }
    for (double target : targets) {
      InterventionSpec spec{f, additive ? InterventionMode::additive : InterventionMode::zero_clamp, 0.0};
      if (additive) {
        auto cal = calibrate_strength(f, target, [&](double s) {
          InterventionSpec probe = spec;
          probe.strength = s;
          return measure_strength(subject, probe, run.pool->scoring);
        });
        spec.strength = cal.strength;
        run.calibrations.push_back(std::move(cal));
      }
      run.specs.push_back(spec);
      auto outcome = explain_intervention(gateway, c.roles.explainer, subject, vocab, *run.pool, spec, io);
      if (outcome.interpretation) {
        run.scores.push_back(intervention_score(gateway, c.roles.base, subject, vocab, outcome.interpretation->text,
                                                *run.pool, spec, target, io));
      } else {
        InterventionScore missing;
        missing.feature_id = f;
        missing.target_kl = target;
        missing.spec = spec;
        run.scores.push_back(std::move(missing));
      }
      run.explanations.push_back(std::move(outcome));
    }
  });

  std::vector<json> cal_rows, interp_rows, score_rows, outcome_rows;
  std::ostringstream summary;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    std::vector<InterventionScore> own;
    std::vector<std::pair<std::uint32_t, std::string>> pairs;
    std::vector<std::size_t> run_of;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const auto& run = runs[i];
      if (!run.pool) {
        if (t == 0) outcome_rows.push_back({{"feature_id", ids[i]}, {"status", "skipped"}, {"reason", run.skip_reason}});
        continue;
      }
      if (additive) cal_rows.push_back(run.calibrations[t].to_json());
      auto outcome_row = run.explanations[t].to_json();
      outcome_row["target_kl"] = targets[t];
      outcome_rows.push_back(std::move(outcome_row));
      if (run.explanations[t].interpretation) {
        auto j = run.explanations[t].interpretation->to_json();
        j["target_kl"] = targets[t];
        interp_rows.push_back(std::move(j));
        pairs.emplace_back(ids[i], run.explanations[t].interpretation->text);
        run_of.push_back(i);
      }
      auto row = run.scores[t].to_json();
      row["control"] = "true";
      score_rows.push_back(std::move(row));
      if (run.scores[t].score) own.push_back(run.scores[t]);
    }

    std::optional<double> shuffled_mean;
    if (c.shuffle_interpretations && pairs.size() >= 2) {
      std::vector<InterventionScore> shuffled(pairs.size());
      std::map<std::uint32_t, std::size_t> slot;
      for (std::size_t k = 0; k < pairs.size(); ++k) slot[pairs[k].first] = k;
      std::mutex guard;
      // The baseline evaluates sequentially; parallelism comes from the per-prompt work.
      shuffled_interpretation_baseline(pairs, mix_seed(c.seed, t), [&](std::uint32_t f, const std::string& z) {
        const std::size_t k = slot.at(f);
        const auto& run = runs[run_of[k]];
        auto s = intervention_score(gateway, c.roles.base, subject, vocab, z, *run.pool, run.specs[t], targets[t], io);
        std::lock_guard lock(guard);
        shuffled[k] = s;
        return s.score;
      });
      std::vector<InterventionScore> defined;
      for (const auto& s : shuffled) {
        auto row = s.to_json();
        row["control"] = "shuffled";
        score_rows.push_back(std::move(row));
        if (s.score) defined.push_back(s);
      }
      if (!defined.empty()) shuffled_mean = mean_intervention_score(defined);
    }
    summary << "target_kl " << targets[t] << ": " << own.size() << " scored";
    if (!own.empty()) summary << ", mean S " << mean_intervention_score(own);
    if (shuffled_mean) summary << ", shuffled mean S " << *shuffled_mean;
    summary << "\n";
  }

  if (additive) write_jsonl(c.out / "calibrations.jsonl", cal_rows);
  write_jsonl(c.out / "intervention_interpretations.jsonl", interp_rows);
  write_jsonl(c.out / "intervention_outcomes.jsonl", outcome_rows);
  write_jsonl(c.out / "intervention_scores.jsonl", score_rows);
  write_usage(c, gateway, ids.size());
  report_gateway(gateway, err);
  out << summary.str();
  return 0;
}

int cmd_analyze(const RunConfig& c, std::ostream& out) {
  const fs::path path = c.scores.empty() ? c.out / "scores.jsonl" : c.scores;
  ScoreMatrix matrix;
  std::map<std::string, std::size_t> missing;
  for (const auto& row : read_jsonl(path)) {
    const auto s = MethodScore::from_json(row);
    matrix.set(s.feature_id, s.method, s.score);
    missing[s.method] += !s.score.has_value();
  }
  if (matrix.features().empty()) throw ConfigError("no scores in " + path.string());
  json methods = json::object();
  std::vector<std::pair<std::string, Summary>> rows;
  for (const auto& m : matrix.methods()) {
    const auto col = matrix.column(m);
    json entry = {{"n", col.size()}, {"missing", missing[m]}};
    if (!col.empty()) {
      const Summary s = summarize(col);
      entry["summary"] = to_json(s);
      rows.emplace_back(m, s);
    }
    methods[m] = entry;
  }
  json doc = {{"features", matrix.features().size()}, {"methods", methods}, {"correlations", nullptr}};
  std::string text = "Scores: median (25%-75%)\n" + render_summary_table(rows);
  if (matrix.methods().size() >= 2) {
    const CorrelationTable table = correlation_matrix(matrix);
    doc["correlations"] = to_json(table);
    text += "\nSpearman correlation\n" + render_correlation_table(table, true);
    text += "\nPearson correlation\n" + render_correlation_table(table, false);
  }
  fs::create_directories(c.out);
  write_json(c.out / "report.json", doc);
  write_text(c.out / "report.txt", text);
  out << text;
  return 0;
}

std::pair<double, double> parse_price_pair(const std::string& s, const std::string& what) {
  const auto comma = s.find(',');
  try {
    if (comma == std::string::npos) throw std::invalid_argument(s);
    return {std::stod(s.substr(0, comma)), std::stod(s.substr(comma + 1))};
  } catch (const std::exception&) {
    throw ConfigError(what + ": expected INPUT,OUTPUT dollars per million tokens, got '" + s + "'");
  }
}

int cmd_cost(const RunConfig& c, std::ostream& out) {
  CostModel model;
  if (c.input_price || c.output_price) {
    if (!c.input_price || !c.output_price) throw ConfigError("set both --input-price and --output-price");
    model.fallback = Prices{*c.input_price / 1e6, *c.output_price / 1e6};
  }
  for (const auto& mp : c.model_prices) {
    const auto eq = mp.find('=');
    if (eq == std::string::npos) throw ConfigError("--model-price: expected MODEL=INPUT,OUTPUT, got '" + mp + "'");
    const auto [in, o] = parse_price_pair(mp.substr(eq + 1), "--model-price");
    model.per_model[mp.substr(0, eq)] = Prices{in / 1e6, o / 1e6};
  }
  if (!model.fallback && model.per_model.empty()) {
    throw ConfigError("cost needs prices: set --input-price/--output-price or --model-price MODEL=IN,OUT");
  }
  std::vector<fs::path> files = c.usage_files;
  if (files.empty()) {
    for (const char* name : {"usage_explain.json", "usage_score.json", "usage_intervene.json"}) {
      if (fs::exists(c.out / name)) files.push_back(c.out / name);
    }
  }
  if (files.empty()) throw ConfigError("no usage files given with --usage and none found in " + c.out.string());

  // Methods are metered per feature processed in the run that produced them.
  std::vector<CostLine> lines;
  CostEstimate total;
  total.n_features = c.n_features;
  for (const auto& file : files) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot open " + file.string());
    json doc;
    try {
      doc = json::parse(in);
    } catch (const json::exception& e) {
      throw ParseError(file.string() + ": " + e.what(), "");
    }
    const double measured = doc.at("features").get<double>();
    std::vector<MethodTokens> tokens;
    for (const auto& [key, u] : UsageLedger::entries_from_json(doc.at("usage"))) {
      tokens.push_back({key.first, key.second, static_cast<double>(u.input_tokens),
                        static_cast<double>(u.output_tokens), static_cast<double>(u.cached_input_tokens)});
    }
    if (tokens.empty() || measured <= 0) continue;
    const CostEstimate part = cost_estimate(tokens, measured, model, c.n_features);
    total.lines.insert(total.lines.end(), part.lines.begin(), part.lines.end());
    total.total_dollars += part.total_dollars;
  }
  fs::create_directories(c.out);
  write_json(c.out / "cost.json", to_json(total));
  const std::string text = render_cost_table(total);
  write_text(c.out / "cost.txt", text);
  out << text;
  return 0;
}

int dispatch(RunConfig& c, std::ostream& out, std::ostream& err) {
  for (Endpoint* ep : {&c.roles.explainer, &c.roles.judge, &c.roles.base, &c.roles.embedder, &c.roles.subject}) {
    *ep = with_env_defaults(*ep);
  }
  if (c.command == "stats") return cmd_stats(c, out);
  if (c.command == "explain") return cmd_explain(c, out, err);
  if (c.command == "score") return cmd_score(c, out, err);
  if (c.command == "intervene") return cmd_intervene(c, out, err);
  if (c.command == "analyze") return cmd_analyze(c, out);
  return cmd_cost(c, out);
}

}  // namespace

std::vector<std::uint32_t> parse_features(const std::string& spec, std::uint32_t n_features) {
  std::vector<std::uint32_t> out;
  if (spec == "all") {
    out.resize(n_features);
    for (std::uint32_t i = 0; i < n_features; ++i) out[i] = i;
    return out;
  }
  std::string_view rest = spec;
  while (!rest.empty()) {
    const auto comma = rest.find(',');
    const std::string_view part = rest.substr(0, comma);
    rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
    const auto dash = part.find('-');
    const std::uint32_t lo = parse_id(part.substr(0, dash), spec);
    const std::uint32_t hi = dash == std::string_view::npos ? lo : parse_id(part.substr(dash + 1), spec);
    if (hi < lo) throw ConfigError("--features: empty range '" + std::string(part) + "'");
    if (hi >= n_features) {
      throw ConfigError("--features: id " + std::to_string(hi) + " is out of range (cache has " +
                        std::to_string(n_features) + " features)");
    }
    for (std::uint64_t f = lo; f <= hi; ++f) out.push_back(static_cast<std::uint32_t>(f));
  }
  if (out.empty()) throw ConfigError("--features selects nothing");
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  RunConfig c;
  std::string config_file;
  std::string sampler = "quantile", variant = "plain";
  std::vector<std::string> usage;

  CLI::App app{"Interpret and score sparse autoencoder features"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  auto common = [&](CLI::App* sub, bool needs_cache) {
    sub->add_option("--config", config_file, "TOML config file; command-line flags take precedence");
    if (needs_cache) {
      sub->add_option("--cache", c.cache, "Activation cache directory")->required();
      sub->add_option("--vocab", c.vocab, "Vocabulary file (default <cache>/vocab.json)");
      sub->add_option("--features", c.features, "all, or ids and ranges like 0-99,120");
    }
    sub->add_option("--out", c.out, "Output directory");
    sub->add_option("--seed", c.seed, "Seed for every sampled choice");
  };

  auto* stats = app.add_subcommand("stats", "Validate a cache and report firing statistics");
  common(stats, true);
  stats->add_option("--min-fires", c.min_fires, "Firing threshold");

  auto* explain = app.add_subcommand("explain", "Generate interpretations from activating examples");
  common(explain, true);
  explain->add_option("--sampler", sampler, "top, random or quantile");
  explain->add_option("--n-examples", c.sampler.n_examples, "Examples shown to the explainer")->check(CLI::PositiveNumber);
  explain->add_option("--window", c.sampler.window, "Tokens per example")->check(CLI::PositiveNumber);
  explain->add_option("--variant", variant, "plain, cot or no-activations");
  explain->add_option("--min-fires", c.min_fires, "Skip features firing fewer times");
  add_role(explain, "explainer", c.roles.explainer, true);
  add_execution(explain, c);

  auto* score = app.add_subcommand("score", "Score interpretations");
  common(score, true);
  score->add_option("--methods", c.methods, "detection,fuzzing,surprisal,embedding,simulation")->delimiter(',');
  score->add_option("--n-activating", c.n_activating, "Activating evaluation examples")->check(CLI::PositiveNumber);
  score->add_option("--n-nonactivating", c.n_nonactivating, "Non-activating evaluation examples")
      ->check(CLI::PositiveNumber);
  score->add_option("--window", c.eval_window, "Tokens per example")->check(CLI::PositiveNumber);
  score->add_option("--batch-size", c.batch_size, "Examples per judge request")->check(CLI::PositiveNumber);
  score->add_option("--interpretations", c.interpretations, "Interpretations JSONL (default <out>/interpretations.jsonl)");
  score->add_flag("--shuffle-interpretations", c.shuffle_interpretations, "Score each feature with another's interpretation");
  score->add_flag("--simulation-tbt", c.simulation_tbt, "Token-by-token simulation (one query per token)");
  add_role(score, "judge", c.roles.judge, true);
  add_role(score, "base", c.roles.base, true);
  add_role(score, "embedder", c.roles.embedder, true);
  add_execution(score, c);

  auto* intervene = app.add_subcommand("intervene", "Calibrate interventions, explain and score them");
  common(intervene, true);
  intervene->add_option("--target-kl", c.target_kl, "Target mean KL in nats; comma list for several")->delimiter(',');
  intervene->add_option("--mode", c.mode, "additive or zero_clamp");
  intervene->add_option("--min-fires", c.min_fires, "Skip features firing fewer times");
  intervene->add_flag("--shuffle-interpretations", c.shuffle_interpretations, "Also score shuffled interpretations");
  add_role(intervene, "explainer", c.roles.explainer, true);
  add_role(intervene, "base", c.roles.base, true);
  add_role(intervene, "subject", c.roles.subject, false);
  add_execution(intervene, c);

  auto* analyze = app.add_subcommand("analyze", "Summaries and correlations of method scores");
  common(analyze, false);
  analyze->add_option("--scores", c.scores, "Scores JSONL (default <out>/scores.jsonl)");

  auto* cost = app.add_subcommand("cost", "Extrapolate metered usage to a dollar estimate");
  common(cost, false);
  cost->add_option("--usage", usage, "usage_*.json files (default: those in --out)");
  cost->add_option("--n-features", c.n_features, "Features to extrapolate to")->check(CLI::NonNegativeNumber);
  cost->add_option("--input-price", c.input_price, "Default $ per million input tokens");
  cost->add_option("--output-price", c.output_price, "Default $ per million output tokens");
  cost->add_option("--model-price", c.model_prices, "MODEL=INPUT,OUTPUT in $ per million tokens");

  // Flags from --config are spliced in ahead of the command-line flags.
  std::vector<std::string> argv_in(args.begin() + (args.empty() ? 0 : 1), args.end());
  try {
    for (std::size_t i = 0; i < argv_in.size(); ++i) {
      std::string file;
      if (argv_in[i] == "--config" && i + 1 < argv_in.size()) file = argv_in[i + 1];
      if (argv_in[i].starts_with("--config=")) file = argv_in[i].substr(9);
      if (file.empty()) continue;
      CLI::App* sub = nullptr;
      for (auto* s : app.get_subcommands([](CLI::App*) { return true; })) {
        if (std::find(argv_in.begin(), argv_in.end(), s->get_name()) != argv_in.end()) sub = s;
      }
      if (sub == nullptr) break;
      auto extra = config_args(sub, file, argv_in);
      const auto at = std::find(argv_in.begin(), argv_in.end(), sub->get_name()) + 1;
      argv_in.insert(at, extra.begin(), extra.end());
      break;
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    std::vector<std::string> reversed(argv_in.rbegin(), argv_in.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  for (auto* s : app.get_subcommands()) c.command = s->get_name();
  try {
    c.sampler.strategy = parse_sampler_strategy(sampler);
    c.variant = parse_prompt_variant(variant);
    for (const auto& u : usage) c.usage_files.emplace_back(u);
    return dispatch(c, out, err);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  return run(std::vector<std::string>(argv, argv + argc), out, err);
}

}  // namespace autointerp::cli
