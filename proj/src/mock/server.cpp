#include "autointerp/mock/server.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <map>
#include <mutex>
#include <set>
#include <thread>
#include <type_traits>
#include <unordered_map>

#include "autointerp/error.hpp"
#include "autointerp/mock/tokenizer.hpp"
#include "autointerp/prompts.hpp"
#include "autointerp/rng.hpp"
#include "autointerp/subject_protocol.hpp"
#include "httplib.h"
#include "json.hpp"

namespace autointerp::mock {

using nlohmann::json;

std::optional<Policy> Policy::parse(std::string_view name) {
  auto number = [](std::string_view s) -> std::optional<std::uint64_t> {
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
    return v;
  };
  if (name == "oracle") return Policy{PolicyKind::oracle, 0, 0};
  if (name == "blind") return Policy{PolicyKind::blind, 0, 0};
  if (name == "uniform") return Policy{PolicyKind::uniform, 0, 0};
  if (name.starts_with("random:")) {
    if (auto v = number(name.substr(7))) return Policy{PolicyKind::random, *v, 0};
  }
  if (name.starts_with("constant:")) {
    if (auto v = number(name.substr(9)); v && *v <= 10) return Policy{PolicyKind::constant, 0, static_cast<int>(*v)};
  }
  return std::nullopt;
}

namespace {

struct HttpError {
  int status;
  json body;
};

std::uint64_t hash_of(std::uint64_t seed, std::string_view a, std::string_view b = {}, std::uint64_t c = 0) {
  std::uint64_t h = fnv1a64(a, splitmix64(seed));
  h = fnv1a64(b, splitmix64(h ^ 0x5bd1e995u));
  return splitmix64(h ^ c);
}

double unit(std::uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

std::string_view leading_space(std::string_view token) {
  std::size_t i = 0;
  while (i < token.size() && (token[i] == ' ' || token[i] == '\t' || token[i] == '\n' || token[i] == '\r')) ++i;
  return token.substr(0, i);
}

std::size_t count_tokens(std::string_view text) { return tokenize(text).size(); }

/// Text between `open` and the next `close`, starting the search at `from`.
std::string_view between(std::string_view s, std::string_view open, std::string_view close, std::size_t from = 0) {
  const auto a = s.find(open, from);
  if (a == std::string_view::npos) return {};
  const auto start = a + open.size();
  const auto b = s.find(close, start);
  return s.substr(start, (b == std::string_view::npos ? s.size() : b) - start);
}

/// Bare words inside "<<...>>" spans.
std::vector<std::string_view> marked_words(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while ((pos = text.find("<<", pos)) != std::string_view::npos) {
    const auto end = text.find(">>", pos + 2);
    if (end == std::string_view::npos) break;
    for (const auto& t : tokenize(text.substr(pos + 2, end - pos - 2))) {
      if (auto w = bare_word(t.text); !w.empty()) out.push_back(w);
    }
    pos = end + 2;
  }
  return out;
}

std::vector<std::string_view> words(std::string_view text) {
  std::vector<std::string_view> out;
  for (const auto& t : tokenize(text)) {
    if (auto w = bare_word(t.text); !w.empty()) out.push_back(w);
  }
  return out;
}

void append_string(std::string& out, std::string_view s) {
  static constexpr char kHex[] = "0123456789abcdef";
  out += '"';
  for (const char ch : s) {
    const auto c = static_cast<unsigned char>(ch);
    if (c == '"' || c == '\\') {
      out += '\\';
      out += ch;
    } else if (c == '\n') {
      out += "\\n";
    } else if (c == '\t') {
      out += "\\t";
    } else if (c < 0x20) {
      out += "\\u00";
      out += kHex[c >> 4];
      out += kHex[c & 0xf];
    } else {
      out += ch;
    }
  }
  out += '"';
}

void append_number(std::string& out, double v) {
  char buf[32];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, end);
}

struct Message {
  std::string role;
  std::string content;
};

}  // namespace

struct MockServer::Impl {
  std::shared_ptr<const PlantedWorld> world;
  MockOptions options;
  httplib::Server server;
  std::thread thread;
  int port = -1;

  mutable std::mutex fault_mutex;
  FaultConfig faults;
  std::unordered_map<std::uint64_t, int> attempts;

  std::atomic<std::uint64_t> requests{0}, chat{0}, completions{0}, embeddings{0}, generate{0}, faults_injected{0};
  std::atomic<std::uint64_t> in_flight{0}, max_in_flight{0};

  Impl(std::shared_ptr<const PlantedWorld> w, MockOptions o)
      : world(std::move(w)), options(std::move(o)), faults(options.faults) {}

  FaultConfig current_faults() const {
    std::lock_guard lock(fault_mutex);
    return faults;
  }

  Policy policy_for(const json& body, const Policy& fallback) const {
    return Policy::parse(body.value("model", "")).value_or(fallback);
  }

  template <typename Handler>
  void route(const std::string& path, std::atomic<std::uint64_t>& counter, Handler handler) {
    server.Post(path, [this, &counter, handler](const httplib::Request& req, httplib::Response& res) {
      const auto now = ++in_flight;
      auto seen = max_in_flight.load();
      while (now > seen && !max_in_flight.compare_exchange_weak(seen, now)) {
      }
      struct Leave {
        std::atomic<std::uint64_t>& n;
        ~Leave() { --n; }
      } leave{in_flight};
      ++requests;
      ++counter;

      const FaultConfig f = current_faults();
      if (f.latency.count() > 0) std::this_thread::sleep_for(f.latency);
      if (f.rate_limit_first > 0 || f.malformed_first > 0) {
        int attempt;
        {
          std::lock_guard lock(fault_mutex);
          attempt = attempts[fnv1a64(req.path + "\n" + req.body)]++;
        }
        if (attempt < f.rate_limit_first) {
          ++faults_injected;
          res.status = 429;
          res.set_content(R"({"error":{"message":"rate limit exceeded","type":"rate_limit"}})", "application/json");
          return;
        }
        if (attempt < f.rate_limit_first + f.malformed_first) {
          ++faults_injected;
          res.status = 200;
          res.set_content(R"({"choices": [{"message": {"content": "trunc)", "application/json");
          return;
        }
      }

      json body;
      try {
        body = json::parse(req.body);
      } catch (const json::exception& e) {
        res.status = 400;
        res.set_content(json{{"error", {{"message", std::string("invalid JSON: ") + e.what()}}}}.dump(),
                        "application/json");
        return;
      }
      try {
        auto reply = handler(body, f);
        if constexpr (std::is_same_v<decltype(reply), std::string>) {
          res.set_content(std::move(reply), "application/json");
        } else {
          res.set_content(reply.dump(), "application/json");
        }
      } catch (const HttpError& e) {
        res.status = e.status;
        res.set_content(e.body.dump(), "application/json");
      } catch (const std::exception& e) {
        res.status = 400;
        res.set_content(json{{"error", {{"message", e.what()}}}}.dump(), "application/json");
      }
    });
  }

  // --- chat ----------------------------------------------------------------

  json handle_chat(const json& body, const FaultConfig& f) {
    std::vector<Message> msgs;
    for (const auto& m : body.at("messages")) {
      msgs.push_back({m.at("role").get<std::string>(), m.at("content").get<std::string>()});
    }
    if (msgs.empty()) throw HttpError{400, {{"error", {{"message", "messages must not be empty"}}}}};

    std::string reply;
    std::vector<std::pair<int, double>> list;  // verdict, confidence
    const std::string& first = msgs.front().content;
    if (msgs.front().role == "system" && first.starts_with(prompts::explainer_system())) {
      reply = explain(body, msgs, f);
    } else if (msgs.front().role == "system" &&
               (first == prompts::detection_system() || first == prompts::fuzzing_system())) {
      const bool fuzz = first == prompts::fuzzing_system();
      reply = judge(body, msgs, fuzz, f, list);
    } else if (first.starts_with(prompts::intervention_explainer_preamble())) {
      reply = explain_intervention(body, first);
    } else {
      reply = "ok";
    }

    std::size_t prompt_tokens = 0, cached = 0;
    for (std::size_t i = 0; i < msgs.size(); ++i) {
      const auto n = count_tokens(msgs[i].content);
      prompt_tokens += n;
      if (i + 1 < msgs.size()) cached += n;
    }
    json choice = {{"index", 0},
                   {"message", {{"role", "assistant"}, {"content", reply}}},
                   {"finish_reason", "stop"}};
    if (body.value("logprobs", false)) choice["logprobs"] = {{"content", reply_logprobs(reply, list)}};
    return {{"id", "mock-" + std::to_string(hash_of(0, body.dump()))},
            {"object", "chat.completion"},
            {"model", body.value("model", "")},
            {"choices", json::array({choice})},
            {"usage",
             {{"prompt_tokens", prompt_tokens},
              {"completion_tokens", count_tokens(reply)},
              {"total_tokens", prompt_tokens + count_tokens(reply)},
              {"prompt_tokens_details", {{"cached_tokens", cached}}}}}};
  }

  static json reply_logprobs(const std::string& reply, const std::vector<std::pair<int, double>>& list) {
    json content = json::array();
    if (list.empty()) {
      for (const auto& t : tokenize(reply)) {
        content.push_back({{"token", std::string(t.text)}, {"logprob", -0.1}, {"top_logprobs", json::array()}});
      }
      return content;
    }
    auto plain = [&](const std::string& tok) {
      content.push_back({{"token", tok}, {"logprob", 0.0}, {"top_logprobs", json::array()}});
    };
    plain("[");
    for (std::size_t i = 0; i < list.size(); ++i) {
      const auto [v, conf] = list[i];
      const std::string chosen = v ? "1" : "0", other = v ? "0" : "1";
      content.push_back({{"token", chosen},
                         {"logprob", std::log(conf)},
                         {"top_logprobs",
                          {{{"token", chosen}, {"logprob", std::log(conf)}},
                           {{"token", other}, {"logprob", std::log1p(-conf)}}}}});
      if (i + 1 < list.size()) plain(",");
    }
    plain("]");
    return content;
  }

  static std::size_t reminders(const std::vector<Message>& msgs) {
    // system, few-shot user, few-shot assistant, examples, then (reply, reminder) pairs
    return msgs.size() > 4 ? (msgs.size() - 4) / 2 : 0;
  }

  std::string explain(const json& body, const std::vector<Message>& msgs, const FaultConfig& f) {
    if (reminders(msgs) < static_cast<std::size_t>(f.explainer_parse_failures)) {
      return "The marked words seem to share a theme.";
    }
    const Policy p = policy_for(body, options.explainer);
    const std::string& examples = msgs.size() > 3 ? msgs[3].content : msgs.back().content;
    const auto& features = world->features();
    switch (p.kind) {
      case PolicyKind::oracle: {
        std::map<std::uint32_t, int> votes;
        for (auto w : marked_words(examples)) {
          if (auto fid = world->trigger_of(w)) ++votes[*fid];
        }
        if (votes.empty()) return "No clear pattern.\n[interpretation]: Unclear pattern.";
        auto best = std::max_element(votes.begin(), votes.end(),
                                     [](const auto& a, const auto& b) { return a.second < b.second; });
        return "The marked words belong to one group.\n[interpretation]: " + features[best->first].description;
      }
      case PolicyKind::random:
        return "[interpretation]: " + features[hash_of(p.seed, examples) % features.size()].description;
      default:
        return "[interpretation]: Common words in text.";
    }
  }

  std::string judge(const json& body, const std::vector<Message>& msgs, bool fuzz, const FaultConfig& f,
                    std::vector<std::pair<int, double>>& list) {
    if (reminders(msgs) < static_cast<std::size_t>(f.judge_bad_replies)) return "I am not sure about these.";
    const Policy p = policy_for(body, options.judge);
    const std::string_view content = msgs.size() > 3 ? msgs[3].content : msgs.back().content;
    const std::string z(between(content, "feature interpretation: ", "\n\nText examples:"));
    const auto fid = world->feature_for_description(z);

    std::vector<std::string_view> texts;
    for (std::size_t k = 0;; ++k) {
      const std::string marker = "\n\nExample " + std::to_string(k) + ":";
      const auto at = content.find(marker);
      if (at == std::string_view::npos) break;
      const auto start = at + marker.size();
      const auto next = content.find("\n\nExample " + std::to_string(k + 1) + ":", start);
      texts.push_back(content.substr(start, (next == std::string_view::npos ? content.size() : next) - start));
    }

    std::string reply = "[";
    for (std::size_t k = 0; k < texts.size(); ++k) {
      int v = 0;
      double conf = 0.95;
      switch (p.kind) {
        case PolicyKind::oracle:
          if (fid && fuzz) {
            const auto marked = marked_words(texts[k]);
            v = !marked.empty() && std::all_of(marked.begin(), marked.end(), [&](auto w) {
              return world->trigger_of(w) == fid;
            });
          } else if (fid) {
            const auto ws = words(texts[k]);
            v = std::any_of(ws.begin(), ws.end(), [&](auto w) { return world->trigger_of(w) == fid; });
          }
          break;
        case PolicyKind::random: {
          const auto h = hash_of(p.seed, z, texts[k], fuzz);
          v = static_cast<int>(h & 1);
          conf = 0.5 + 0.45 * unit(splitmix64(h));
          break;
        }
        default: {
          const auto h = hash_of(0xB11D, texts[k], {}, fuzz);
          v = static_cast<int>(h & 1);
          conf = 0.5 + 0.45 * unit(splitmix64(h));
        }
      }
      list.emplace_back(v, conf);
      reply += (k ? "," : "") + std::to_string(v);
    }
    return reply + "]";
  }

  std::string explain_intervention(const json& body, const std::string& content) {
    const Policy p = policy_for(body, options.explainer);
    const auto& features = world->features();
    const std::string_view own = std::string_view(content).substr(prompts::intervention_explainer_preamble().size());
    if (p.kind == PolicyKind::oracle) {
      std::map<std::uint32_t, int> votes;
      std::size_t pos = 0;
      while ((pos = own.find("Most increased tokens:", pos)) != std::string_view::npos) {
        const auto line_end = own.find('\n', pos);
        const auto line = own.substr(pos, line_end == std::string_view::npos ? std::string_view::npos : line_end - pos);
        std::size_t q = 0;
        while ((q = line.find('\'', q)) != std::string_view::npos) {
          const auto e = line.find('\'', q + 1);
          if (e == std::string_view::npos) break;
          if (auto fid = world->boost_of(bare_word(line.substr(q + 1, e - q - 1)))) ++votes[*fid];
          q = e + 1;
        }
        pos += 1;
      }
      if (votes.empty()) return "interpretation: nothing specific";
      auto best = std::max_element(votes.begin(), votes.end(),
                                   [](const auto& a, const auto& b) { return a.second < b.second; });
      return "interpretation: " + features[best->first].output_description;
    }
    if (p.kind == PolicyKind::random) {
      return "interpretation: " + features[hash_of(p.seed, own) % features.size()].output_description;
    }
    return "interpretation: common words";
  }

  // --- completions ---------------------------------------------------------

  std::string handle_completions(const json& body, const FaultConfig& f) {
    if (!body.at("prompt").is_string()) throw HttpError{400, {{"error", {{"message", "prompt must be a string"}}}}};
    const std::string prompt = body.at("prompt").get<std::string>();
    const bool echo = body.value("echo", false);
    const int top_k = body.contains("logprobs") && body["logprobs"].is_number_integer() ? body["logprobs"].get<int>() : 0;
    if (echo && !f.echo_supported) {
      throw HttpError{400, {{"error", {{"message", "echo is not supported with logprobs for this model"},
                                       {"type", "invalid_request_error"}}}}};
    }
    const Policy p = policy_for(body, options.base);
    const auto tokens = tokenize(prompt);
    const std::size_t n = tokens.size();
    std::vector<double> lp(n);
    std::vector<std::vector<std::pair<std::string, double>>> top(n);
    for (std::size_t i = 0; i < n; ++i) lp[i] = -(1.0 + 4.0 * unit(hash_of(0x6E, tokens[i].text, {}, i)));

    if (p.kind == PolicyKind::uniform) {
      for (std::size_t i = 0; i < n; ++i) {
        lp[i] = -std::log(11.0);
        const std::string ws(leading_space(tokens[i].text));
        for (int v = 0; v <= 10; ++v) top[i].emplace_back(ws + std::to_string(v), -std::log(11.0));
      }
    } else if (prompt.starts_with(prompts::simulation_preamble())) {
      fill_simulation(p, prompt, tokens, lp, top);
    } else if (prompt.starts_with(prompts::intervention_scorer_fewshot())) {
      fill_amplified(p, prompt, tokens, lp);
    } else if (prompt.starts_with(prompts::surprisal_fewshot())) {
      fill_surprisal(p, prompt, tokens, lp);
    }

    // Written directly: this is the hot path of every logprob-based scorer.
    std::string o = R"({"object":"text_completion","model":)";
    append_string(o, body.value("model", ""));
    o += R"(,"choices":[{"index":0,"text":)";
    append_string(o, echo ? prompt : std::string());
    o += R"(,"logprobs":{"tokens":[)";
    for (std::size_t i = 0; echo && i < n; ++i) {
      if (i) o += ',';
      append_string(o, tokens[i].text);
    }
    o += R"(],"token_logprobs":[)";
    for (std::size_t i = 0; echo && i < n; ++i) {
      if (i) o += ',';
      if (i == 0) {
        o += "null";
      } else {
        append_number(o, lp[i]);
      }
    }
    o += R"(],"text_offset":[)";
    for (std::size_t i = 0; echo && i < n; ++i) {
      if (i) o += ',';
      o += std::to_string(tokens[i].offset);
    }
    o += R"(],"top_logprobs":)";
    if (top_k > 0 && echo) {
      o += '[';
      for (std::size_t i = 0; i < n; ++i) {
        if (i) o += ',';
        if (i == 0) {
          o += "null";
          continue;
        }
        auto alts = top[i];
        if (alts.empty()) alts.emplace_back(std::string(tokens[i].text), lp[i]);
        std::stable_sort(alts.begin(), alts.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
        if (alts.size() > static_cast<std::size_t>(top_k)) alts.resize(top_k);
        o += '{';
        for (std::size_t k = 0; k < alts.size(); ++k) {
          if (k) o += ',';
          append_string(o, alts[k].first);
          o += ':';
          append_number(o, alts[k].second);
        }
        o += '}';
      }
      o += ']';
    } else {
      o += echo ? "null" : "[]";
    }
    o += R"(},"finish_reason":"length"}],"usage":{"prompt_tokens":)" + std::to_string(n) +
         R"(,"completion_tokens":0,"total_tokens":)" + std::to_string(n) + "}}";
    return o;
  }

  void fill_simulation(const Policy& p, const std::string& prompt, const std::vector<MockToken>& tokens,
                       std::vector<double>& lp, std::vector<std::vector<std::pair<std::string, double>>>& top) {
    const auto own_at = prompt.rfind("\nNeuron: ");
    const std::string z(between(prompt, "\nNeuron: ", "\n", own_at));
    const auto fid = world->feature_for_description(z);
    const std::uint64_t prompt_hash = fnv1a64(prompt);
    std::size_t slot = 0;
    for (std::size_t i = 1; i < tokens.size(); ++i) {
      if (tokens[i].offset < own_at) continue;
      const auto ws = leading_space(tokens[i].text);
      if (ws != "\t" || tokens[i].text.substr(ws.size()) != prompts::kSimulationUnknown) continue;
      const std::string_view word = bare_word(tokens[i - 1].text);
      std::array<double, 11> dist{};
      switch (p.kind) {
        case PolicyKind::oracle:
          if (fid && world->trigger_of(word) == fid) {
            dist[10] = 0.97;
            dist[9] = 0.03;
          } else {
            const double p1 = 0.05 + 0.1 * unit(hash_of(0x51, z, word, prompt_hash + slot));
            dist[0] = 1.0 - p1;
            dist[1] = p1;
          }
          break;
        case PolicyKind::constant:
          dist[p.level] = 1.0;
          break;
        default: {
          double total = 0.0;
          for (int v = 0; v <= 10; ++v) {
            const double u = unit(hash_of(p.seed ^ 0x5A, {}, {}, prompt_hash + 131 * slot + v));
            dist[v] = u * u * u;
            total += dist[v];
          }
          for (auto& d : dist) d /= total;
        }
      }
      lp[i] = std::log(0.001);
      for (int v = 0; v <= 10; ++v) {
        if (dist[v] > 0.0) top[i].emplace_back("\t" + std::to_string(v), std::log(dist[v]));
      }
      ++slot;
    }
  }

  void fill_amplified(const Policy& p, const std::string& prompt, const std::vector<MockToken>& tokens,
                      std::vector<double>& lp) {
    const auto pstart = prompt.rfind("<PASSAGE>\n");
    const std::string tail = "\n\n" + std::string(prompts::kAmplifiedPhrase) + " \"";
    const auto pend = prompt.find(tail, pstart);
    if (pstart == std::string::npos || pend == std::string::npos) return;
    const std::string_view passage = std::string_view(prompt).substr(pstart + 10, pend - pstart - 10);
    const std::size_t z_begin = pend + tail.size();
    const std::size_t z_end = prompt.size() - (prompt.ends_with("\"") ? 1 : 0);
    std::set<std::string_view> passage_words;
    for (auto w : words(passage)) passage_words.insert(w);
    std::size_t k = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const std::size_t end = tokens[i].offset + tokens[i].text.size();
      if (end <= z_begin || tokens[i].offset >= z_end) continue;
      switch (p.kind) {
        case PolicyKind::constant:
          lp[i] = -1.0;
          break;
        case PolicyKind::oracle:
          lp[i] = -(1.0 + 2.0 * unit(hash_of(0xA1, tokens[i].text, {}, k)));
          if (auto w = bare_word(tokens[i].text); !w.empty() && passage_words.count(w)) lp[i] += 1.0;
          break;
        default:
          lp[i] = -(1.0 + 2.0 * unit(hash_of(0xA1, tokens[i].text, {}, k))) +
                  (unit(hash_of(p.seed ^ 0xB1, passage, tokens[i].text, k)) - 0.5);
      }
      ++k;
    }
  }

  void fill_surprisal(const Policy& p, const std::string& prompt, const std::vector<MockToken>& tokens,
                      std::vector<double>& lp) {
    const std::string marker = "\n\nSentences: \n\n``";
    const auto m = prompt.rfind(marker);
    const auto d = prompt.rfind("Description: \n\n", m);
    if (m == std::string::npos || d == std::string::npos) return;
    const std::string_view description = std::string_view(prompt).substr(d + 15, m - d - 15);
    const std::size_t s_begin = m + marker.size();
    const std::string_view sentence = std::string_view(prompt).substr(s_begin);
    bool planted = false;
    if (p.kind == PolicyKind::oracle) {
      if (const auto fid = world->feature_for_description(description)) {
        for (auto w : words(sentence)) planted = planted || world->trigger_of(w) == fid;
      }
    }
    std::size_t k = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (tokens[i].offset + tokens[i].text.size() <= s_begin) continue;
      switch (p.kind) {
        case PolicyKind::constant:
          lp[i] = -1.0;
          break;
        case PolicyKind::oracle:
          lp[i] = -(2.0 + 6.0 * unit(hash_of(0x5E, tokens[i].text, {}, k))) + (planted ? 1.0 : 0.0);
          break;
        default:
          lp[i] = -(2.0 + 6.0 * unit(hash_of(0x5E, tokens[i].text, {}, k))) +
                  (unit(hash_of(p.seed ^ 0xB2, description, sentence, k)) - 0.5);
      }
      ++k;
    }
  }

  // --- embeddings ----------------------------------------------------------

  std::vector<double> hash_vector(std::uint64_t seed, std::string_view text) const {
    Rng rng(hash_of(seed, text));
    std::vector<double> v(options.embedding_dim);
    double norm = 0.0;
    for (auto& x : v) {
      x = rng.normal();
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (auto& x : v) x /= norm;
    return v;
  }

  std::vector<double> feature_vector(std::uint32_t fid) const {
    if (fid >= options.embedding_dim) return hash_vector(0xFEA7 + fid, {});
    std::vector<double> v(options.embedding_dim, 0.0);
    v[fid] = 1.0;
    return v;
  }

  std::vector<double> embed_one(const Policy& p, const std::string& text) const {
    if (p.kind != PolicyKind::oracle) return hash_vector(p.seed ^ 0xE0, text);
    if (text.starts_with("Instruct: Retrieve sentences")) {
      const auto q = text.find("Query: ");
      const std::string z = q == std::string::npos ? std::string() : text.substr(q + 7);
      if (auto fid = world->feature_for_description(z)) return feature_vector(*fid);
      return hash_vector(0xE1, text);
    }
    std::set<std::uint32_t> present;
    for (auto w : words(text)) {
      if (auto fid = world->trigger_of(w)) present.insert(*fid);
    }
    auto v = hash_vector(0xE2, text);
    if (present.empty()) return v;
    for (auto& x : v) x *= 0.5;
    for (auto fid : present) {
      const auto fv = feature_vector(fid);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] += fv[i];
    }
    return v;
  }

  json handle_embeddings(const json& body, const FaultConfig&) {
    std::vector<std::string> inputs;
    const auto& in = body.at("input");
    if (in.is_string()) {
      inputs.push_back(in.get<std::string>());
    } else {
      inputs = in.get<std::vector<std::string>>();
    }
    const Policy p = policy_for(body, options.embedder);
    json data = json::array();
    std::size_t tokens = 0;
    // Reverse order; clients must use "index".
    for (std::size_t r = inputs.size(); r-- > 0;) {
      auto v = embed_one(p, inputs[r]);
      for (auto& x : v) x *= 2.5;
      data.push_back({{"object", "embedding"}, {"index", r}, {"embedding", v}});
      tokens += count_tokens(inputs[r]);
    }
    return {{"object", "list"},
            {"model", body.value("model", "")},
            {"data", data},
            {"usage", {{"prompt_tokens", tokens}, {"total_tokens", tokens}}}};
  }

  // --- subject service -----------------------------------------------------

  double sigma(const PlantedFeature& pf, double s) const {
    const double c = pf.kl_coefficient;
    if (options.subject.curve == KlCurve::quadratic) return c * s * s;
    // p = softmax(0, g), q = softmax(c s, g); KL(p || q)
    const double g = options.subject.logit_gap, x = c * s;
    const double lzp = std::log(1.0 + std::exp(g));
    const double lzq = std::log(std::exp(x) + std::exp(g));
    const double p0 = 1.0 / (1.0 + std::exp(g)), p1 = 1.0 - p0;
    return p0 * ((0.0 - lzp) - (x - lzq)) + p1 * ((g - lzp) - (g - lzq));
  }

  json handle_generate(const json& body, const FaultConfig&) {
    const auto req = GenerateRequest::from_json(body);
    const auto& features = world->features();
    const auto& vocab = world->vocab();
    for (auto t : req.prompt) {
      if (t >= vocab.size()) throw HttpError{400, {{"error", {{"message", "token id out of range"}}}}};
    }
    double kl = 0.0;
    const PlantedFeature* pf = nullptr;
    if (req.intervention) {
      if (req.intervention->feature_id >= features.size()) {
        throw HttpError{400, {{"error", {{"message", "invalid feature"}}}}};
      }
      pf = &features[req.intervention->feature_id];
      const double s = req.intervention->mode == InterventionMode::additive
                           ? req.intervention->strength
                           : (req.prompt.empty() ? 0.0 : world->base_value(pf->id, req.prompt.back()));
      kl = s == 0.0 ? 0.0 : sigma(*pf, s);
    }
    const double q = pf && options.subject.steer ? 1.0 - std::exp(-kl) : 0.0;

    std::string prompt_bytes;
    for (auto t : req.prompt) prompt_bytes.append(reinterpret_cast<const char*>(&t), sizeof t);
    const std::uint64_t ph = fnv1a64(prompt_bytes);

    GenerateResponse out;
    Rng rng(mix_seed(req.seed, ph));
    const auto& filler = world->filler();
    for (int i = 0; i < req.max_new_tokens; ++i) {
      const double u = rng.uniform();
      const auto fill = filler[rng.below(filler.size())];
      const auto boost = pf ? pf->boosts[rng.below(pf->boosts.size())] : fill;
      out.tokens.push_back(pf && u < q ? boost : fill);
    }
    out.text = vocab.detokenize(out.tokens);

    if (req.top_delta_k > 0 && pf) {
      std::vector<TokenDelta> deltas;
      double w = 0.5;
      for (auto b : pf->boosts) {
        deltas.push_back({b, vocab.piece(b), q * w});
        w *= 0.5;
      }
      for (int j = 0; j < 5; ++j) {
        const auto t = filler[hash_of(0xDE, {}, {}, ph + j) % filler.size()];
        deltas.push_back({t, vocab.piece(t), 0.004 * unit(hash_of(0xDF, {}, {}, ph + j))});
      }
      std::stable_sort(deltas.begin(), deltas.end(), [](const auto& a, const auto& b) { return a.delta > b.delta; });
      if (deltas.size() > static_cast<std::size_t>(req.top_delta_k)) deltas.resize(req.top_delta_k);
      out.top_deltas = std::move(deltas);
    }
    if (req.return_kl) out.kl = kl;
    return out.to_json();
  }

  json handle_harvest(const json& body, const FaultConfig&) {
    const auto out = body.at("out").get<std::string>();
    if (body.value("token_budget", std::uint64_t{1}) == 0) {
      throw HttpError{400, {{"error", {{"message", "token budget must be positive"}}}}};
    }
    const auto manifest = world->write_cache(out);
    return {{"cache", out}, {"manifest", manifest.to_json()}};
  }

  json handle_baseline(const json& body, const FaultConfig&) {
    const int k = body.value("k", 50);
    return {{"sae_id", "random-topk-" + std::to_string(k)}, {"k", k}};
  }
};

MockServer::MockServer(std::shared_ptr<const PlantedWorld> world, MockOptions options)
    : impl_(std::make_unique<Impl>(std::move(world), std::move(options))) {
  auto& s = impl_->server;
  const std::size_t threads = impl_->options.threads;
  s.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
  s.set_keep_alive_max_count(1'000'000);
  s.set_tcp_nodelay(true);
  // Idle keep-alive connections hold a worker thread until this expires, even across stop().
  s.set_keep_alive_timeout(1);
  s.set_payload_max_length(256ull << 20);
  Impl* m = impl_.get();
  m->route("/v1/chat/completions", m->chat, [m](const json& b, const FaultConfig& f) { return m->handle_chat(b, f); });
  m->route("/v1/completions", m->completions,
           [m](const json& b, const FaultConfig& f) { return m->handle_completions(b, f); });
  m->route("/v1/embeddings", m->embeddings,
           [m](const json& b, const FaultConfig& f) { return m->handle_embeddings(b, f); });
  m->route("/generate", m->generate, [m](const json& b, const FaultConfig& f) { return m->handle_generate(b, f); });
  m->route("/harvest", m->requests, [m](const json& b, const FaultConfig& f) { return m->handle_harvest(b, f); });
  m->route("/baseline", m->requests, [m](const json& b, const FaultConfig& f) { return m->handle_baseline(b, f); });
}

MockServer::~MockServer() { stop(); }

void MockServer::start() {
  if (impl_->thread.joinable()) return;
  impl_->port = impl_->server.bind_to_any_port("127.0.0.1");
  if (impl_->port < 0) throw Error("mock server: could not bind a loopback port");
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

void MockServer::stop() {
  if (!impl_->thread.joinable()) return;
  impl_->server.stop();
  impl_->thread.join();
}

int MockServer::port() const { return impl_->port; }

std::string MockServer::base_url() const { return "http://127.0.0.1:" + std::to_string(impl_->port); }

MockStats MockServer::stats() const {
  return {impl_->requests.load(),   impl_->chat.load(),          impl_->completions.load(),
          impl_->embeddings.load(), impl_->generate.load(),      impl_->faults_injected.load(),
          impl_->max_in_flight.load()};
}

void MockServer::reset_stats() {
  for (auto* c : {&impl_->requests, &impl_->chat, &impl_->completions, &impl_->embeddings, &impl_->generate,
                  &impl_->faults_injected, &impl_->max_in_flight}) {
    c->store(0);
  }
  std::lock_guard lock(impl_->fault_mutex);
  impl_->attempts.clear();
}

void MockServer::set_faults(const FaultConfig& faults) {
  std::lock_guard lock(impl_->fault_mutex);
  impl_->faults = faults;
  impl_->attempts.clear();
}

}  // namespace autointerp::mock
