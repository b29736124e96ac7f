#include "autointerp/gateway.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include "autointerp/error.hpp"
#include "httplib.h"

namespace autointerp {

namespace fs = std::filesystem;
using nlohmann::json;

Endpoint with_env_defaults(Endpoint ep) {
  if (ep.base_url.empty()) {
    if (const char* v = std::getenv("AUTOINTERP_BASE_URL")) ep.base_url = v;
  }
  if (ep.api_key.empty()) {
    if (const char* v = std::getenv("AUTOINTERP_API_KEY")) ep.api_key = v;
  }
  return ep;
}

json Usage::to_json() const {
  return {{"input_tokens", input_tokens},
          {"output_tokens", output_tokens},
          {"cached_input_tokens", cached_input_tokens},
          {"requests", requests}};
}

Usage Usage::from_json(const json& j) {
  Usage u;
  u.input_tokens = j.value("input_tokens", std::uint64_t{0});
  u.output_tokens = j.value("output_tokens", std::uint64_t{0});
  u.cached_input_tokens = j.value("cached_input_tokens", std::uint64_t{0});
  u.requests = j.value("requests", std::uint64_t{0});
  return u;
}

void UsageLedger::record(const std::string& method, const std::string& model, const Usage& usage) {
  std::lock_guard lock(mutex_);
  entries_[{method, model}] += usage;
}

std::map<UsageLedger::Key, Usage> UsageLedger::entries() const {
  std::lock_guard lock(mutex_);
  return entries_;
}

Usage UsageLedger::totals() const {
  std::lock_guard lock(mutex_);
  Usage total;
  for (const auto& [_, u] : entries_) total += u;
  return total;
}

json UsageLedger::to_json() const {
  json arr = json::array();
  for (const auto& [key, u] : entries()) {
    auto j = u.to_json();
    j["method"] = key.first;
    j["model"] = key.second;
    arr.push_back(std::move(j));
  }
  return arr;
}

std::map<UsageLedger::Key, Usage> UsageLedger::entries_from_json(const json& j) {
  std::map<Key, Usage> out;
  for (const auto& e : j) {
    out[{e.at("method").get<std::string>(), e.at("model").get<std::string>()}] += Usage::from_json(e);
  }
  return out;
}

namespace {

std::string cache_key_for_payload(std::string_view path, std::string_view payload) {
  std::string material(path);
  material += '\n';
  material += payload;
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(material.data(), material.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  hex.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    hex += kHex[digest[i] >> 4];
    hex += kHex[digest[i] & 0xf];
  }
  return hex;
}

}  // namespace

std::string request_cache_key(std::string_view path, const json& body) { return cache_key_for_payload(path, body.dump()); }

// ---------------------------------------------------------------------------

namespace {

struct ParsedUrl {
  std::string origin;  // scheme://host[:port]
  std::string prefix;  // path prefix, no trailing slash
};

ParsedUrl parse_base_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw ConfigError("base URL '" + url + "' must start with http:// or https://");
  }
  const auto path_start = url.find('/', scheme_end + 3);
  ParsedUrl out;
  out.origin = url.substr(0, path_start);
  if (path_start != std::string::npos) {
    out.prefix = url.substr(path_start);
    while (!out.prefix.empty() && out.prefix.back() == '/') out.prefix.pop_back();
  }
  return out;
}

bool retryable_status(int status) { return status == 429 || status >= 500; }

Usage parse_usage(const json& j) {
  Usage u;
  u.requests = 1;
  if (auto it = j.find("usage"); it != j.end() && it->is_object()) {
    u.input_tokens = it->value("prompt_tokens", std::uint64_t{0});
    u.output_tokens = it->value("completion_tokens", std::uint64_t{0});
    if (auto d = it->find("prompt_tokens_details"); d != it->end() && d->is_object()) {
      u.cached_input_tokens = d->value("cached_tokens", std::uint64_t{0});
    }
  }
  return u;
}

json parse_body(const std::string& raw) {
  try {
    return json::parse(raw);
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed provider response: ") + e.what(), raw);
  }
}

bool mentions_capability(const std::string& body) {
  return body.find("echo") != std::string::npos || body.find("logprobs") != std::string::npos;
}

}  // namespace

struct Gateway::ConnectionPool {
  std::mutex mutex;
  std::map<std::string, std::vector<std::unique_ptr<httplib::Client>>> idle;

  std::unique_ptr<httplib::Client> checkout(const std::string& origin, std::chrono::milliseconds timeout) {
    {
      std::lock_guard lock(mutex);
      auto& list = idle[origin];
      if (!list.empty()) {
        auto c = std::move(list.back());
        list.pop_back();
        return c;
      }
    }
    auto client = std::make_unique<httplib::Client>(origin);
    client->set_keep_alive(true);
    client->set_tcp_nodelay(true);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout - secs);
    client->set_connection_timeout(secs.count(), usecs.count());
    client->set_read_timeout(secs.count(), usecs.count());
    client->set_write_timeout(secs.count(), usecs.count());
    return client;
  }

  void checkin(const std::string& origin, std::unique_ptr<httplib::Client> client) {
    std::lock_guard lock(mutex);
    idle[origin].push_back(std::move(client));
  }
};

void Gateway::Limiter::acquire() {
  std::unique_lock lock(mutex_);
  cv_.wait(lock, [&] { return available_ > 0; });
  --available_;
}

void Gateway::Limiter::release() {
  {
    std::lock_guard lock(mutex_);
    ++available_;
  }
  cv_.notify_one();
}

Gateway::Gateway(GatewayOptions options)
    : options_(std::move(options)),
      limiter_(std::max<std::size_t>(options_.max_in_flight, 1)),
      pool_(std::make_unique<ConnectionPool>()) {
  if (options_.cache_dir) fs::create_directories(*options_.cache_dir);
}

Gateway::~Gateway() = default;

GatewayStats Gateway::stats() const {
  return {network_requests_.load(), cache_hits_.load(), retries_.load()};
}

std::optional<std::string> Gateway::cache_lookup(const std::string& key) const {
  if (!options_.cache_dir) return std::nullopt;
  const fs::path path = *options_.cache_dir / key.substr(0, 2) / (key + ".json");
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void Gateway::cache_store(const std::string& key, const std::string& raw) const {
  if (!options_.cache_dir) return;
  const fs::path dir = *options_.cache_dir / key.substr(0, 2);
  fs::create_directories(dir);
  std::ostringstream tmp_name;
  tmp_name << key << ".tmp." << std::this_thread::get_id();
  const fs::path tmp = dir / tmp_name.str();
  {
    std::ofstream out(tmp, std::ios::binary);
    out.write(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (!out) return;  // an unwritable cache only costs a re-request
  }
  std::error_code ec;
  fs::rename(tmp, dir / (key + ".json"), ec);
  if (ec) fs::remove(tmp, ec);
}

Gateway::Fetched Gateway::fetch(const Endpoint& ep, const std::string& path, const json& body) {
  const std::string payload = body.dump();
  const std::string key = cache_key_for_payload(path, payload);
  if (auto hit = cache_lookup(key)) {
    ++cache_hits_;
    json parsed = parse_body(*hit);
    return {std::move(*hit), std::move(parsed)};
  }
  if (ep.base_url.empty()) throw ConfigError("no base URL configured for model '" + ep.model + "'");
  const auto url = parse_base_url(ep.base_url);
  httplib::Headers headers;
  if (!ep.api_key.empty()) headers.emplace("Authorization", "Bearer " + ep.api_key);

  std::string last_error;
  for (int attempt = 0;; ++attempt) {
    limiter_.acquire();
    auto client = pool_->checkout(url.origin, options_.timeout);
    ++network_requests_;
    auto result = client->Post(url.prefix + path, headers, payload, "application/json");
    const bool transport_ok = static_cast<bool>(result);
    int status = 0;
    std::string response_body;
    if (transport_ok) {
      status = result->status;
      response_body = std::move(result->body);
      pool_->checkin(url.origin, std::move(client));
    } else {
      last_error = "transport error: " + httplib::to_string(result.error());
    }
    limiter_.release();

    if (transport_ok && status >= 200 && status < 300) {
      // Only syntactically valid JSON is cached, stored verbatim.
      json parsed = parse_body(response_body);
      cache_store(key, response_body);
      return {std::move(response_body), std::move(parsed)};
    }
    if (transport_ok && !retryable_status(status)) throw ProviderError(status, response_body);
    if (transport_ok) last_error = "HTTP " + std::to_string(status) + ": " + response_body;
    if (attempt >= options_.max_retries) {
      throw RetryExhaustedError("retry budget exhausted after " + std::to_string(attempt + 1) +
                                " attempts (" + path + "): " + last_error);
    }
    ++retries_;
    const auto backoff = std::min<std::chrono::milliseconds::rep>(
        options_.max_backoff.count(), options_.initial_backoff.count() << std::min(attempt, 30));
    std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
  }
}

namespace {

std::vector<TopLogprob> parse_top_object(const json& j) {
  std::vector<TopLogprob> out;
  if (!j.is_object()) return out;
  for (const auto& [token, lp] : j.items()) out.push_back({token, lp.get<double>()});
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.logprob > b.logprob; });
  return out;
}

}  // namespace

ChatResponse Gateway::chat(const Endpoint& ep, const ChatRequest& request, const std::string& method) {
  json messages = json::array();
  for (const auto& m : request.messages) messages.push_back({{"role", m.role}, {"content", m.content}});
  json body = {{"model", ep.model},
               {"messages", messages},
               {"temperature", request.temperature},
               {"max_tokens", request.max_tokens}};
  if (request.top_logprobs) {
    body["logprobs"] = true;
    body["top_logprobs"] = *request.top_logprobs;
  }
  if (request.seed) body["seed"] = *request.seed;

  auto [raw, j] = fetch(ep, "/v1/chat/completions", body);
  ChatResponse out;
  try {
    const auto& choice = j.at("choices").at(0);
    out.text = choice.at("message").at("content").get<std::string>();
    if (auto lp = choice.find("logprobs"); lp != choice.end() && lp->is_object()) {
      if (auto content = lp->find("content"); content != lp->end() && content->is_array()) {
        std::vector<TokenLogprob> tokens;
        for (const auto& t : *content) {
          TokenLogprob tl;
          tl.token = t.at("token").get<std::string>();
          tl.logprob = t.at("logprob").get<double>();
          if (auto top = t.find("top_logprobs"); top != t.end() && top->is_array()) {
            for (const auto& a : *top) tl.top.push_back({a.at("token").get<std::string>(), a.at("logprob").get<double>()});
          }
          tokens.push_back(std::move(tl));
        }
        out.logprobs = std::move(tokens);
      }
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("unexpected chat response shape: ") + e.what(), raw);
  }
  out.usage = parse_usage(j);
  ledger_.record(method, ep.model, out.usage);
  return out;
}

CompletionResponse Gateway::complete(const Endpoint& ep, const CompletionRequest& request,
                                     const std::string& method) {
  json body = {{"model", ep.model},
               {"prompt", request.prompt},
               {"echo", request.echo},
               {"max_tokens", request.max_tokens},
               {"temperature", request.temperature},
               {"logprobs", request.top_logprobs}};
  auto [raw, j] = fetch(ep, "/v1/completions", body);
  CompletionResponse out;
  try {
    const auto& choice = j.at("choices").at(0);
    out.text = choice.value("text", "");
    auto lp = choice.find("logprobs");
    if (lp != choice.end() && lp->is_object()) {
      const auto& tokens = lp->at("tokens");
      const auto& token_lps = lp->at("token_logprobs");
      const auto& offsets = lp->at("text_offset");
      const auto top = lp->find("top_logprobs");
      for (std::size_t i = 0; i < tokens.size(); ++i) {
        TokenLogprob t;
        t.token = tokens.at(i).get<std::string>();
        if (!token_lps.at(i).is_null()) t.logprob = token_lps.at(i).get<double>();
        if (top != lp->end() && top->is_array() && i < top->size()) t.top = parse_top_object(top->at(i));
        out.tokens.push_back(std::move(t));
        out.text_offsets.push_back(offsets.at(i).get<std::size_t>());
      }
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("unexpected completion response shape: ") + e.what(), raw);
  }
  out.usage = parse_usage(j);
  ledger_.record(method, ep.model, out.usage);
  return out;
}

std::vector<PromptToken> Gateway::prompt_logprobs(const Endpoint& ep, const std::string& prompt, int top_k,
                                                  const std::string& method, Usage* usage) {
  CompletionResponse r;
  try {
    r = complete(ep, {.prompt = prompt, .echo = true, .max_tokens = 0, .top_logprobs = top_k}, method);
  } catch (const ProviderError& e) {
    if ((e.status() == 400 || e.status() == 404 || e.status() == 422 || e.status() == 501) &&
        mentions_capability(e.body())) {
      throw CapabilityError("endpoint does not support echoed prompt logprobs: " + e.body());
    }
    throw;
  }
  if (usage) *usage += r.usage;
  if (r.tokens.empty()) throw CapabilityError("endpoint returned no prompt logprobs (echo unsupported?)");
  std::vector<PromptToken> out;
  out.reserve(r.tokens.size());
  for (std::size_t i = 0; i < r.tokens.size(); ++i) {
    if (!r.tokens[i].logprob) continue;
    out.push_back({r.tokens[i].token, r.text_offsets[i], *r.tokens[i].logprob, r.tokens[i].top});
  }
  return out;
}

std::vector<std::vector<double>> Gateway::embed(const Endpoint& ep, std::span<const std::string> texts,
                                                const std::string& method, Usage* usage) {
  if (texts.empty()) throw DomainError("embed: no texts");
  json body = {{"model", ep.model}, {"input", std::vector<std::string>(texts.begin(), texts.end())}};
  auto [raw, j] = fetch(ep, "/v1/embeddings", body);
  std::vector<std::vector<double>> out(texts.size());
  try {
    const auto& data = j.at("data");
    if (data.size() != texts.size()) {
      throw ParseError("embedding count " + std::to_string(data.size()) + " != " + std::to_string(texts.size()), raw);
    }
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto idx = data[i].value("index", i);
      if (idx >= out.size() || !out[idx].empty()) throw ParseError("bad embedding index", raw);
      auto v = data[i].at("embedding").get<std::vector<double>>();
      double norm = 0.0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      if (!(norm > 0.0)) throw ParseError("zero embedding vector", raw);
      for (double& x : v) x /= norm;
      out[idx] = std::move(v);
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("unexpected embeddings response shape: ") + e.what(), raw);
  }
  const Usage u = parse_usage(j);
  ledger_.record(method, ep.model, u);
  if (usage) *usage += u;
  return out;
}

json Gateway::post_json(const Endpoint& ep, const std::string& path, const json& body, const std::string& method) {
  auto [raw, j] = fetch(ep, path, body);
  Usage u;
  u.requests = 1;
  ledger_.record(method, ep.model, u);
  return j;
}

}  // namespace autointerp
