#pragma once

// Single path to external inference over the OpenAI-style HTTP protocol:
// chat completions, echoed-prompt completions with logprobs, embeddings and
// arbitrary JSON posts (subject service). Adds bounded concurrency, retries
// with capped exponential backoff, a persistent response cache keyed by the
// canonical request, and per-(method, model) usage metering.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace autointerp {

struct Endpoint {
  std::string base_url;  // scheme://host[:port][/prefix], without the /v1 route
  std::string api_key;
  std::string model;
};

/// Fills base_url and api_key from AUTOINTERP_BASE_URL / AUTOINTERP_API_KEY
/// where the given endpoint leaves them empty.
Endpoint with_env_defaults(Endpoint ep);

struct Message {
  std::string role;
  std::string content;
};

struct Usage {
  std::uint64_t input_tokens = 0;
  std::uint64_t output_tokens = 0;
  std::uint64_t cached_input_tokens = 0;
  std::uint64_t requests = 0;

  Usage& operator+=(const Usage& o) {
    input_tokens += o.input_tokens;
    output_tokens += o.output_tokens;
    cached_input_tokens += o.cached_input_tokens;
    requests += o.requests;
    return *this;
  }
  bool operator==(const Usage&) const = default;
  nlohmann::json to_json() const;
  static Usage from_json(const nlohmann::json& j);
};

/// Accumulated usage per (method, model). Thread-safe.
class UsageLedger {
 public:
  using Key = std::pair<std::string, std::string>;

  void record(const std::string& method, const std::string& model, const Usage& usage);
  std::map<Key, Usage> entries() const;
  Usage totals() const;

  nlohmann::json to_json() const;
  static std::map<Key, Usage> entries_from_json(const nlohmann::json& j);

 private:
  mutable std::mutex mutex_;
  std::map<Key, Usage> entries_;
};

struct ChatRequest {
  std::vector<Message> messages;
  double temperature = 0.0;
  int max_tokens = 512;
  std::optional<int> top_logprobs;
  std::optional<std::uint64_t> seed;
};

struct TopLogprob {
  std::string token;
  double logprob = 0.0;
};

struct TokenLogprob {
  std::string token;
  std::optional<double> logprob;  // the first echoed prompt token has none
  std::vector<TopLogprob> top;
};

struct ChatResponse {
  std::string text;
  std::optional<std::vector<TokenLogprob>> logprobs;
  Usage usage;
};

struct CompletionRequest {
  std::string prompt;
  bool echo = true;
  int max_tokens = 0;
  int top_logprobs = 0;
  double temperature = 0.0;
};

struct CompletionResponse {
  std::string text;
  std::vector<TokenLogprob> tokens;
  std::vector<std::size_t> text_offsets;
  Usage usage;
};

/// One scored prompt token from an echoed completion.
struct PromptToken {
  std::string token;
  std::size_t offset = 0;  // byte offset into the prompt
  double logprob = 0.0;
  std::vector<TopLogprob> top;
};

struct GatewayOptions {
  std::size_t max_in_flight = 16;
  int max_retries = 3;
  std::chrono::milliseconds timeout{120'000};
  std::chrono::milliseconds initial_backoff{500};
  std::chrono::milliseconds max_backoff{8'000};
  std::optional<std::filesystem::path> cache_dir;
};

struct GatewayStats {
  std::uint64_t network_requests = 0;
  std::uint64_t cache_hits = 0;
  std::uint64_t retries = 0;
};

/// Stable cache key: SHA-256 over the route and the canonical JSON body
/// (sorted keys, no insignificant whitespace). Independent of base URL and
/// credentials.
std::string request_cache_key(std::string_view path, const nlohmann::json& body);

class Gateway {
 public:
  explicit Gateway(GatewayOptions options = {});
  ~Gateway();
  Gateway(const Gateway&) = delete;
  Gateway& operator=(const Gateway&) = delete;

  ChatResponse chat(const Endpoint& ep, const ChatRequest& request, const std::string& method);

  CompletionResponse complete(const Endpoint& ep, const CompletionRequest& request,
                              const std::string& method);

  /// Echoes `prompt` and returns logprobs for every prompt token that has
  /// one (the first is skipped). Throws CapabilityError if the endpoint
  /// cannot echo prompt logprobs.
  std::vector<PromptToken> prompt_logprobs(const Endpoint& ep, const std::string& prompt, int top_k,
                                           const std::string& method, Usage* usage = nullptr);

  /// One L2-normalized vector per text, in input order.
  std::vector<std::vector<double>> embed(const Endpoint& ep, std::span<const std::string> texts,
                                         const std::string& method, Usage* usage = nullptr);

  /// POSTs a JSON body to an arbitrary route with the same retry, cache and
  /// concurrency handling. Usage is counted as requests only.
  nlohmann::json post_json(const Endpoint& ep, const std::string& path, const nlohmann::json& body,
                           const std::string& method);

  UsageLedger& ledger() noexcept { return ledger_; }
  const UsageLedger& ledger() const noexcept { return ledger_; }
  GatewayStats stats() const;
  const GatewayOptions& options() const noexcept { return options_; }

 private:
  struct Fetched {
    std::string raw;
    nlohmann::json body;
  };
  Fetched fetch(const Endpoint& ep, const std::string& path, const nlohmann::json& body);
  std::optional<std::string> cache_lookup(const std::string& key) const;
  void cache_store(const std::string& key, const std::string& raw) const;

  class Limiter {
   public:
    explicit Limiter(std::size_t n) : available_(n) {}
    void acquire();
    void release();

   private:
    std::mutex mutex_;
    std::condition_variable cv_;
    std::size_t available_;
  };

  struct ConnectionPool;

  GatewayOptions options_;
  Limiter limiter_;
  std::unique_ptr<ConnectionPool> pool_;
  UsageLedger ledger_;
  std::atomic<std::uint64_t> network_requests_{0};
  std::atomic<std::uint64_t> cache_hits_{0};
  std::atomic<std::uint64_t> retries_{0};
};

}  // namespace autointerp
