#pragma once

// Loopback HTTP server speaking the inference and subject-service protocols
// against a PlantedWorld. Responses are pure functions of the request body
// (and fault counters), never of arrival order.
//
// A request's model name may select the policy for that call: "oracle",
// "random:<seed>", "blind", "constant:<level>", "uniform". Any other name uses
// the role default from MockOptions.

#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

#include "autointerp/mock/world.hpp"

namespace autointerp::mock {

enum class PolicyKind { oracle, random, blind, constant, uniform };

struct Policy {
  PolicyKind kind = PolicyKind::oracle;
  std::uint64_t seed = 0;
  int level = 0;

  static std::optional<Policy> parse(std::string_view name);
};

enum class KlCurve {
  quadratic,    // sigma = c s^2
  logit_shift,  // two-token softmax, logit of token 0 shifted by c s
};

struct SubjectConfig {
  KlCurve curve = KlCurve::quadratic;
  double logit_gap = 1.0;  // clean logits (0, logit_gap) for logit_shift
  bool steer = true;       // intervened generations draw boost tokens
};

struct FaultConfig {
  int rate_limit_first = 0;  // 429s per distinct request body before serving it
  int malformed_first = 0;   // then this many truncated 200 bodies
  int explainer_parse_failures = 0;  // explainer replies without a marker, per conversation
  int judge_bad_replies = 0;         // judge replies without a list, per conversation
  std::chrono::milliseconds latency{0};
  bool echo_supported = true;
};

struct MockOptions {
  Policy explainer;
  Policy judge;
  Policy base;
  Policy embedder;
  SubjectConfig subject;
  FaultConfig faults;
  std::size_t threads = 64;
  std::size_t embedding_dim = 256;  // planted feature directions are orthonormal up to this many features
};

struct MockStats {
  std::uint64_t requests = 0;
  std::uint64_t chat = 0;
  std::uint64_t completions = 0;
  std::uint64_t embeddings = 0;
  std::uint64_t generate = 0;
  std::uint64_t faults_injected = 0;
  std::uint64_t max_in_flight = 0;
};

class MockServer {
 public:
  explicit MockServer(std::shared_ptr<const PlantedWorld> world, MockOptions options = {});
  ~MockServer();
  MockServer(const MockServer&) = delete;
  MockServer& operator=(const MockServer&) = delete;

  /// Binds 127.0.0.1 on a free port and serves on a background thread.
  void start();
  void stop();

  int port() const;
  std::string base_url() const;

  MockStats stats() const;
  void reset_stats();
  void set_faults(const FaultConfig& faults);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace autointerp::mock
