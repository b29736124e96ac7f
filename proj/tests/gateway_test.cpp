#include "autointerp/gateway.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <thread>

#include "autointerp/error.hpp"
#include "support.hpp"

namespace autointerp {
namespace {

using testing::MockEnv;
using testing::TempDir;

mock::WorldConfig tiny_world() {
  mock::WorldConfig c;
  c.n_features = 4;
  c.contexts_per_feature = 10;
  c.background_contexts = 20;
  return c;
}

ChatRequest hello(const std::string& text = "hello there") {
  ChatRequest r;
  r.messages = {{"user", text}};
  return r;
}

TEST(Gateway, CacheKeyIsCanonical) {
  const auto a = nlohmann::json::parse(R"({"model":"m","messages":[1,2],"temperature":0})");
  const auto b = nlohmann::json::parse(R"({ "temperature": 0, "messages": [1, 2], "model": "m" })");
  EXPECT_EQ(request_cache_key("/v1/chat/completions", a), request_cache_key("/v1/chat/completions", b));
  EXPECT_NE(request_cache_key("/v1/chat/completions", a), request_cache_key("/v1/embeddings", a));
  EXPECT_EQ(request_cache_key("/x", a).size(), 64u);
}

TEST(Gateway, ResponseCacheServesRepeatsWithoutNetwork) {
  MockEnv env(tiny_world());
  TempDir cache;
  auto opts = testing::fast_gateway_options();
  opts.cache_dir = cache.path();
  std::string first;
  {
    Gateway gw(opts);
    first = gw.chat(env.endpoint("oracle"), hello(), "test").text;
    EXPECT_EQ(gw.stats().network_requests, 1u);
  }
  Gateway gw(opts);
  // The base URL is not part of the key, so a dead endpoint still hits.
  const Endpoint dead{"http://127.0.0.1:1", "", "oracle"};
  const auto again = gw.chat(dead, hello(), "test");
  EXPECT_EQ(again.text, first);
  EXPECT_EQ(gw.stats().network_requests, 0u);
  EXPECT_EQ(gw.stats().cache_hits, 1u);
  EXPECT_EQ(gw.ledger().totals().requests, 1u);
}

TEST(Gateway, RetriesRateLimitedRequests) {
  mock::MockOptions mo;
  mo.faults.rate_limit_first = 2;
  MockEnv env(tiny_world(), mo);
  Gateway gw(testing::fast_gateway_options());
  EXPECT_EQ(gw.chat(env.endpoint("oracle"), hello(), "test").text, "ok");
  EXPECT_EQ(gw.stats().retries, 2u);
  EXPECT_EQ(gw.stats().network_requests, 3u);

  auto strict = testing::fast_gateway_options();
  strict.max_retries = 1;
  Gateway gw2(strict);
  EXPECT_THROW(gw2.chat(env.endpoint("oracle"), hello("another body"), "test"), RetryExhaustedError);
}

TEST(Gateway, MalformedBodyRaisesParseErrorWithRawPayload) {
  mock::MockOptions mo;
  mo.faults.malformed_first = 1;
  MockEnv env(tiny_world(), mo);
  TempDir cache;
  auto opts = testing::fast_gateway_options();
  opts.cache_dir = cache.path();
  Gateway gw(opts);
  try {
    gw.chat(env.endpoint("oracle"), hello(), "test");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.raw().rfind("{\"choices\"", 0), 0u) << e.raw();
  }
  // The broken body was not cached; the next call reaches the server.
  EXPECT_EQ(gw.chat(env.endpoint("oracle"), hello(), "test").text, "ok");
  EXPECT_EQ(gw.stats().network_requests, 2u);
}

TEST(Gateway, ClientErrorsAreNotRetried) {
  MockEnv env(tiny_world());
  Gateway gw(testing::fast_gateway_options());
  const Endpoint ep = env.endpoint("oracle");
  EXPECT_THROW(gw.post_json(ep, "/harvest", {{"token_budget", 0}}, "test"), ProviderError);
  EXPECT_EQ(gw.stats().retries, 0u);
}

TEST(Gateway, PromptLogprobsSkipTheFirstToken) {
  MockEnv env(tiny_world());
  Gateway gw(testing::fast_gateway_options());
  const std::string prompt = "one two three four five";
  Usage u;
  const auto tokens = gw.prompt_logprobs(env.endpoint("blind"), prompt, 0, "test", &u);
  ASSERT_EQ(tokens.size(), 4u);
  EXPECT_EQ(tokens[0].token, " two");
  EXPECT_EQ(tokens[0].offset, 3u);
  EXPECT_EQ(tokens[3].offset, 18u);
  for (const auto& t : tokens) EXPECT_LT(t.logprob, 0.0);
  EXPECT_EQ(u.requests, 1u);
  EXPECT_EQ(u.input_tokens, 5u);
}

TEST(Gateway, UniformModelReturnsTopAlternatives) {
  MockEnv env(tiny_world());
  Gateway gw(testing::fast_gateway_options());
  const auto tokens = gw.prompt_logprobs(env.endpoint("uniform"), "a b c", 11, "test");
  ASSERT_EQ(tokens.size(), 2u);
  EXPECT_NEAR(tokens[0].logprob, -std::log(11.0), 1e-12);
  EXPECT_EQ(tokens[0].top.size(), 11u);
}

TEST(Gateway, MissingEchoSupportIsACapabilityError) {
  mock::MockOptions mo;
  mo.faults.echo_supported = false;
  MockEnv env(tiny_world(), mo);
  Gateway gw(testing::fast_gateway_options());
  EXPECT_THROW(gw.prompt_logprobs(env.endpoint("blind"), "a b c", 0, "test"), CapabilityError);
}

TEST(Gateway, EmbeddingsAreUnitNormInInputOrder) {
  MockEnv env(tiny_world());
  Gateway gw(testing::fast_gateway_options());
  std::vector<std::string> docs;
  for (int i = 0; i < 100; ++i) docs.push_back("document number " + std::to_string(i));
  const auto vecs = gw.embed(env.endpoint("blind"), docs, "test");
  ASSERT_EQ(vecs.size(), 100u);
  for (const auto& v : vecs) {
    double n = 0.0;
    for (double x : v) n += x * x;
    EXPECT_NEAR(n, 1.0, 1e-9);
  }
  // The mock answers in reverse order; each vector depends on its text only.
  const std::vector<std::string> one{docs[37]};
  EXPECT_EQ(gw.embed(env.endpoint("blind"), one, "test")[0], vecs[37]);
}

TEST(Gateway, ConcurrencyNeverExceedsTheLimit) {
  mock::MockOptions mo;
  mo.faults.latency = std::chrono::milliseconds(30);
  MockEnv env(tiny_world(), mo);
  auto opts = testing::fast_gateway_options();
  opts.max_in_flight = 3;
  Gateway gw(opts);
  std::vector<std::jthread> threads;
  for (int i = 0; i < 12; ++i) {
    threads.emplace_back([&, i] { gw.chat(env.endpoint("oracle"), hello("probe " + std::to_string(i)), "test"); });
  }
  threads.clear();
  EXPECT_EQ(env.server.stats().chat, 12u);
  EXPECT_LE(env.server.stats().max_in_flight, 3u);
  EXPECT_GE(env.server.stats().max_in_flight, 2u);
}

TEST(Gateway, LedgerTotalsEqualSumOfEntries) {
  MockEnv env(tiny_world());
  Gateway gw(testing::fast_gateway_options());
  gw.chat(env.endpoint("oracle"), hello("x"), "explain");
  gw.chat(env.endpoint("oracle"), hello("y y y"), "detection");
  gw.chat(env.endpoint("blind"), hello("z"), "detection");
  gw.prompt_logprobs(env.endpoint("blind"), "p q r", 0, "surprisal");
  const auto entries = gw.ledger().entries();
  EXPECT_EQ(entries.size(), 4u);
  Usage sum;
  for (const auto& [k, u] : entries) sum += u;
  EXPECT_EQ(sum, gw.ledger().totals());
  EXPECT_EQ(sum.requests, 4u);
  const auto& det = entries.at({"detection", "oracle"});
  EXPECT_GT(det.input_tokens, 0u);
  EXPECT_EQ(UsageLedger::entries_from_json(gw.ledger().to_json()), entries);
}

TEST(Gateway, EnvironmentDefaults) {
  ::setenv("AUTOINTERP_BASE_URL", "http://example.invalid", 1);
  ::setenv("AUTOINTERP_API_KEY", "k", 1);
  const auto ep = with_env_defaults({"", "", "m"});
  EXPECT_EQ(ep.base_url, "http://example.invalid");
  EXPECT_EQ(ep.api_key, "k");
  EXPECT_EQ(with_env_defaults({"http://a", "b", "m"}).base_url, "http://a");
  ::unsetenv("AUTOINTERP_BASE_URL");
  ::unsetenv("AUTOINTERP_API_KEY");
}

}  // namespace
}  // namespace autointerp
