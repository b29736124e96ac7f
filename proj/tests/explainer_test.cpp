#include "autointerp/explainer.hpp"

#include <gtest/gtest.h>

#include "autointerp/error.hpp"
#include "autointerp/prompts.hpp"
#include "support.hpp"

namespace autointerp {
namespace {

using testing::MockEnv;
using testing::TempDir;

std::string marked(const std::vector<std::string>& pieces, std::vector<int> mask,
                   MarkStyle style = MarkStyle::whitespace_outside) {
  auto flags = std::make_unique<bool[]>(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) flags[i] = mask[i] != 0;
  return mark_tokens(pieces, std::span<const bool>(flags.get(), mask.size()), style);
}

std::string strip_marks(std::string s) {
  for (const char* d : {"<<", ">>"}) {
    for (auto p = s.find(d); p != std::string::npos; p = s.find(d)) s.erase(p, 2);
  }
  return s;
}

const std::vector<std::string> kMoon{"and", " he", " was", " over", " the", " moon", " to", " find"};

TEST(MarkTokens, WrapsRunsWithWhitespaceOutside) {
  EXPECT_EQ(marked(kMoon, {0, 0, 0, 1, 1, 1, 0, 0}), "and he was <<over the moon>> to find");
  EXPECT_EQ(marked(kMoon, {1, 0, 1, 0, 0, 0, 0, 1}), "<<and>> he <<was>> over the moon to <<find>>");
  EXPECT_EQ(marked(kMoon, std::vector<int>(8, 0)), "and he was over the moon to find");
}

TEST(MarkTokens, WhitespaceInsideStyle) {
  const std::vector<std::string> pieces{"Patriots", " tight", " end", " Rob"};
  EXPECT_EQ(marked(pieces, {0, 1, 1, 0}, MarkStyle::whitespace_inside), "Patriots<< tight end>> Rob");
}

TEST(MarkTokens, RemovingDelimitersRestoresText) {
  std::string plain;
  for (const auto& p : kMoon) plain += p;
  for (unsigned bits = 0; bits < 256; ++bits) {
    std::vector<int> mask(8);
    for (int i = 0; i < 8; ++i) mask[i] = (bits >> i) & 1;
    EXPECT_EQ(strip_marks(marked(kMoon, mask)), plain);
    EXPECT_EQ(strip_marks(marked(kMoon, mask, MarkStyle::whitespace_inside)), plain);
  }
}

TEST(RenderExample, ActivationLineUsesDisplayLevels) {
  const Vocabulary vocab(kMoon);
  FeatureExample ex;
  ex.tokens = {0, 1, 2, 3, 4, 5, 6, 7};
  ex.activations = {0, 0, 0, 5.0f, 6.0f, 9.0f, 0, 0};
  const auto r = render_example(ex, vocab, 10.0);
  EXPECT_EQ(r.text, "and he was <<over the moon>> to find");
  EXPECT_EQ(r.activations, R"(Activations: ("over", 5), (" the", 6), (" moon", 9))");
  ex.activations.assign(8, 0.0f);
  EXPECT_THROW(render_example(ex, vocab, 10.0), DomainError);
}

TEST(ExplainerPrompt, VariantsShapeTheConversation) {
  const std::vector<RenderedExample> ex{{"a <<b>>", "Activations: (\"b\", 3)"}, {"<<c>> d", "Activations: (\"c\", 10)"}};
  const auto plain = build_explainer_prompt(ex, PromptVariant::plain);
  ASSERT_EQ(plain.size(), 4u);
  EXPECT_EQ(plain[0].role, "system");
  EXPECT_EQ(plain[3].content, "Example 1: a <<b>>\n\nActivations: (\"b\", 3)\n\nExample 2: <<c>> d\n\nActivations: (\"c\", 10)");
  const auto bare = build_explainer_prompt(ex, PromptVariant::no_activations);
  EXPECT_EQ(bare[3].content, "Example 1: a <<b>>\n\nExample 2: <<c>> d");
  EXPECT_EQ(bare[1].content.find("Activations:"), std::string::npos);
  const auto cot = build_explainer_prompt(ex, PromptVariant::cot);
  EXPECT_GT(cot[0].content.size(), plain[0].content.size());
  EXPECT_NE(cot[2].content.find("Step 1."), std::string::npos);
  EXPECT_EQ(parse_prompt_variant("no-activations"), PromptVariant::no_activations);
  EXPECT_THROW(parse_prompt_variant("fancy"), ConfigError);
}

TEST(ParseInterpretation, TakesTheLastMarker) {
  EXPECT_EQ(parse_interpretation("[interpretation]: first\nthinking\n[interpretation]:  Idioms <<here>>  \nextra"),
            "Idioms here");
  EXPECT_EQ(parse_interpretation(prompts::explainer_fewshot_assistant(true)),
            "Common idioms in text conveying positive sentiment.");
  try {
    parse_interpretation("no marker at all");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.raw(), "no marker at all");
  }
  EXPECT_THROW(parse_interpretation("[interpretation]:   "), ParseError);
}

TEST(Interpretation, JsonlRoundTrip) {
  TempDir tmp;
  Interpretation a;
  a.feature_id = 9;
  a.text = "quoted \"text\" and unicode \xc3\xa9";
  a.provenance.sampler = SamplerStrategy::top;
  a.provenance.n_examples = 40;
  a.provenance.window = 32;
  a.provenance.variant = PromptVariant::cot;
  a.provenance.explainer_model = "m";
  Interpretation b;
  b.feature_id = 2;
  b.text = "plain";
  write_interpretations(tmp / "i.jsonl", {a, b});
  const auto back = read_interpretations(tmp / "i.jsonl");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].feature_id, 2u);
  EXPECT_EQ(back[1].to_json(), a.to_json());
  testing::write_file(tmp / "bad.jsonl", "{\"feature_id\": 1}\n");
  EXPECT_THROW(read_interpretations(tmp / "bad.jsonl"), ParseError);
}

TEST(ExplainFeature, OracleRecoversThePlantedDescription) {
  MockEnv env;
  Gateway gw(testing::fast_gateway_options());
  ExplainerConfig cfg;
  for (std::uint32_t f : {0u, 5u}) {
    const auto out = explain_feature(*env.cache, env.world->vocab(), gw, env.endpoint("oracle"), f, cfg);
    ASSERT_EQ(out.status, ExplainStatus::ok) << out.reason;
    EXPECT_EQ(out.attempts, 1);
    EXPECT_EQ(out.interpretation->text, env.world->features()[f].description);
    EXPECT_EQ(out.interpretation->provenance.n_examples, 40u);
    EXPECT_EQ(out.interpretation->provenance.explainer_model, "oracle");
  }
}

TEST(ExplainFeature, RareFeaturesAreSkippedWithoutRequests) {
  MockEnv env;
  Gateway gw(testing::fast_gateway_options());
  ExplainerConfig cfg;
  cfg.min_fires = 100000;
  const auto out = explain_feature(*env.cache, env.world->vocab(), gw, env.endpoint("oracle"), 0, cfg);
  EXPECT_EQ(out.status, ExplainStatus::skipped);
  EXPECT_EQ(out.attempts, 0);
  EXPECT_EQ(gw.stats().network_requests, 0u);
  EXPECT_NE(out.reason.find("below the minimum"), std::string::npos);
}

TEST(ExplainFeature, ReasksAfterUnparseableReplies) {
  mock::MockOptions mo;
  mo.faults.explainer_parse_failures = 2;
  MockEnv env(MockEnv::small_world(), mo);
  Gateway gw(testing::fast_gateway_options());
  ExplainerConfig cfg;
  const auto out = explain_feature(*env.cache, env.world->vocab(), gw, env.endpoint("oracle"), 1, cfg);
  ASSERT_EQ(out.status, ExplainStatus::ok);
  EXPECT_EQ(out.attempts, 3);
  EXPECT_EQ(env.server.stats().chat, 3u);
  EXPECT_EQ(gw.ledger().totals().requests, 3u);

  cfg.max_parse_retries = 1;
  const auto failed = explain_feature(*env.cache, env.world->vocab(), gw, env.endpoint("oracle"), 2, cfg);
  EXPECT_EQ(failed.status, ExplainStatus::failed);
  EXPECT_EQ(failed.attempts, 2);
  EXPECT_FALSE(failed.interpretation.has_value());
}

}  // namespace
}  // namespace autointerp
