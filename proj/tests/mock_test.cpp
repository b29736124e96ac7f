#include <gtest/gtest.h>

#include <cmath>

#include "autointerp/mock/server.hpp"
#include "autointerp/mock/tokenizer.hpp"
#include "autointerp/mock/world.hpp"
#include "autointerp/subject_protocol.hpp"
#include "support.hpp"

namespace autointerp::mock {
namespace {

using autointerp::testing::MockEnv;

TEST(MockTokenizer, WhitespaceAttachesToTheFollowingWord) {
  const auto t = tokenize("  hello, world\tfoo \n");
  ASSERT_EQ(t.size(), 4u);
  EXPECT_EQ(t[0].text, "  hello,");
  EXPECT_EQ(t[1].text, " world");
  EXPECT_EQ(t[2].text, "\tfoo");
  EXPECT_EQ(t[3].text, " \n");
  EXPECT_EQ(t[2].offset, 14u);
  std::string joined;
  for (const auto& x : t) joined += x.text;
  EXPECT_EQ(joined, "  hello, world\tfoo \n");
  EXPECT_TRUE(tokenize("").empty());
  EXPECT_EQ(bare_word(" \"moon!\""), "moon");
}

TEST(MockPolicy, ParsesModelNames) {
  EXPECT_EQ(Policy::parse("oracle")->kind, PolicyKind::oracle);
  const auto r = Policy::parse("random:7");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->kind, PolicyKind::random);
  EXPECT_EQ(r->seed, 7u);
  EXPECT_EQ(Policy::parse("constant:3")->level, 3);
  EXPECT_EQ(Policy::parse("uniform")->kind, PolicyKind::uniform);
  EXPECT_FALSE(Policy::parse("gpt-something"));
  EXPECT_FALSE(Policy::parse("constant:11"));
  EXPECT_FALSE(Policy::parse("random:x"));
}

TEST(PlantedWorld, SeedDeterminesEverything) {
  WorldConfig c;
  c.n_features = 5;
  c.seed = 7;
  const auto a = PlantedWorld::generate(c);
  const auto b = PlantedWorld::generate(c);
  EXPECT_EQ(a.contexts(), b.contexts());
  EXPECT_EQ(a.features()[3].description, b.features()[3].description);
  c.seed = 8;
  EXPECT_NE(PlantedWorld::generate(c).contexts(), a.contexts());

  autointerp::testing::TempDir x, y;
  a.write_cache(x.path());
  b.write_cache(y.path());
  EXPECT_EQ(autointerp::testing::read_file(x / "activations_0.bin"),
            autointerp::testing::read_file(y / "activations_0.bin"));
  EXPECT_TRUE(validate_cache(x.path()).ok());
}

TEST(PlantedWorld, TriggersAreTheOnlyActivations) {
  WorldConfig c;
  c.n_features = 6;
  const auto w = PlantedWorld::generate(c);
  autointerp::testing::TempDir d;
  w.write_cache(d.path());
  const auto cache = open_cache(d.path());
  EXPECT_TRUE(cache.manifest().skip_bos);
  for (std::uint32_t f = 0; f < 6; ++f) {
    const auto& pf = w.features()[f];
    EXPECT_EQ(w.feature_for_description(pf.description), f);
    EXPECT_EQ(w.feature_for_output(pf.output_description), f);
    EXPECT_GE(cache.feature_stats(f).fire_count, 200u);
    for (const auto& r : cache.feature_records(f)) {
      const auto tok = cache.context_tokens(r.context_id)[r.position];
      EXPECT_GT(w.base_value(f, tok), 0.0);
    }
  }
}

double two_token_kl(double gap, double shift) {
  const double zp = 1.0 + std::exp(gap), zq = std::exp(shift) + std::exp(gap);
  const double p0 = 1.0 / zp, p1 = std::exp(gap) / zp;
  const double q0 = std::exp(shift) / zq, q1 = std::exp(gap) / zq;
  return p0 * std::log(p0 / q0) + p1 * std::log(p1 / q1);
}

TEST(MockSubject, KlCurves) {
  MockOptions mo;
  mo.subject.curve = KlCurve::logit_shift;
  mo.subject.logit_gap = 0.7;
  MockEnv env(MockEnv::small_world(), mo);
  Gateway gw(autointerp::testing::fast_gateway_options());
  SubjectClient subject(gw, env.endpoint("subject"));
  const double c = env.world->features()[1].kl_coefficient;
  for (double s : {0.0, 0.3, 1.0, 4.0}) {
    GenerateRequest req;
    req.prompt = env.world->contexts()[0];
    req.intervention = InterventionSpec{1, InterventionMode::additive, s};
    req.return_kl = true;
    const auto resp = subject.generate(req, "test");
    ASSERT_TRUE(resp.kl);
    EXPECT_NEAR(*resp.kl, two_token_kl(0.7, c * s), 1e-9) << "s=" << s;
  }
}

TEST(MockSubject, GenerationIsAFunctionOfTheRequest) {
  MockEnv env;
  Gateway gw(autointerp::testing::fast_gateway_options());
  SubjectClient subject(gw, env.endpoint("subject"));
  GenerateRequest req;
  req.prompt = std::vector<std::uint32_t>(env.world->contexts()[4].begin(), env.world->contexts()[4].begin() + 10);
  req.max_new_tokens = 8;
  req.seed = 7;
  req.top_delta_k = 4;
  const auto a = subject.generate(req, "test");
  const auto b = subject.generate(req, "test");
  EXPECT_EQ(a.tokens.size(), 8u);
  EXPECT_EQ(a.to_json(), b.to_json());
  req.seed = 8;
  EXPECT_NE(subject.generate(req, "test").tokens, a.tokens);

  const auto harvest = subject.harvest({{"token_budget", 1000}, {"out", (env.dir / "harvested").string()}});
  EXPECT_TRUE(validate_cache(env.dir / "harvested").ok()) << harvest.dump();
  const auto baseline = subject.baseline({{"k", 32}});
  EXPECT_EQ(baseline.at("sae_id"), "random-topk-32");
}

}  // namespace
}  // namespace autointerp::mock
