#include "autointerp/mock/world.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "autointerp/error.hpp"
#include "autointerp/rng.hpp"

namespace autointerp::mock {

namespace {

std::string pseudo_word(Rng& rng, std::uint32_t syllables) {
  static constexpr std::string_view kConsonants = "bdfgklmnprstvz";
  static constexpr std::string_view kVowels = "aeiou";
  std::string w;
  for (std::uint32_t s = 0; s < syllables; ++s) {
    w += kConsonants[rng.below(kConsonants.size())];
    w += kVowels[rng.below(kVowels.size())];
  }
  return w;
}

}  // namespace

PlantedWorld PlantedWorld::generate(const WorldConfig& config) {
  if (config.n_features == 0 || config.context_len < 8 || config.insertions_min == 0 ||
      config.insertions_max < config.insertions_min || config.triggers_per_feature == 0) {
    throw DomainError("invalid world configuration");
  }
  PlantedWorld w;
  w.config_ = config;
  Rng rng(mix_seed(config.seed, 0x90A1Du));

  std::unordered_set<std::string> used;
  auto fresh = [&] {
    for (;;) {
      auto word = pseudo_word(rng, 2 + static_cast<std::uint32_t>(rng.below(2)));
      if (used.insert(word).second) return word;
    }
  };

  std::vector<std::string> pieces{"<bos>"};
  auto add_piece = [&](const std::string& word) {
    pieces.push_back(" " + word);
    return static_cast<std::uint32_t>(pieces.size() - 1);
  };
  for (std::uint32_t i = 0; i < config.n_filler; ++i) w.filler_.push_back(add_piece(fresh()));

  for (std::uint32_t f = 0; f < config.n_features; ++f) {
    PlantedFeature pf;
    pf.id = f;
    const std::string name = fresh();
    pf.description = "words from the " + name + " group";
    const double scale = rng.uniform(2.0, 10.0);
    for (std::uint32_t t = 0; t < config.triggers_per_feature; ++t) {
      const std::string word = fresh();
      const auto id = add_piece(word);
      pf.triggers.push_back(id);
      pf.trigger_base.push_back(scale * rng.uniform(0.85, 1.0));
      w.trigger_index_[word] = f;
      w.trigger_token_[id] = {f, pf.trigger_base.back()};
    }
    std::string outputs;
    for (std::uint32_t b = 0; b < config.boosts_per_feature; ++b) {
      const std::string word = fresh();
      pf.boosts.push_back(add_piece(word));
      w.boost_index_[word] = f;
      outputs += (b == 0 ? "" : ", ") + word;
    }
    pf.output_description = "outputs such as " + outputs;
    pf.kl_coefficient = std::exp(rng.uniform(std::log(0.05), std::log(5.0)));
    w.description_index_[pf.description] = f;
    w.output_index_[pf.output_description] = f;
    w.features_.push_back(std::move(pf));
  }
  w.vocab_ = Vocabulary(std::move(pieces));

  auto filler_context = [&] {
    std::vector<std::uint32_t> ctx(config.context_len);
    ctx[0] = 0;
    for (std::uint32_t p = 1; p < config.context_len; ++p) ctx[p] = w.filler_[rng.below(w.filler_.size())];
    return ctx;
  };
  auto insert = [&](std::vector<std::uint32_t>& ctx, const PlantedFeature& pf, std::uint32_t count) {
    for (std::uint32_t k = 0; k < count; ++k) {
      const auto pos = 1 + static_cast<std::uint32_t>(rng.below(config.context_len - 1));
      ctx[pos] = pf.triggers[rng.below(pf.triggers.size())];
    }
  };
  for (const auto& pf : w.features_) {
    for (std::uint32_t c = 0; c < config.contexts_per_feature; ++c) {
      auto ctx = filler_context();
      const auto span = config.insertions_max - config.insertions_min + 1;
      insert(ctx, pf, config.insertions_min + static_cast<std::uint32_t>(rng.below(span)));
      if (config.n_features > 1 && rng.uniform() < config.cross_talk) {
        auto other = static_cast<std::uint32_t>(rng.below(config.n_features - 1));
        if (other >= pf.id) ++other;
        insert(ctx, w.features_[other], 1);
      }
      w.contexts_.push_back(std::move(ctx));
    }
  }
  for (std::uint32_t c = 0; c < config.background_contexts; ++c) w.contexts_.push_back(filler_context());
  rng.shuffle(std::span<std::vector<std::uint32_t>>(w.contexts_));

  for (const auto& ctx : w.contexts_) {
    std::vector<float> mult(ctx.size());
    for (auto& m : mult) m = static_cast<float>(1.0 + config.noise * (2.0 * rng.uniform() - 1.0));
    w.noise_.push_back(std::move(mult));
  }
  return w;
}

std::optional<std::uint32_t> PlantedWorld::feature_for_description(std::string_view text) const {
  if (auto it = description_index_.find(std::string(text)); it != description_index_.end()) return it->second;
  return std::nullopt;
}

std::optional<std::uint32_t> PlantedWorld::feature_for_output(std::string_view text) const {
  if (auto it = output_index_.find(std::string(text)); it != output_index_.end()) return it->second;
  return std::nullopt;
}

std::optional<std::uint32_t> PlantedWorld::trigger_of(std::string_view word) const {
  if (auto it = trigger_index_.find(std::string(word)); it != trigger_index_.end()) return it->second;
  return std::nullopt;
}

std::optional<std::uint32_t> PlantedWorld::boost_of(std::string_view word) const {
  if (auto it = boost_index_.find(std::string(word)); it != boost_index_.end()) return it->second;
  return std::nullopt;
}

double PlantedWorld::base_value(std::uint32_t feature, std::uint32_t token) const {
  auto it = trigger_token_.find(token);
  if (it == trigger_token_.end() || it->second.first != feature) return 0.0;
  return it->second.second;
}

CacheManifest PlantedWorld::write_cache(const std::filesystem::path& dir, CacheFormat format) const {
  CacheManifest m;
  m.model_id = "mock-planted";
  m.sae_id = "planted-" + std::to_string(config_.n_features);
  m.layer = 0;
  m.hook_point = "residual";
  m.context_len = config_.context_len;
  m.n_features = config_.n_features;
  m.tokenizer_id = "mock-vocab";
  m.skip_bos = true;
  m.activation_convention = "planted base value with relative jitter";
  CacheWriterOptions opts;
  opts.format = format;
  opts.contexts_per_shard = 2048;
  opts.features_per_shard = std::max<std::uint32_t>(1, config_.n_features / 2);
  CacheWriter writer(dir, m, opts);
  for (std::size_t c = 0; c < contexts_.size(); ++c) {
    const auto& ctx = contexts_[c];
    const auto id = writer.add_context(ctx);
    for (std::uint32_t p = 0; p < ctx.size(); ++p) {
      auto it = trigger_token_.find(ctx[p]);
      if (it == trigger_token_.end()) continue;
      writer.add_record({it->second.first, id, p, static_cast<float>(it->second.second * noise_[c][p])});
    }
  }
  auto out = writer.finish();
  vocab_.save(dir / "vocab.json");
  return out;
}

}  // namespace autointerp::mock
