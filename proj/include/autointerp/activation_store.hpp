#pragma once

// On-disk activation cache: a manifest plus token and sparse-activation
// shards. Binary layout (all integers little-endian):
//
//   tokens shard      "AITK" u32 version u64 n_contexts u32 context_len
//                     then n_contexts * context_len u32 token ids
//   activation shard  "AIAC" u32 version u64 n_records
//                     then n_records * (u32 feature, u32 context, u32 position, f32 value)
//                     then n_features * (u64 offset, u64 count)
//
// Index offsets are record indices within the shard. Activation shards
// partition the feature range; every shard carries a full-length index with
// zero counts outside its own range.

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace autointerp {

inline constexpr std::uint32_t kCacheFormatVersion = 1;

struct ShardRef {
  std::string file;
  std::uint64_t begin = 0;  // first context (tokens) or feature (activations)
  std::uint64_t end = 0;    // one past the last
};

enum class CacheFormat { binary, jsonl };

struct CacheManifest {
  std::uint32_t version = kCacheFormatVersion;
  CacheFormat format = CacheFormat::binary;
  std::string model_id;
  std::string sae_id;
  int layer = 0;
  std::string hook_point;
  std::uint32_t context_len = 0;
  std::uint64_t n_contexts = 0;
  std::uint32_t n_features = 0;
  std::string tokenizer_id;
  bool skip_bos = false;
  // Free-form description of what the stored values are (pre/post activation
  // function, scaling). Recorded, never interpreted.
  std::string activation_convention;
  std::vector<ShardRef> token_shards;
  std::vector<ShardRef> activation_shards;

  nlohmann::json to_json() const;
  static CacheManifest from_json(const nlohmann::json& j);
};

struct SparseActivationRecord {
  std::uint32_t feature_id = 0;
  std::uint32_t context_id = 0;
  std::uint32_t position = 0;
  float value = 0.0f;

  /// Storage order; value is not part of the key.
  std::strong_ordering key_compare(const SparseActivationRecord& o) const {
    if (auto c = feature_id <=> o.feature_id; c != 0) return c;
    if (auto c = context_id <=> o.context_id; c != 0) return c;
    return position <=> o.position;
  }
  bool operator==(const SparseActivationRecord&) const = default;
};

struct FeatureStats {
  std::uint32_t feature_id = 0;
  std::uint64_t fire_count = 0;
  std::uint64_t distinct_contexts = 0;
  float max_activation = 0.0f;
  /// Cut points at 0%, 10%, ..., 100% of the nonzero values (linear
  /// interpolation). All zero for a feature that never fires.
  std::array<double, 11> quantiles{};
};

class CacheHandle {
 public:
  CacheHandle(CacheHandle&&) noexcept;
  CacheHandle& operator=(CacheHandle&&) noexcept;
  ~CacheHandle();

  const CacheManifest& manifest() const noexcept;
  const std::filesystem::path& path() const noexcept;

  std::span<const std::uint32_t> context_tokens(std::uint64_t context_id) const;

  /// Records of one feature in (context, position) order, read through the
  /// per-feature index. Position-0 records are hidden when the manifest sets
  /// skip_bos, unless include_bos is true.
  std::vector<SparseActivationRecord> feature_records(std::uint32_t feature_id,
                                                      bool include_bos = false) const;

  FeatureStats feature_stats(std::uint32_t feature_id) const;

  std::uint64_t total_records() const noexcept;

 private:
  struct Impl;
  explicit CacheHandle(std::unique_ptr<Impl> impl);
  std::unique_ptr<Impl> impl_;

  friend CacheHandle open_cache(const std::filesystem::path& dir);
};

/// Opens a cache directory read-only. Throws CacheError on a missing or
/// corrupt manifest, missing shard, format mismatch or truncated shard.
CacheHandle open_cache(const std::filesystem::path& dir);

/// Quantile of a sorted sample, linear interpolation between order
/// statistics (inclusive definition: h = q * (n - 1)).
double quantile_sorted(std::span<const double> sorted, double q);

enum class ViolationKind {
  manifest,
  missing_shard,
  format_mismatch,
  truncated_shard,
  out_of_order,
  duplicate,
  zero_value,
  invalid_value,
  position_out_of_range,
  context_out_of_range,
  feature_out_of_range,
  index_mismatch,
};

struct Violation {
  ViolationKind kind;
  std::string message;
  std::optional<SparseActivationRecord> record;
};

struct ValidationReport {
  std::vector<Violation> violations;
  std::uint64_t records_checked = 0;

  bool ok() const noexcept { return violations.empty(); }
  std::size_t count(ViolationKind kind) const;
};

/// Checks every structural invariant of a cache. Never throws for a bad
/// cache; problems become report entries.
ValidationReport validate_cache(const std::filesystem::path& dir);

std::string to_string(ViolationKind kind);

struct CacheWriterOptions {
  CacheFormat format = CacheFormat::binary;
  std::uint64_t contexts_per_shard = 0;  // 0 = one shard
  std::uint32_t features_per_shard = 0;  // 0 = one shard
};

/// Builds a cache directory. Records may be added in any order; they are
/// sorted on finish(). Single-threaded.
class CacheWriter {
 public:
  /// `manifest` supplies metadata, context_len and n_features; shard lists
  /// and n_contexts are filled in by the writer.
  CacheWriter(std::filesystem::path dir, CacheManifest manifest,
              CacheWriterOptions options = {});

  std::uint32_t add_context(std::span<const std::uint32_t> tokens);
  void add_record(const SparseActivationRecord& record);

  CacheManifest finish();

 private:
  std::filesystem::path dir_;
  CacheManifest manifest_;
  CacheWriterOptions options_;
  std::vector<std::uint32_t> tokens_;
  std::vector<SparseActivationRecord> records_;
  bool finished_ = false;
};

}  // namespace autointerp
