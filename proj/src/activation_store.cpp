#include "autointerp/activation_store.hpp"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "autointerp/error.hpp"

namespace autointerp {

static_assert(std::endian::native == std::endian::little,
              "cache shards are read by direct little-endian decoding");

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kTokensMagic[4] = {'A', 'I', 'T', 'K'};
constexpr char kActivationsMagic[4] = {'A', 'I', 'A', 'C'};
constexpr std::size_t kTokensHeader = 4 + 4 + 8 + 4;
constexpr std::size_t kActivationsHeader = 4 + 4 + 8;
constexpr std::size_t kRecordBytes = 16;
constexpr std::size_t kIndexEntryBytes = 16;

template <typename T>
T load(const std::byte* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

template <typename T>
void store(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

SparseActivationRecord decode_record(const std::byte* p) {
  return {load<std::uint32_t>(p), load<std::uint32_t>(p + 4), load<std::uint32_t>(p + 8),
          load<float>(p + 12)};
}

class MappedFile {
 public:
  MappedFile() = default;
  explicit MappedFile(const fs::path& path) {
    fd_ = ::open(path.c_str(), O_RDONLY);
    if (fd_ < 0) throw CacheError("missing shard: " + path.string());
    struct stat st {};
    if (::fstat(fd_, &st) != 0) {
      ::close(fd_);
      throw CacheError("cannot stat shard: " + path.string());
    }
    size_ = static_cast<std::size_t>(st.st_size);
    if (size_ > 0) {
      void* p = ::mmap(nullptr, size_, PROT_READ, MAP_PRIVATE, fd_, 0);
      if (p == MAP_FAILED) {
        ::close(fd_);
        throw CacheError("cannot map shard: " + path.string());
      }
      data_ = static_cast<const std::byte*>(p);
    }
  }
  MappedFile(MappedFile&& o) noexcept { swap(o); }
  MappedFile& operator=(MappedFile&& o) noexcept {
    MappedFile tmp(std::move(o));
    swap(tmp);
    return *this;
  }
  MappedFile(const MappedFile&) = delete;
  MappedFile& operator=(const MappedFile&) = delete;
  ~MappedFile() {
    if (data_) ::munmap(const_cast<std::byte*>(data_), size_);
    if (fd_ >= 0) ::close(fd_);
  }

  const std::byte* data() const noexcept { return data_; }
  std::size_t size() const noexcept { return size_; }

 private:
  void swap(MappedFile& o) noexcept {
    std::swap(fd_, o.fd_);
    std::swap(data_, o.data_);
    std::swap(size_, o.size_);
  }
  int fd_ = -1;
  const std::byte* data_ = nullptr;
  std::size_t size_ = 0;
};

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CacheError("missing shard: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

CacheManifest load_manifest(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw CacheError("missing manifest: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw CacheError(std::string("corrupt manifest: ") + e.what());
  }
  return CacheManifest::from_json(j);
}

std::string format_name(CacheFormat f) { return f == CacheFormat::binary ? "binary" : "jsonl"; }

}  // namespace

json CacheManifest::to_json() const {
  auto shards = [](const std::vector<ShardRef>& list) {
    json arr = json::array();
    for (const auto& s : list) arr.push_back({{"file", s.file}, {"begin", s.begin}, {"end", s.end}});
    return arr;
  };
  return {{"version", version},
          {"format", format_name(format)},
          {"model_id", model_id},
          {"sae_id", sae_id},
          {"layer", layer},
          {"hook_point", hook_point},
          {"context_len", context_len},
          {"n_contexts", n_contexts},
          {"n_features", n_features},
          {"tokenizer_id", tokenizer_id},
          {"skip_bos", skip_bos},
          {"activation_convention", activation_convention},
          {"shards", {{"tokens", shards(token_shards)}, {"activations", shards(activation_shards)}}}};
}

CacheManifest CacheManifest::from_json(const json& j) {
  CacheManifest m;
  try {
    m.version = j.at("version").get<std::uint32_t>();
    const auto fmt = j.value("format", std::string("binary"));
    if (fmt == "binary") {
      m.format = CacheFormat::binary;
    } else if (fmt == "jsonl") {
      m.format = CacheFormat::jsonl;
    } else {
      throw CacheError("corrupt manifest: unknown format '" + fmt + "'");
    }
    m.model_id = j.value("model_id", "");
    m.sae_id = j.value("sae_id", "");
    m.layer = j.value("layer", 0);
    m.hook_point = j.value("hook_point", "");
    m.context_len = j.at("context_len").get<std::uint32_t>();
    m.n_contexts = j.at("n_contexts").get<std::uint64_t>();
    m.n_features = j.at("n_features").get<std::uint32_t>();
    m.tokenizer_id = j.value("tokenizer_id", "");
    m.skip_bos = j.value("skip_bos", false);
    m.activation_convention = j.value("activation_convention", "");
    auto read_shards = [](const json& arr) {
      std::vector<ShardRef> out;
      for (const auto& s : arr) {
        out.push_back({s.at("file").get<std::string>(), s.at("begin").get<std::uint64_t>(),
                       s.at("end").get<std::uint64_t>()});
      }
      return out;
    };
    m.token_shards = read_shards(j.at("shards").at("tokens"));
    m.activation_shards = read_shards(j.at("shards").at("activations"));
  } catch (const json::exception& e) {
    throw CacheError(std::string("corrupt manifest: ") + e.what());
  }
  if (m.version != kCacheFormatVersion) {
    throw CacheError("format mismatch: manifest version " + std::to_string(m.version));
  }
  if (m.context_len < 2) throw CacheError("corrupt manifest: context_len must be >= 2");
  if (m.n_features == 0) throw CacheError("corrupt manifest: n_features must be > 0");
  return m;
}

// ---------------------------------------------------------------------------
// Reading

namespace {

struct TokenShard {
  std::uint64_t begin = 0;
  std::uint64_t end = 0;
  MappedFile map;
  const std::byte* data = nullptr;  // into map, binary only
  std::vector<std::uint32_t> owned;  // jsonl only
};
struct IndexEntry {
  std::uint64_t offset = 0;
  std::uint64_t count = 0;
};
struct ActivationShard {
  std::uint64_t begin = 0;
  std::uint64_t end = 0;
  MappedFile map;
  const std::byte* records = nullptr;
  const std::byte* index = nullptr;
  std::uint64_t n_records = 0;
  std::vector<SparseActivationRecord> owned;
  std::vector<IndexEntry> owned_index;

  SparseActivationRecord record(std::uint64_t i) const {
    return records ? decode_record(records + i * kRecordBytes) : owned[i];
  }
  IndexEntry entry(std::uint32_t feature) const {
    if (index) {
      const std::byte* p = index + std::size_t{feature} * kIndexEntryBytes;
      return {load<std::uint64_t>(p), load<std::uint64_t>(p + 8)};
    }
    return owned_index[feature];
  }
};

}  // namespace

struct CacheHandle::Impl {
  fs::path dir;
  CacheManifest manifest;
  std::vector<TokenShard> token_shards;
  std::vector<ActivationShard> activation_shards;
  std::uint64_t total_records = 0;
};

CacheHandle::CacheHandle(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
CacheHandle::CacheHandle(CacheHandle&&) noexcept = default;
CacheHandle& CacheHandle::operator=(CacheHandle&&) noexcept = default;
CacheHandle::~CacheHandle() = default;

const CacheManifest& CacheHandle::manifest() const noexcept { return impl_->manifest; }
const fs::path& CacheHandle::path() const noexcept { return impl_->dir; }
std::uint64_t CacheHandle::total_records() const noexcept { return impl_->total_records; }

namespace {

void check_coverage(const std::vector<ShardRef>& shards, std::uint64_t total, const char* what) {
  std::uint64_t next = 0;
  for (const auto& s : shards) {
    if (s.begin != next || s.end < s.begin) {
      throw CacheError(std::string("corrupt manifest: ") + what + " shard ranges are not contiguous");
    }
    next = s.end;
  }
  if (next != total) {
    throw CacheError(std::string("corrupt manifest: ") + what + " shards do not cover all " +
                     std::to_string(total));
  }
}

void open_binary_tokens(TokenShard& shard, const fs::path& path,
                        std::uint32_t context_len) {
  shard.map = MappedFile(path);
  const auto* p = shard.map.data();
  if (shard.map.size() < kTokensHeader) throw CacheError("truncated shard: " + path.string());
  if (std::memcmp(p, kTokensMagic, 4) != 0) throw CacheError("format mismatch: " + path.string());
  if (load<std::uint32_t>(p + 4) != kCacheFormatVersion) {
    throw CacheError("format mismatch: unsupported version in " + path.string());
  }
  const auto n = load<std::uint64_t>(p + 8);
  const auto len = load<std::uint32_t>(p + 16);
  if (n != shard.end - shard.begin || len != context_len) {
    throw CacheError("format mismatch: token shard header disagrees with manifest: " + path.string());
  }
  if (shard.map.size() < kTokensHeader + n * len * 4) {
    throw CacheError("truncated shard: " + path.string());
  }
  shard.data = p + kTokensHeader;
}

void open_binary_activations(ActivationShard& shard, const fs::path& path,
                             std::uint32_t n_features) {
  shard.map = MappedFile(path);
  const auto* p = shard.map.data();
  if (shard.map.size() < kActivationsHeader) throw CacheError("truncated shard: " + path.string());
  if (std::memcmp(p, kActivationsMagic, 4) != 0) {
    throw CacheError("format mismatch: " + path.string());
  }
  if (load<std::uint32_t>(p + 4) != kCacheFormatVersion) {
    throw CacheError("format mismatch: unsupported version in " + path.string());
  }
  shard.n_records = load<std::uint64_t>(p + 8);
  const std::uint64_t need =
      kActivationsHeader + shard.n_records * kRecordBytes + std::uint64_t{n_features} * kIndexEntryBytes;
  if (shard.map.size() < need) throw CacheError("truncated shard: " + path.string());
  shard.records = p + kActivationsHeader;
  shard.index = shard.records + shard.n_records * kRecordBytes;
}

void open_jsonl_tokens(TokenShard& shard, const fs::path& path,
                       std::uint32_t context_len) {
  std::istringstream in(read_text(path));
  std::string line;
  std::uint64_t row = 0;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw CacheError("format mismatch: " + path.string() + ": " + e.what());
    }
    const json& toks = j.is_array() ? j : j.at("tokens");
    if (toks.size() != context_len) {
      throw CacheError("format mismatch: context length differs in " + path.string());
    }
    for (const auto& t : toks) shard.owned.push_back(t.get<std::uint32_t>());
    ++row;
  }
  if (row < shard.end - shard.begin) throw CacheError("truncated shard: " + path.string());
}

void open_jsonl_activations(ActivationShard& shard, const fs::path& path,
                            std::uint32_t n_features) {
  std::istringstream in(read_text(path));
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      shard.owned.push_back({j.at("feature").get<std::uint32_t>(), j.at("context").get<std::uint32_t>(),
                             j.at("position").get<std::uint32_t>(), j.at("value").get<float>()});
    } catch (const json::exception& e) {
      throw CacheError("format mismatch: " + path.string() + ": " + e.what());
    }
  }
  std::stable_sort(shard.owned.begin(), shard.owned.end(),
                   [](const auto& a, const auto& b) { return a.key_compare(b) < 0; });
  shard.n_records = shard.owned.size();
  shard.owned_index.assign(n_features, {});
  for (std::uint64_t i = 0; i < shard.owned.size(); ++i) {
    const auto f = shard.owned[i].feature_id;
    if (f >= n_features) continue;  // reported by validate_cache
    auto& e = shard.owned_index[f];
    if (e.count == 0) e.offset = i;
    ++e.count;
  }
}

}  // namespace

CacheHandle open_cache(const fs::path& dir) {
  auto impl = std::make_unique<CacheHandle::Impl>();
  impl->dir = dir;
  impl->manifest = load_manifest(dir);
  const auto& m = impl->manifest;
  check_coverage(m.token_shards, m.n_contexts, "token");
  check_coverage(m.activation_shards, m.n_features, "activation");

  for (const auto& ref : m.token_shards) {
    const fs::path path = dir / ref.file;
    if (!fs::exists(path)) throw CacheError("missing shard: " + path.string());
    auto& shard = impl->token_shards.emplace_back();
    shard.begin = ref.begin;
    shard.end = ref.end;
    if (m.format == CacheFormat::binary) {
      open_binary_tokens(shard, path, m.context_len);
    } else {
      open_jsonl_tokens(shard, path, m.context_len);
    }
  }
  for (const auto& ref : m.activation_shards) {
    const fs::path path = dir / ref.file;
    if (!fs::exists(path)) throw CacheError("missing shard: " + path.string());
    auto& shard = impl->activation_shards.emplace_back();
    shard.begin = ref.begin;
    shard.end = ref.end;
    if (m.format == CacheFormat::binary) {
      open_binary_activations(shard, path, m.n_features);
    } else {
      open_jsonl_activations(shard, path, m.n_features);
    }
    impl->total_records += shard.n_records;
  }
  return CacheHandle(std::move(impl));
}

std::span<const std::uint32_t> CacheHandle::context_tokens(std::uint64_t context_id) const {
  const auto& m = impl_->manifest;
  if (context_id >= m.n_contexts) {
    throw DomainError("context id " + std::to_string(context_id) + " out of range");
  }
  auto it = std::upper_bound(impl_->token_shards.begin(), impl_->token_shards.end(), context_id,
                             [](std::uint64_t c, const auto& s) { return c < s.begin; });
  const auto& shard = *std::prev(it);
  const std::uint64_t row = context_id - shard.begin;
  if (shard.data) {
    return {reinterpret_cast<const std::uint32_t*>(shard.data) + row * m.context_len, m.context_len};
  }
  return {shard.owned.data() + row * m.context_len, m.context_len};
}

std::vector<SparseActivationRecord> CacheHandle::feature_records(std::uint32_t feature_id,
                                                                 bool include_bos) const {
  const auto& m = impl_->manifest;
  if (feature_id >= m.n_features) {
    throw DomainError("feature id " + std::to_string(feature_id) + " out of range (n_features = " +
                      std::to_string(m.n_features) + ")");
  }
  auto it = std::upper_bound(impl_->activation_shards.begin(), impl_->activation_shards.end(),
                             feature_id, [](std::uint64_t f, const auto& s) { return f < s.begin; });
  const auto& shard = *std::prev(it);
  const auto entry = shard.entry(feature_id);
  if (entry.offset + entry.count > shard.n_records) {
    throw CacheError("index entry for feature " + std::to_string(feature_id) + " is out of bounds");
  }
  const bool hide_bos = m.skip_bos && !include_bos;
  std::vector<SparseActivationRecord> out;
  out.reserve(entry.count);
  for (std::uint64_t i = 0; i < entry.count; ++i) {
    auto r = shard.record(entry.offset + i);
    if (hide_bos && r.position == 0) continue;
    out.push_back(r);
  }
  return out;
}

double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw DomainError("quantile of an empty sample");
  const double h = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

FeatureStats CacheHandle::feature_stats(std::uint32_t feature_id) const {
  const auto records = feature_records(feature_id);
  FeatureStats stats;
  stats.feature_id = feature_id;
  stats.fire_count = records.size();
  if (records.empty()) return stats;
  std::vector<double> values;
  values.reserve(records.size());
  std::uint64_t contexts = 0;
  std::optional<std::uint32_t> last_context;
  for (const auto& r : records) {
    values.push_back(r.value);
    if (r.context_id != last_context) {
      ++contexts;
      last_context = r.context_id;
    }
  }
  std::sort(values.begin(), values.end());
  stats.distinct_contexts = contexts;
  stats.max_activation = static_cast<float>(values.back());
  for (std::size_t k = 0; k <= 10; ++k) {
    stats.quantiles[k] = k == 10 ? values.back() : quantile_sorted(values, static_cast<double>(k) / 10.0);
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Validation

std::string to_string(ViolationKind kind) {
  switch (kind) {
    case ViolationKind::manifest: return "manifest";
    case ViolationKind::missing_shard: return "missing shard";
    case ViolationKind::format_mismatch: return "format mismatch";
    case ViolationKind::truncated_shard: return "truncated shard";
    case ViolationKind::out_of_order: return "out-of-order record";
    case ViolationKind::duplicate: return "duplicate record";
    case ViolationKind::zero_value: return "zero-valued record";
    case ViolationKind::invalid_value: return "invalid value";
    case ViolationKind::position_out_of_range: return "position out of range";
    case ViolationKind::context_out_of_range: return "context out of range";
    case ViolationKind::feature_out_of_range: return "feature out of range";
    case ViolationKind::index_mismatch: return "index mismatch";
  }
  return "unknown";
}

std::size_t ValidationReport::count(ViolationKind kind) const {
  return static_cast<std::size_t>(std::count_if(violations.begin(), violations.end(),
                                                [&](const auto& v) { return v.kind == kind; }));
}

namespace {

std::string describe(const SparseActivationRecord& r) {
  return "(feature " + std::to_string(r.feature_id) + ", context " + std::to_string(r.context_id) +
         ", position " + std::to_string(r.position) + ")";
}

class Validator {
 public:
  Validator(const CacheManifest& m, ValidationReport& report) : m_(m), report_(report) {}

  void add(ViolationKind kind, std::string msg, std::optional<SparseActivationRecord> r = {}) {
    report_.violations.push_back({kind, to_string(kind) + ": " + std::move(msg), r});
  }

  /// Record-level checks on the stream in stored order.
  void check_records(const std::vector<SparseActivationRecord>& records, const ShardRef& ref) {
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& r = records[i];
      ++report_.records_checked;
      if (i > 0) {
        const auto c = records[i - 1].key_compare(r);
        if (c == 0) {
          add(ViolationKind::duplicate, describe(r), r);
        } else if (c > 0) {
          add(ViolationKind::out_of_order, describe(r) + " follows " + describe(records[i - 1]), r);
        }
      }
      if (r.value == 0.0f) {
        add(ViolationKind::zero_value, describe(r), r);
      } else if (!std::isfinite(r.value) || r.value < 0.0f) {
        add(ViolationKind::invalid_value, describe(r) + " value " + std::to_string(r.value), r);
      }
      if (r.position >= m_.context_len) add(ViolationKind::position_out_of_range, describe(r), r);
      if (r.context_id >= m_.n_contexts) add(ViolationKind::context_out_of_range, describe(r), r);
      if (r.feature_id >= m_.n_features || r.feature_id < ref.begin || r.feature_id >= ref.end) {
        add(ViolationKind::feature_out_of_range, describe(r) + " in shard " + ref.file, r);
      }
    }
  }

  /// Compares a stored index against the runs actually present.
  void check_index(const std::vector<SparseActivationRecord>& records,
                   const std::vector<std::pair<std::uint64_t, std::uint64_t>>& index,
                   const std::string& file) {
    std::vector<std::pair<std::uint64_t, std::uint64_t>> actual(m_.n_features, {0, 0});
    for (std::uint64_t i = 0; i < records.size(); ++i) {
      const auto f = records[i].feature_id;
      if (f >= m_.n_features) continue;
      auto& e = actual[f];
      if (e.second == 0) e.first = i;
      ++e.second;
    }
    for (std::uint32_t f = 0; f < m_.n_features; ++f) {
      const auto& want = actual[f];
      const auto& got = index[f];
      if (got.second != want.second || (want.second > 0 && got.first != want.first)) {
        add(ViolationKind::index_mismatch,
            "feature " + std::to_string(f) + " in " + file + ": index (" + std::to_string(got.first) +
                ", " + std::to_string(got.second) + ") vs records (" + std::to_string(want.first) +
                ", " + std::to_string(want.second) + ")");
      }
    }
  }

 private:
  const CacheManifest& m_;
  ValidationReport& report_;
};

}  // namespace

ValidationReport validate_cache(const fs::path& dir) {
  ValidationReport report;
  CacheManifest m;
  try {
    m = load_manifest(dir);
  } catch (const CacheError& e) {
    const std::string what = e.what();
    const auto kind = what.rfind("format mismatch", 0) == 0 ? ViolationKind::format_mismatch
                                                            : ViolationKind::manifest;
    report.violations.push_back({kind, what, {}});
    return report;
  }
  Validator v(m, report);

  auto coverage = [&](const std::vector<ShardRef>& shards, std::uint64_t total, const char* what) {
    std::uint64_t next = 0;
    for (const auto& s : shards) {
      if (s.begin != next || s.end < s.begin) {
        v.add(ViolationKind::manifest, std::string(what) + " shard ranges are not contiguous at " + s.file);
      }
      next = s.end;
    }
    if (next != total) v.add(ViolationKind::manifest, std::string(what) + " shards do not cover the full range");
  };
  coverage(m.token_shards, m.n_contexts, "token");
  coverage(m.activation_shards, m.n_features, "activation");

  for (const auto& ref : m.token_shards) {
    const fs::path path = dir / ref.file;
    if (!fs::exists(path)) {
      v.add(ViolationKind::missing_shard, path.string());
      continue;
    }
    if (m.format == CacheFormat::binary) {
      const std::string bytes = read_text(path);
      if (bytes.size() < kTokensHeader) {
        v.add(ViolationKind::truncated_shard, path.string());
        continue;
      }
      const auto* p = reinterpret_cast<const std::byte*>(bytes.data());
      if (std::memcmp(p, kTokensMagic, 4) != 0 || load<std::uint32_t>(p + 4) != kCacheFormatVersion) {
        v.add(ViolationKind::format_mismatch, path.string());
        continue;
      }
      const auto n = load<std::uint64_t>(p + 8);
      const auto len = load<std::uint32_t>(p + 16);
      if (n != ref.end - ref.begin || len != m.context_len) {
        v.add(ViolationKind::format_mismatch, path.string() + ": header disagrees with manifest");
        continue;
      }
      if (bytes.size() != kTokensHeader + n * len * 4) {
        v.add(ViolationKind::truncated_shard, path.string() + ": size " + std::to_string(bytes.size()));
      }
    } else {
      TokenShard shard;
      shard.begin = ref.begin;
      shard.end = ref.end;
      try {
        open_jsonl_tokens(shard, path, m.context_len);
      } catch (const CacheError& e) {
        const std::string what = e.what();
        v.add(what.rfind("truncated", 0) == 0 ? ViolationKind::truncated_shard
                                              : ViolationKind::format_mismatch,
              what);
      }
    }
  }

  for (const auto& ref : m.activation_shards) {
    const fs::path path = dir / ref.file;
    if (!fs::exists(path)) {
      v.add(ViolationKind::missing_shard, path.string());
      continue;
    }
    std::vector<SparseActivationRecord> records;
    std::vector<std::pair<std::uint64_t, std::uint64_t>> index;
    if (m.format == CacheFormat::binary) {
      const std::string bytes = read_text(path);
      if (bytes.size() < kActivationsHeader) {
        v.add(ViolationKind::truncated_shard, path.string());
        continue;
      }
      const auto* p = reinterpret_cast<const std::byte*>(bytes.data());
      if (std::memcmp(p, kActivationsMagic, 4) != 0 || load<std::uint32_t>(p + 4) != kCacheFormatVersion) {
        v.add(ViolationKind::format_mismatch, path.string());
        continue;
      }
      const auto n = load<std::uint64_t>(p + 8);
      const std::uint64_t need =
          kActivationsHeader + n * kRecordBytes + std::uint64_t{m.n_features} * kIndexEntryBytes;
      if (bytes.size() != need) {
        v.add(ViolationKind::truncated_shard,
              path.string() + ": size " + std::to_string(bytes.size()) + ", expected " + std::to_string(need));
        if (bytes.size() < need) continue;
      }
      records.reserve(n);
      for (std::uint64_t i = 0; i < n; ++i) {
        records.push_back(decode_record(p + kActivationsHeader + i * kRecordBytes));
      }
      const auto* idx = p + kActivationsHeader + n * kRecordBytes;
      for (std::uint32_t f = 0; f < m.n_features; ++f) {
        index.emplace_back(load<std::uint64_t>(idx + f * kIndexEntryBytes),
                           load<std::uint64_t>(idx + f * kIndexEntryBytes + 8));
      }
      v.check_records(records, ref);
      v.check_index(records, index, ref.file);
    } else {
      // jsonl shards have no stored index; check the records in file order.
      std::istringstream in(read_text(path));
      std::string line;
      bool bad = false;
      while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
          const json j = json::parse(line);
          records.push_back({j.at("feature").get<std::uint32_t>(), j.at("context").get<std::uint32_t>(),
                             j.at("position").get<std::uint32_t>(), j.at("value").get<float>()});
        } catch (const json::exception& e) {
          v.add(ViolationKind::format_mismatch, path.string() + ": " + e.what());
          bad = true;
          break;
        }
      }
      if (!bad) v.check_records(records, ref);
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Writing

CacheWriter::CacheWriter(fs::path dir, CacheManifest manifest, CacheWriterOptions options)
    : dir_(std::move(dir)), manifest_(std::move(manifest)), options_(options) {
  if (manifest_.context_len < 2) throw DomainError("context_len must be >= 2");
  if (manifest_.n_features == 0) throw DomainError("n_features must be > 0");
  manifest_.version = kCacheFormatVersion;
  manifest_.format = options_.format;
  manifest_.n_contexts = 0;
  manifest_.token_shards.clear();
  manifest_.activation_shards.clear();
}

std::uint32_t CacheWriter::add_context(std::span<const std::uint32_t> tokens) {
  if (tokens.size() != manifest_.context_len) {
    throw DomainError("context has " + std::to_string(tokens.size()) + " tokens, expected " +
                      std::to_string(manifest_.context_len));
  }
  tokens_.insert(tokens_.end(), tokens.begin(), tokens.end());
  return static_cast<std::uint32_t>(manifest_.n_contexts++);
}

void CacheWriter::add_record(const SparseActivationRecord& r) {
  if (!(r.value > 0.0f) || !std::isfinite(r.value)) {
    throw DomainError("activation values must be positive and finite: " + describe(r));
  }
  if (r.feature_id >= manifest_.n_features) throw DomainError("feature out of range: " + describe(r));
  if (r.position >= manifest_.context_len) throw DomainError("position out of range: " + describe(r));
  records_.push_back(r);
}

CacheManifest CacheWriter::finish() {
  if (finished_) throw DomainError("CacheWriter::finish called twice");
  finished_ = true;
  for (const auto& r : records_) {
    if (r.context_id >= manifest_.n_contexts) throw DomainError("context out of range: " + describe(r));
  }
  std::sort(records_.begin(), records_.end(), [](const auto& a, const auto& b) { return a.key_compare(b) < 0; });
  for (std::size_t i = 1; i < records_.size(); ++i) {
    if (records_[i - 1].key_compare(records_[i]) == 0) {
      throw DomainError("duplicate record " + describe(records_[i]));
    }
  }
  fs::create_directories(dir_);
  const bool binary = options_.format == CacheFormat::binary;
  const std::string ext = binary ? ".bin" : ".jsonl";

  const std::uint64_t per_token_shard =
      options_.contexts_per_shard ? options_.contexts_per_shard : std::max<std::uint64_t>(manifest_.n_contexts, 1);
  const std::uint64_t len = manifest_.context_len;
  for (std::uint64_t begin = 0, k = 0; begin < manifest_.n_contexts || k == 0; begin += per_token_shard, ++k) {
    const std::uint64_t end = std::min(begin + per_token_shard, manifest_.n_contexts);
    const std::string name = "tokens_" + std::to_string(k) + ext;
    std::ofstream out(dir_ / name, std::ios::binary);
    if (binary) {
      out.write(kTokensMagic, 4);
      store<std::uint32_t>(out, kCacheFormatVersion);
      store<std::uint64_t>(out, end - begin);
      store<std::uint32_t>(out, manifest_.context_len);
      out.write(reinterpret_cast<const char*>(tokens_.data() + begin * len),
                static_cast<std::streamsize>((end - begin) * len * 4));
    } else {
      for (std::uint64_t c = begin; c < end; ++c) {
        json row = json::array();
        for (std::uint64_t t = 0; t < len; ++t) row.push_back(tokens_[c * len + t]);
        out << json{{"context", c}, {"tokens", row}}.dump() << '\n';
      }
    }
    if (!out) throw CacheError("failed writing " + (dir_ / name).string());
    manifest_.token_shards.push_back({name, begin, end});
    if (end >= manifest_.n_contexts) break;
  }

  const std::uint32_t per_act_shard = options_.features_per_shard ? options_.features_per_shard : manifest_.n_features;
  auto rec = records_.begin();
  for (std::uint32_t begin = 0, k = 0; begin < manifest_.n_features; begin += per_act_shard, ++k) {
    const std::uint32_t end = std::min<std::uint64_t>(std::uint64_t{begin} + per_act_shard, manifest_.n_features);
    auto last = std::find_if(rec, records_.end(), [&](const auto& r) { return r.feature_id >= end; });
    const std::string name = "activations_" + std::to_string(k) + ext;
    std::ofstream out(dir_ / name, std::ios::binary);
    if (binary) {
      out.write(kActivationsMagic, 4);
      store<std::uint32_t>(out, kCacheFormatVersion);
      store<std::uint64_t>(out, static_cast<std::uint64_t>(last - rec));
      std::vector<std::pair<std::uint64_t, std::uint64_t>> index(manifest_.n_features, {0, 0});
      std::uint64_t i = 0;
      for (auto it = rec; it != last; ++it, ++i) {
        store<std::uint32_t>(out, it->feature_id);
        store<std::uint32_t>(out, it->context_id);
        store<std::uint32_t>(out, it->position);
        store<float>(out, it->value);
        auto& e = index[it->feature_id];
        if (e.second == 0) e.first = i;
        ++e.second;
      }
      for (const auto& [offset, count] : index) {
        store<std::uint64_t>(out, offset);
        store<std::uint64_t>(out, count);
      }
    } else {
      for (auto it = rec; it != last; ++it) {
        out << json{{"feature", it->feature_id}, {"context", it->context_id},
                    {"position", it->position}, {"value", it->value}}.dump()
            << '\n';
      }
    }
    if (!out) throw CacheError("failed writing " + (dir_ / name).string());
    manifest_.activation_shards.push_back({name, begin, end});
    rec = last;
  }

  std::ofstream mf(dir_ / "manifest.json");
  mf << manifest_.to_json().dump(2) << '\n';
  if (!mf) throw CacheError("failed writing manifest in " + dir_.string());
  return manifest_;
}

}  // namespace autointerp
