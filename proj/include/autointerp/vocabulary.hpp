#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace autointerp {

/// Token id to surface-string table. The engine never runs a tokenizer; it
/// only needs to turn cached ids back into text.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> pieces) : pieces_(std::move(pieces)) {}

  /// Loads a JSON array of strings, index = token id.
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  const std::string& piece(std::uint32_t id) const;
  std::string detokenize(std::span<const std::uint32_t> ids) const;
  std::vector<std::string> pieces(std::span<const std::uint32_t> ids) const;

  std::size_t size() const noexcept { return pieces_.size(); }

 private:
  std::vector<std::string> pieces_;
};

}  // namespace autointerp
