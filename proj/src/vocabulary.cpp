#include "autointerp/vocabulary.hpp"

#include <fstream>

#include "autointerp/error.hpp"
#include "json.hpp"

namespace autointerp {

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open vocabulary file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
    return Vocabulary(j.get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("vocabulary " + path.string() + " is not a JSON array of strings: " + e.what());
  }
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  out << nlohmann::json(pieces_).dump() << '\n';
  if (!out) throw Error("failed writing vocabulary " + path.string());
}

const std::string& Vocabulary::piece(std::uint32_t id) const {
  if (id >= pieces_.size()) {
    throw DomainError("token id " + std::to_string(id) + " outside vocabulary of size " +
                      std::to_string(pieces_.size()));
  }
  return pieces_[id];
}

std::string Vocabulary::detokenize(std::span<const std::uint32_t> ids) const {
  std::string out;
  for (auto id : ids) out += piece(id);
  return out;
}

std::vector<std::string> Vocabulary::pieces(std::span<const std::uint32_t> ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (auto id : ids) out.push_back(piece(id));
  return out;
}

}  // namespace autointerp
