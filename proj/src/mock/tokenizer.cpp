#include "autointerp/mock/tokenizer.hpp"

#include <cctype>

namespace autointerp::mock {

namespace {
bool space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }
}  // namespace

std::vector<MockToken> tokenize(std::string_view text) {
  std::vector<MockToken> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const std::size_t start = i;
    while (i < text.size() && space(text[i])) ++i;
    while (i < text.size() && !space(text[i])) ++i;
    out.push_back({text.substr(start, i - start), start});
  }
  return out;
}

std::string_view bare_word(std::string_view token) {
  while (!token.empty() && (space(token.front()) || std::ispunct(static_cast<unsigned char>(token.front())))) {
    token.remove_prefix(1);
  }
  while (!token.empty() && (space(token.back()) || std::ispunct(static_cast<unsigned char>(token.back())))) {
    token.remove_suffix(1);
  }
  return token;
}

}  // namespace autointerp::mock
