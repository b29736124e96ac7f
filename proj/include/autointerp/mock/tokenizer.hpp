#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace autointerp::mock {

struct MockToken {
  std::string_view text;
  std::size_t offset = 0;
};

/// Splits text into tokens of (leading whitespace run + non-whitespace run).
/// Trailing whitespace forms its own token. Concatenation restores the text.
std::vector<MockToken> tokenize(std::string_view text);

/// Non-whitespace part of a token with ASCII punctuation stripped from both ends.
std::string_view bare_word(std::string_view token);

}  // namespace autointerp::mock
