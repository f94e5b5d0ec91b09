#include "metaicl/tokenizer.hpp"

#include "metaicl/error.hpp"

namespace metaicl {

std::vector<TokenId> encode(std::string_view text) {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<TokenId>(c));
  return ids;
}

std::string decode(std::span<const TokenId> tokens) {
  std::string text;
  text.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= kPadToken) {
      throw DataError("decode: PAD/out-of-range token id " + std::to_string(tokens[i]) + " at position " +
                      std::to_string(i));
    }
    text.push_back(static_cast<char>(tokens[i]));
  }
  return text;
}

}  // namespace metaicl
