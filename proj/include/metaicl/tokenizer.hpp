#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace metaicl {

// Byte-level vocabulary: ids 0-255 are raw bytes, 256 is the alignment pad.
using TokenId = std::uint16_t;

inline constexpr TokenId kPadToken = 256;
inline constexpr int kVocabSize = 257;

std::vector<TokenId> encode(std::string_view text);

// Throws DataError if a PAD id is present.
std::string decode(std::span<const TokenId> tokens);

}  // namespace metaicl
