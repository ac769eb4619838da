// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace ccoe {

using TokenId = std::int32_t;
using Tokens = std::vector<TokenId>;

/// Byte-level vocabulary: ids 0-255 are raw bytes, followed by four specials.
namespace tokens {
inline constexpr TokenId kPad = 256;
inline constexpr TokenId kBos = 257;
inline constexpr TokenId kEos = 258;
inline constexpr TokenId kIndicator = 259;
inline constexpr std::size_t kVocabSize = 260;
}  // namespace tokens

Tokens encode_bytes(std::string_view text);

/// Drops special tokens; bytes are emitted verbatim.
std::string decode_bytes(const Tokens& ids);

inline bool is_special(TokenId id) { return id >= tokens::kPad; }

}  // namespace ccoe
