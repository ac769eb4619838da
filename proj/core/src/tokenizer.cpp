// SPDX-License-Identifier: Apache-2.0
#include "ccoe/tokenizer.hpp"

namespace ccoe {

Tokens encode_bytes(std::string_view text) {
  Tokens out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<TokenId>(c));
  return out;
}

std::string decode_bytes(const Tokens& ids) {
  std::string out;
  out.reserve(ids.size());
  for (TokenId id : ids) {
    if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
  }
  return out;
}

}  // namespace ccoe
