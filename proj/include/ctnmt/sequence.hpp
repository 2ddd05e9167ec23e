#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "ctnmt/ops.hpp"

namespace ctnmt {

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kMask = 4;
inline constexpr TokenId kNumReserved = 5;

using Sentence = std::vector<TokenId>;

// Row-major [batch, len] id matrix, right-padded with kPad.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<TokenId> ids;

  static TokenBatch from_sequences(const std::vector<Sentence>& seqs) {
    TokenBatch tb;
    tb.batch = seqs.size();
    for (const auto& s : seqs) tb.len = std::max(tb.len, s.size());
    tb.ids.assign(tb.batch * tb.len, kPad);
    for (std::size_t b = 0; b < seqs.size(); ++b) {
      std::copy(seqs[b].begin(), seqs[b].end(), tb.ids.begin() + static_cast<std::ptrdiff_t>(b * tb.len));
    }
    return tb;
  }

  TokenId at(std::size_t b, std::size_t t) const { return ids[b * len + t]; }

  // 1 where the position holds a real token.
  std::vector<std::uint8_t> valid() const {
    std::vector<std::uint8_t> v(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) v[i] = ids[i] != kPad;
    return v;
  }

  Sentence row(std::size_t b) const {
    Sentence s;
    for (std::size_t t = 0; t < len; ++t) {
      if (at(b, t) != kPad) s.push_back(at(b, t));
    }
    return s;
  }
};

struct PadMask {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<std::uint8_t> valid;

  static PadMask of(const TokenBatch& tb) { return {tb.batch, tb.len, tb.valid()}; }
};

}  // namespace ctnmt
