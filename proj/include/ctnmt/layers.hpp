#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ctnmt/ops.hpp"
#include "ctnmt/sequence.hpp"

namespace ctnmt {

namespace init {

// Standard normal via Box-Muller on the portable uniform, so float and double models
// built from one seed hold the same values.
inline double standard_normal(std::mt19937_64& rng) {
  double u1 = detail::unit_uniform(rng);
  const double u2 = detail::unit_uniform(rng);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

inline std::vector<double> normal(std::size_t n, double stddev, std::mt19937_64& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = stddev * standard_normal(rng);
  return v;
}

inline std::vector<double> xavier_uniform(std::size_t fan_in, std::size_t fan_out,
                                          std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(fan_in * fan_out);
  for (auto& x : v) x = (2.0 * detail::unit_uniform(rng) - 1.0) * limit;
  return v;
}

inline std::vector<double> constant(std::size_t n, double value) { return std::vector<double>(n, value); }

inline std::vector<double> identity(std::size_t d) {
  std::vector<double> v(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) v[i * d + i] = 1.0;
  return v;
}

// Rows of a random orthogonal-ish matrix from Gram-Schmidt on Gaussian rows (rows <= cols),
// transposed as needed for [rows, cols] with rows > cols.
inline std::vector<double> orthogonal(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  const bool flip = rows > cols;
  const std::size_t r = flip ? cols : rows, c = flip ? rows : cols;
  std::vector<double> m = normal(r * c, 1.0, rng);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < c; ++k) dot += m[i * c + k] * m[j * c + k];
      for (std::size_t k = 0; k < c; ++k) m[i * c + k] -= dot * m[j * c + k];
    }
    double norm = 0.0;
    for (std::size_t k = 0; k < c; ++k) norm += m[i * c + k] * m[i * c + k];
    norm = std::sqrt(norm);
    for (std::size_t k = 0; k < c; ++k) m[i * c + k] /= norm;
  }
  if (!flip) return m;
  std::vector<double> t(rows * cols);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t k = 0; k < c; ++k) t[k * cols + i] = m[i * c + k];
  }
  return t;
}

}  // namespace init

// Ordered, named collection of trainable tensors owned by one model.
template <typename T>
class ParamSet {
 public:
  Tensor<T> add(std::string name, Shape shape, const std::vector<double>& values) {
    std::vector<T> data(values.begin(), values.end());
    Tensor<T> t(std::move(shape), std::move(data), true);
    items_.push_back({std::move(name), t});
    return t;
  }

  const std::vector<NamedTensor<T>>& items() const { return items_; }

  std::vector<Tensor<T>> tensors() const {
    std::vector<Tensor<T>> out;
    for (const auto& it : items_) out.push_back(it.tensor);
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& it : items_) n += it.tensor.numel();
    return n;
  }

  void set_requires_grad(bool flag) {
    for (auto& it : items_) it.tensor.set_requires_grad(flag);
  }

  void zero_grad() {
    for (auto& it : items_) it.tensor.zero_grad();
  }

 private:
  std::vector<NamedTensor<T>> items_;
};

// Training-mode switches threaded through every forward pass.
struct RunContext {
  bool training = false;
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;

  template <typename T>
  Tensor<T> drop(const Tensor<T>& x) const {
    if (!training || dropout <= 0.0 || rng == nullptr) return x;
    return ctnmt::dropout(x, dropout, *rng);
  }
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(ParamSet<T>& ps, const std::string& name, std::size_t in, std::size_t out,
         std::mt19937_64& rng, bool with_bias = true) {
    weight_ = ps.add(name + ".weight", {in, out}, init::xavier_uniform(in, out, rng));
    if (with_bias) bias_ = ps.add(name + ".bias", {out}, init::constant(out, 0.0));
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto y = matmul(x, weight_);
    return bias_.defined() ? add(y, bias_) : y;
  }

  const Tensor<T>& weight() const { return weight_; }

 private:
  Tensor<T> weight_;
  Tensor<T> bias_;
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamSet<T>& ps, const std::string& name, std::size_t d) {
    gain_ = ps.add(name + ".gain", {d}, init::constant(d, 1.0));
    bias_ = ps.add(name + ".bias", {d}, init::constant(d, 0.0));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain_, bias_); }

 private:
  Tensor<T> gain_;
  Tensor<T> bias_;
};

template <typename T>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamSet<T>& ps, const std::string& name, std::size_t d, std::size_t heads,
                     std::mt19937_64& rng)
      : heads_(heads),
        q_(ps, name + ".q", d, d, rng),
        k_(ps, name + ".k", d, d, rng),
        v_(ps, name + ".v", d, d, rng),
        o_(ps, name + ".o", d, d, rng) {}

  // queries: [batch*q_len, d]; keys_values: [batch*k_len, d].
  Tensor<T> operator()(const Tensor<T>& queries, const Tensor<T>& keys_values, std::size_t batch,
                       std::size_t q_len, std::size_t k_len, std::span<const std::uint8_t> key_valid,
                       bool causal) const {
    AttentionLayout lay{batch, q_len, k_len, heads_, causal};
    auto ctx = scaled_dot_attention(q_(queries), k_(keys_values), v_(keys_values), lay, key_valid);
    return o_(ctx);
  }

 private:
  std::size_t heads_ = 1;
  Linear<T> q_, k_, v_, o_;
};

template <typename T>
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParamSet<T>& ps, const std::string& name, std::size_t d, std::size_t d_ff,
              std::mt19937_64& rng)
      : up_(ps, name + ".up", d, d_ff, rng), down_(ps, name + ".down", d_ff, d, rng) {}

  Tensor<T> operator()(const Tensor<T>& x, const RunContext& ctx) const {
    return down_(ctx.drop(relu(up_(x))));
  }

 private:
  Linear<T> up_, down_;
};

// Pre-norm self-attention block; optionally causal.
template <typename T>
class EncoderBlock {
 public:
  EncoderBlock() = default;
  EncoderBlock(ParamSet<T>& ps, const std::string& name, std::size_t d, std::size_t heads,
               std::size_t d_ff, std::mt19937_64& rng)
      : norm_attn_(ps, name + ".norm_attn", d),
        attn_(ps, name + ".attn", d, heads, rng),
        norm_ffn_(ps, name + ".norm_ffn", d),
        ffn_(ps, name + ".ffn", d, d_ff, rng) {}

  Tensor<T> operator()(const Tensor<T>& x, const PadMask& mask, bool causal,
                       const RunContext& ctx) const {
    auto h = norm_attn_(x);
    auto a = attn_(h, h, mask.batch, mask.len, mask.len, mask.valid, causal);
    auto y = add(x, ctx.drop(a));
    return add(y, ctx.drop(ffn_(norm_ffn_(y), ctx)));
  }

 private:
  LayerNorm<T> norm_attn_;
  MultiHeadAttention<T> attn_;
  LayerNorm<T> norm_ffn_;
  FeedForward<T> ffn_;
};

// Pre-norm causal self-attention, cross-attention to encoder memory, feed-forward.
template <typename T>
class DecoderBlock {
 public:
  DecoderBlock() = default;
  DecoderBlock(ParamSet<T>& ps, const std::string& name, std::size_t d, std::size_t heads,
               std::size_t d_ff, std::mt19937_64& rng)
      : norm_self_(ps, name + ".norm_self", d),
        self_attn_(ps, name + ".self_attn", d, heads, rng),
        norm_cross_(ps, name + ".norm_cross", d),
        cross_attn_(ps, name + ".cross_attn", d, heads, rng),
        norm_ffn_(ps, name + ".norm_ffn", d),
        ffn_(ps, name + ".ffn", d, d_ff, rng) {}

  Tensor<T> operator()(const Tensor<T>& x, const PadMask& tgt_mask, const Tensor<T>& memory,
                       const PadMask& src_mask, const RunContext& ctx) const {
    auto h = norm_self_(x);
    auto y = add(x, ctx.drop(self_attn_(h, h, tgt_mask.batch, tgt_mask.len, tgt_mask.len,
                                        tgt_mask.valid, true)));
    auto c = cross_attn_(norm_cross_(y), memory, tgt_mask.batch, tgt_mask.len, src_mask.len,
                         src_mask.valid, false);
    y = add(y, ctx.drop(c));
    return add(y, ctx.drop(ffn_(norm_ffn_(y), ctx)));
  }

 private:
  LayerNorm<T> norm_self_;
  MultiHeadAttention<T> self_attn_;
  LayerNorm<T> norm_cross_;
  MultiHeadAttention<T> cross_attn_;
  LayerNorm<T> norm_ffn_;
  FeedForward<T> ffn_;
};

// Sinusoidal encoding: column 2i holds sin(pos / 10000^(2i/d)), column 2i+1 the cosine.
template <typename T>
Tensor<T> positional_encoding(std::size_t len, std::size_t d) {
  if (d % 2 != 0) throw DimensionError("positional_encoding: width must be even, got " + std::to_string(d));
  std::vector<T> pe(len * d);
  for (std::size_t pos = 0; pos < len; ++pos) {
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double angle = static_cast<double>(pos) /
                           std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d));
      pe[pos * d + 2 * i] = static_cast<T>(std::sin(angle));
      pe[pos * d + 2 * i + 1] = static_cast<T>(std::cos(angle));
    }
  }
  return Tensor<T>({len, d}, std::move(pe));
}

// Scaled token embeddings plus positions for a padded batch: [batch*len, d].
template <typename T>
Tensor<T> embed_tokens(const Tensor<T>& table, const TokenBatch& tokens) {
  const std::size_t d = table.dim(1);
  auto emb = scale(embedding_lookup(table, std::span<const TokenId>(tokens.ids)),
                   static_cast<T>(std::sqrt(static_cast<double>(d))));
  auto pe = positional_encoding<T>(tokens.len, d);
  std::vector<T> tiled(tokens.batch * tokens.len * d);
  for (std::size_t b = 0; b < tokens.batch; ++b) {
    std::copy(pe.data().begin(), pe.data().end(), tiled.begin() + static_cast<std::ptrdiff_t>(b * tokens.len * d));
  }
  return add(emb, Tensor<T>({tokens.batch * tokens.len, d}, std::move(tiled)));
}

}  // namespace ctnmt
