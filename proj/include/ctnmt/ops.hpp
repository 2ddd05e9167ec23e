#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ctnmt/tensor.hpp"

namespace ctnmt {

using TokenId = std::int32_t;

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
  if (!grad_enabled()) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Uniform double in [0, 1) from the top 53 bits; identical across platforms.
inline double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  detail::MatMap<T>(out.data(), m, n).noalias() =
      detail::ConstMatMap<T>(a.ptr(), m, k) * detail::ConstMatMap<T>(b.ptr(), k, n);
  const bool track = detail::tracking<T>({&a, &b});
  Tensor<T> result({m, n}, std::move(out), track);
  if (track) {
    active_tape<T>().push("matmul", [an = a.node(), bn = b.node(), on = result.node(), m, k, n] {
      if (on->grad.empty()) return;
      detail::ConstMatMap<T> g(on->grad.data(), m, n);
      if (an->requires_grad) {
        detail::MatMap<T>(an->grad_buffer().data(), m, k).noalias() +=
            g * detail::ConstMatMap<T>(bn->data.data(), k, n).transpose();
      }
      if (bn->requires_grad) {
        detail::MatMap<T>(bn->grad_buffer().data(), k, n).noalias() +=
            detail::ConstMatMap<T>(an->data.data(), m, k).transpose() * g;
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Elementwise

enum class BinaryKind { add, sub, mul };

// Elementwise binary op. The operand with fewer elements may broadcast when its shape
// equals the trailing dimensions of the other.
template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind) {
  const Shape* out_shape = &a.shape();
  if (a.shape() != b.shape()) {
    if (detail::is_suffix(b.shape(), a.shape())) {
      out_shape = &a.shape();
    } else if (detail::is_suffix(a.shape(), b.shape())) {
      out_shape = &b.shape();
    } else {
      throw DimensionError("elementwise: incompatible shapes " + shape_str(a.shape()) + " and " +
                           shape_str(b.shape()));
    }
  }
  const std::size_t n = shape_numel(*out_shape);
  const std::size_t na = a.numel(), nb = b.numel();
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  std::vector<T> out(n);
  switch (kind) {
    case BinaryKind::add:
      for (std::size_t i = 0; i < n; ++i) out[i] = pa[i % na] + pb[i % nb];
      break;
    case BinaryKind::sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = pa[i % na] - pb[i % nb];
      break;
    case BinaryKind::mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = pa[i % na] * pb[i % nb];
      break;
  }
  const bool track = detail::tracking<T>({&a, &b});
  Tensor<T> result(*out_shape, std::move(out), track);
  if (track) {
    static constexpr std::string_view names[] = {"add", "sub", "mul"};
    active_tape<T>().push(names[static_cast<int>(kind)],
                          [an = a.node(), bn = b.node(), on = result.node(), kind, n, na, nb] {
      if (on->grad.empty()) return;
      const T* g = on->grad.data();
      if (an->requires_grad) {
        T* ga = an->grad_buffer().data();
        if (kind == BinaryKind::mul) {
          const T* vb = bn->data.data();
          for (std::size_t i = 0; i < n; ++i) ga[i % na] += g[i] * vb[i % nb];
        } else {
          for (std::size_t i = 0; i < n; ++i) ga[i % na] += g[i];
        }
      }
      if (bn->requires_grad) {
        T* gb = bn->grad_buffer().data();
        if (kind == BinaryKind::mul) {
          const T* va = an->data.data();
          for (std::size_t i = 0; i < n; ++i) gb[i % nb] += g[i] * va[i % na];
        } else if (kind == BinaryKind::sub) {
          for (std::size_t i = 0; i < n; ++i) gb[i % nb] -= g[i];
        } else {
          for (std::size_t i = 0; i < n; ++i) gb[i % nb] += g[i];
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinaryKind::add); }
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinaryKind::sub); }
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinaryKind::mul); }

namespace detail {

// Unary map with derivative expressed through input x and output y.
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(std::string_view name, const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  const std::size_t n = x.numel();
  std::vector<T> out(n);
  const T* px = x.ptr();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(px[i]);
  const bool track = tracking<T>({&x});
  Tensor<T> result(x.shape(), std::move(out), track);
  if (track) {
    active_tape<T>().push(name, [xn = x.node(), on = result.node(), deriv, n] {
      if (on->grad.empty()) return;
      T* gx = xn->grad_buffer().data();
      const T* g = on->grad.data();
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * deriv(xn->data[i], on->data[i]);
    });
  }
  return result;
}

}  // namespace detail

template <typename T>
T sigmoid_value(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary<T>("sigmoid", x, [](T v) { return sigmoid_value(v); },
                          [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary<T>("relu", x, [](T v) { return v > T(0) ? v : T(0); },
                          [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

// Exact Gaussian-CDF form x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  return detail::unary<T>(
      "gelu", x,
      [](T v) { return T(0.5) * v * (T(1) + std::erf(v * T(M_SQRT1_2))); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * T(M_SQRT1_2)));
        const T pdf = std::exp(T(-0.5) * v * v) * T(0.3989422804014327);
        return cdf + v * pdf;
      });
}

// scale * x + shift.
template <typename T>
Tensor<T> affine(const Tensor<T>& x, T scale, T shift) {
  return detail::unary<T>("affine", x, [scale, shift](T v) { return scale * v + shift; },
                          [scale](T, T) { return scale; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return detail::unary<T>("scale", x, [factor](T v) { return factor * v; },
                          [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += v;
  const bool track = detail::tracking<T>({&x});
  Tensor<T> result({1}, {static_cast<T>(acc)}, track);
  if (track) {
    active_tape<T>().push("sum", [xn = x.node(), on = result.node()] {
      if (on->grad.empty()) return;
      const T g = on->grad[0];
      for (T& v : xn->grad_buffer()) v += g;
    });
  }
  return result;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// Inverted dropout; identity when p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout probability must be < 1");
  const std::size_t n = x.numel();
  auto keep = std::make_shared<std::vector<T>>(n);
  const T kept = static_cast<T>(1.0 / (1.0 - p));
  for (auto& m : *keep) m = detail::unit_uniform(rng) < p ? T(0) : kept;
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * (*keep)[i];
  const bool track = detail::tracking<T>({&x});
  Tensor<T> result(x.shape(), std::move(out), track);
  if (track) {
    active_tape<T>().push("dropout", [xn = x.node(), on = result.node(), keep, n] {
      if (on->grad.empty()) return;
      T* gx = xn->grad_buffer().data();
      for (std::size_t i = 0; i < n; ++i) gx[i] += on->grad[i] * (*keep)[i];
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Normalisation

// Max-subtracted softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(axis);
  std::vector<T> out(x.numel());
  const T* px = x.ptr();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = px[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, px[base + j * inner]);
      T z = 0;
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(px[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  }
  const bool track = detail::tracking<T>({&x});
  Tensor<T> result(x.shape(), std::move(out), track);
  if (track) {
    active_tape<T>().push("softmax", [xn = x.node(), on = result.node(), outer, inner, len] {
      if (on->grad.empty()) return;
      T* gx = xn->grad_buffer().data();
      const T* g = on->grad.data();
      const T* y = on->data.data();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          T dot = 0;
          for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t idx = base + j * inner;
            gx[idx] += y[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return result;
}

// Normalises each vector along the last dimension, then applies gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     double eps = 1e-5) {
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match last dim of " +
                         shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(x.numel());
  const T* px = x.ptr();
  const T* pg = gain.ptr();
  const T* pb = bias.ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = px + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const T rs = static_cast<T>(1.0 / std::sqrt(var + eps));
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = static_cast<T>(row[j] - mu) * rs;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * pg[j] + pb[j];
    }
  }
  const bool track = detail::tracking<T>({&x, &gain, &bias});
  Tensor<T> result(x.shape(), std::move(out), track);
  if (track) {
    active_tape<T>().push("layer_norm", [xn = x.node(), gn = gain.node(), bn = bias.node(),
                                         on = result.node(), xhat, rstd, rows, d] {
      if (on->grad.empty()) return;
      const T* g = on->grad.data();
      if (gn->requires_grad || bn->requires_grad) {
        T* gg = gn->requires_grad ? gn->grad_buffer().data() : nullptr;
        T* gb = bn->requires_grad ? bn->grad_buffer().data() : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < d; ++j) {
            if (gg) gg[j] += g[r * d + j] * (*xhat)[r * d + j];
            if (gb) gb[j] += g[r * d + j];
          }
        }
      }
      if (xn->requires_grad) {
        T* gx = xn->grad_buffer().data();
        const T* gain_v = gn->data.data();
        for (std::size_t r = 0; r < rows; ++r) {
          T mean_dh = 0, mean_dh_h = 0;
          for (std::size_t j = 0; j < d; ++j) {
            const T dh = g[r * d + j] * gain_v[j];
            mean_dh += dh;
            mean_dh_h += dh * (*xhat)[r * d + j];
          }
          mean_dh /= static_cast<T>(d);
          mean_dh_h /= static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const T dh = g[r * d + j] * gain_v[j];
            gx[r * d + j] += (*rstd)[r] * (dh - mean_dh - (*xhat)[r * d + j] * mean_dh_h);
          }
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Embeddings and attention

// Gathers rows of `table`; gradients scatter back into the touched rows only.
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const TokenId> ids) {
  if (table.rank() != 2) throw DimensionError("embedding table must be rank 2");
  if (ids.empty()) throw DimensionError("embedding_lookup: empty id list");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexError("embedding_lookup: id " + std::to_string(ids[i]) + " at position " +
                       std::to_string(i) + " outside vocabulary of size " + std::to_string(vocab));
    }
  }
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(table.ptr() + static_cast<std::size_t>(ids[i]) * d, d, out.begin() + i * d);
  }
  const bool track = detail::tracking<T>({&table});
  Tensor<T> result({ids.size(), d}, std::move(out), track);
  if (track) {
    active_tape<T>().push("embedding", [tn = table.node(), on = result.node(),
                                        idv = std::vector<TokenId>(ids.begin(), ids.end()), d] {
      if (on->grad.empty()) return;
      T* gt = tn->grad_buffer().data();
      for (std::size_t i = 0; i < idv.size(); ++i) {
        T* row = gt + static_cast<std::size_t>(idv[i]) * d;
        for (std::size_t j = 0; j < d; ++j) row[j] += on->grad[i * d + j];
      }
    });
  }
  return result;
}

struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t q_len = 1;
  std::size_t k_len = 1;
  std::size_t heads = 1;
  bool causal = false;
};

// Scaled dot-product attention over `batch` stacked sequences and `heads` column groups.
// q: [batch*q_len, d], k/v: [batch*k_len, d]. key_valid (batch*k_len, empty = all valid)
// excludes padded keys; causal additionally hides keys j > i. Query rows with no visible
// key produce zeros.
template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               const AttentionLayout& lay, std::span<const std::uint8_t> key_valid) {
  const std::size_t d = q.shape().back();
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || k.dim(1) != d || v.dim(1) != d ||
      q.dim(0) != lay.batch * lay.q_len || k.dim(0) != lay.batch * lay.k_len ||
      v.dim(0) != lay.batch * lay.k_len) {
    throw DimensionError("attention: shapes q" + shape_str(q.shape()) + " k" +
                         shape_str(k.shape()) + " v" + shape_str(v.shape()) +
                         " do not match layout");
  }
  if (lay.heads == 0 || d % lay.heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(lay.heads) + " heads");
  }
  if (!key_valid.empty() && key_valid.size() != lay.batch * lay.k_len) {
    throw DimensionError("attention: key mask length mismatch");
  }
  const std::size_t B = lay.batch, Lq = lay.q_len, Lk = lay.k_len, H = lay.heads, dh = d / H;
  const T scale_factor = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  auto probs = std::make_shared<std::vector<T>>(B * H * Lq * Lk, T(0));
  auto visible = [&, causal = lay.causal](std::size_t b, std::size_t i, std::size_t j) {
    if (causal && j > i) return false;
    return key_valid.empty() || key_valid[b * Lk + j] != 0;
  };
  std::vector<T> out(B * Lq * d, T(0));
  detail::RowMat<T> scores(Lq, Lk);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      detail::ConstStridedMap<T> qb(q.ptr() + b * Lq * d + h * dh, Lq, dh, Eigen::OuterStride<>(d));
      detail::ConstStridedMap<T> kb(k.ptr() + b * Lk * d + h * dh, Lk, dh, Eigen::OuterStride<>(d));
      detail::ConstStridedMap<T> vb(v.ptr() + b * Lk * d + h * dh, Lk, dh, Eigen::OuterStride<>(d));
      scores.noalias() = qb * kb.transpose();
      detail::MatMap<T> pb(probs->data() + (b * H + h) * Lq * Lk, Lq, Lk);
      for (std::size_t i = 0; i < Lq; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < Lk; ++j) {
          if (visible(b, i, j)) mx = std::max(mx, scores(i, j) * scale_factor);
        }
        if (mx == -std::numeric_limits<T>::infinity()) continue;  // fully masked row stays zero
        T z = 0;
        for (std::size_t j = 0; j < Lk; ++j) {
          if (!visible(b, i, j)) continue;
          const T e = std::exp(scores(i, j) * scale_factor - mx);
          pb(i, j) = e;
          z += e;
        }
        pb.row(i) /= z;
      }
      detail::StridedMap<T> ob(out.data() + b * Lq * d + h * dh, Lq, dh, Eigen::OuterStride<>(d));
      ob.noalias() = pb * vb;
    }
  }
  const bool track = detail::tracking<T>({&q, &k, &v});
  Tensor<T> result({B * Lq, d}, std::move(out), track);
  if (track) {
    active_tape<T>().push("attention", [qn = q.node(), kn = k.node(), vn = v.node(),
                                        on = result.node(), probs, B, Lq, Lk, H, dh, d,
                                        scale_factor] {
      if (on->grad.empty()) return;
      T* gq = qn->requires_grad ? qn->grad_buffer().data() : nullptr;
      T* gk = kn->requires_grad ? kn->grad_buffer().data() : nullptr;
      T* gv = vn->requires_grad ? vn->grad_buffer().data() : nullptr;
      detail::RowMat<T> dp(Lq, Lk);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
          const std::size_t qoff = b * Lq * d + h * dh, koff = b * Lk * d + h * dh;
          const Eigen::OuterStride<> st(d);
          detail::ConstStridedMap<T> go(on->grad.data() + qoff, Lq, dh, st);
          detail::ConstStridedMap<T> qb(qn->data.data() + qoff, Lq, dh, st);
          detail::ConstStridedMap<T> kb(kn->data.data() + koff, Lk, dh, st);
          detail::ConstStridedMap<T> vb(vn->data.data() + koff, Lk, dh, st);
          detail::ConstMatMap<T> pb(probs->data() + (b * H + h) * Lq * Lk, Lq, Lk);
          if (gv) detail::StridedMap<T>(gv + koff, Lk, dh, st).noalias() += pb.transpose() * go;
          if (!gq && !gk) continue;
          dp.noalias() = go * vb.transpose();
          for (std::size_t i = 0; i < Lq; ++i) {
            const T dot = pb.row(i).dot(dp.row(i));
            for (std::size_t j = 0; j < Lk; ++j) dp(i, j) = pb(i, j) * (dp(i, j) - dot) * scale_factor;
          }
          if (gq) detail::StridedMap<T>(gq + qoff, Lq, dh, st).noalias() += dp * kb;
          if (gk) detail::StridedMap<T>(gk + koff, Lk, dh, st).noalias() += dp.transpose() * qb;
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Losses

// Mean label-smoothed negative log-likelihood over positions whose target is not pad_id.
// The reference distribution puts 1 - epsilon on the target and epsilon / (V - 1) on every
// other class.
template <typename T>
Tensor<T> cross_entropy_smoothed(const Tensor<T>& logits, std::span<const TokenId> targets,
                                 double epsilon, TokenId pad_id) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  if (epsilon < 0.0 || epsilon >= 1.0) throw std::invalid_argument("label smoothing must be in [0,1)");
  const std::size_t n = logits.dim(0), V = logits.dim(1);
  if (epsilon > 0.0 && V < 2) throw DimensionError("label smoothing needs at least two classes");
  const double off = V > 1 ? epsilon / static_cast<double>(V - 1) : 0.0;
  const double on_target = 1.0 - epsilon;
  auto probs = std::make_shared<std::vector<T>>(n * V, T(0));
  double total = 0.0;
  std::size_t count = 0;
  const T* px = logits.ptr();
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] == pad_id) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= V) {
      throw IndexError("cross_entropy: target " + std::to_string(targets[i]) + " at position " +
                       std::to_string(i) + " outside " + std::to_string(V) + " classes");
    }
    const T* row = px + i * V;
    const T mx = *std::max_element(row, row + V);
    double z = 0.0;
    for (std::size_t c = 0; c < V; ++c) z += std::exp(static_cast<double>(row[c] - mx));
    const double lse = static_cast<double>(mx) + std::log(z);
    double sum_logp = 0.0;
    for (std::size_t c = 0; c < V; ++c) {
      const double lp = row[c] - lse;
      (*probs)[i * V + c] = static_cast<T>(std::exp(lp));
      sum_logp += lp;
    }
    const double lp_target = row[targets[i]] - lse;
    total += -(on_target * lp_target + off * (sum_logp - lp_target));
    ++count;
  }
  if (count == 0) throw EmptyLossError("cross_entropy: every position is padding");
  const bool track = detail::tracking<T>({&logits});
  Tensor<T> result({1}, {static_cast<T>(total / static_cast<double>(count))}, track);
  if (track) {
    active_tape<T>().push("cross_entropy", [ln = logits.node(), on = result.node(), probs,
                                            tv = std::vector<TokenId>(targets.begin(), targets.end()),
                                            pad_id, n, V, off, on_target, count] {
      if (on->grad.empty()) return;
      const T g = on->grad[0] / static_cast<T>(count);
      T* gl = ln->grad_buffer().data();
      for (std::size_t i = 0; i < n; ++i) {
        if (tv[i] == pad_id) continue;
        for (std::size_t c = 0; c < V; ++c) {
          const double q = static_cast<std::size_t>(tv[i]) == c ? on_target : off;
          gl[i * V + c] += g * static_cast<T>((*probs)[i * V + c] - q);
        }
      }
    });
  }
  return result;
}

// Mean squared difference over rows flagged in `row_mask` (empty = every row) and all
// feature columns.
template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b, std::span<const std::uint8_t> row_mask = {}) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mse: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t rows = a.dim(0), width = a.numel() / rows;
  if (!row_mask.empty() && row_mask.size() != rows) {
    throw DimensionError("mse: mask length " + std::to_string(row_mask.size()) + " vs " +
                         std::to_string(rows) + " rows");
  }
  std::size_t valid_rows = 0;
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!row_mask.empty() && !row_mask[r]) continue;
    ++valid_rows;
    for (std::size_t j = 0; j < width; ++j) {
      const double diff = static_cast<double>(a[r * width + j]) - static_cast<double>(b[r * width + j]);
      total += diff * diff;
    }
  }
  if (valid_rows == 0) throw EmptyLossError("mse: mask selects no positions");
  const double denom = static_cast<double>(valid_rows * width);
  const bool track = detail::tracking<T>({&a, &b});
  Tensor<T> result({1}, {static_cast<T>(total / denom)}, track);
  if (track) {
    active_tape<T>().push("mse", [an = a.node(), bn = b.node(), on = result.node(),
                                  mask = std::vector<std::uint8_t>(row_mask.begin(), row_mask.end()),
                                  rows, width, denom] {
      if (on->grad.empty()) return;
      const T coef = static_cast<T>(2.0 * on->grad[0] / denom);
      T* ga = an->requires_grad ? an->grad_buffer().data() : nullptr;
      T* gb = bn->requires_grad ? bn->grad_buffer().data() : nullptr;
      for (std::size_t r = 0; r < rows; ++r) {
        if (!mask.empty() && !mask[r]) continue;
        for (std::size_t j = 0; j < width; ++j) {
          const std::size_t idx = r * width + j;
          const T gdiff = coef * (an->data[idx] - bn->data[idx]);
          if (ga) ga[idx] += gdiff;
          if (gb) gb[idx] -= gdiff;
        }
      }
    });
  }
  return result;
}

}  // namespace ctnmt
