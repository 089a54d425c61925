#pragma once

// Differentiable tensor operations. Each op computes its forward value
// eagerly and records a closure that pushes output gradients to its inputs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "selfablate/blas.hpp"
#include "selfablate/tensor.hpp"

namespace selfablate {

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
  }
}

inline std::size_t last_dim(const Shape& s) { return s.back(); }
inline std::size_t leading_rows(const Shape& s) { return numel(s) / s.back(); }

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.size());
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return detail::make_result<T>(a.shape(), std::move(out), "add", {a, b},
                                [a, b](std::span<const T> g) {
                                  detail::accumulate(a, g);
                                  detail::accumulate(b, g);
                                });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.size());
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return detail::make_result<T>(a.shape(), std::move(out), "sub", {a, b},
                                [a, b](std::span<const T> g) {
                                  detail::accumulate(a, g);
                                  if (auto* gb = detail::grad_target(b)) {
                                    for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
                                  }
                                });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.size());
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return detail::make_result<T>(a.shape(), std::move(out), "mul", {a, b},
                                [a, b](std::span<const T> g) {
                                  auto x = a.data();
                                  auto y = b.data();
                                  if (auto* ga = detail::grad_target(a)) {
                                    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * y[i];
                                  }
                                  if (auto* gb = detail::grad_target(b)) {
                                    for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * x[i];
                                  }
                                });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.values());
  for (auto& v : out) v *= factor;
  return detail::make_result<T>(a.shape(), std::move(out), "scale", {a},
                                [a, factor](std::span<const T> g) {
                                  if (auto* ga = detail::grad_target(a)) {
                                    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * factor;
                                  }
                                });
}

/// x[..., n] + bias[n]
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t n = detail::last_dim(x.shape());
  if (bias.size() != n) throw ShapeError("add_bias: bias length does not match last dim");
  std::vector<T> out(x.values());
  auto b = bias.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % n];
  return detail::make_result<T>(x.shape(), std::move(out), "add_bias", {x, bias},
                                [x, bias, n](std::span<const T> g) {
                                  detail::accumulate(x, g);
                                  if (auto* gb = detail::grad_target(bias)) {
                                    for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i % n] += g[i];
                                  }
                                });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.values());
  for (auto& v : out) v = v > T{0} ? v : T{0};
  return detail::make_result<T>(x.shape(), std::move(out), "relu", {x},
                                [x](std::span<const T> g) {
                                  if (auto* gx = detail::grad_target(x)) {
                                    auto v = x.data();
                                    for (std::size_t i = 0; i < g.size(); ++i) {
                                      if (v[i] > T{0}) (*gx)[i] += g[i];
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  std::vector<T> out(x.values());
  for (auto& v : out) v = std::abs(v);
  return detail::make_result<T>(x.shape(), std::move(out), "abs", {x},
                                [x](std::span<const T> g) {
                                  if (auto* gx = detail::grad_target(x)) {
                                    auto v = x.data();
                                    for (std::size_t i = 0; i < g.size(); ++i) {
                                      (*gx)[i] += v[i] > T{0} ? g[i] : (v[i] < T{0} ? -g[i] : T{0});
                                    }
                                  }
                                });
}

/// GELU, tanh approximation (GPT-2 / GPT-Neo "gelu_new"), evaluated as
/// x * sigmoid(2z) with z = sqrt(2/pi) * (x + 0.044715 x^3).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kAlpha = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kBeta = static_cast<T>(0.044715);
  std::vector<T> out(x.size());
  auto sig = std::make_shared<std::vector<T>>(x.size());
  auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T u = v[i];
    const T s = T{1} / (T{1} + std::exp(T{-2} * kAlpha * (u + kBeta * u * u * u)));
    (*sig)[i] = s;
    out[i] = u * s;
  }
  return detail::make_result<T>(x.shape(), std::move(out), "gelu", {x},
                                [x, sig](std::span<const T> g) {
                                  auto* gx = detail::grad_target(x);
                                  if (!gx) return;
                                  auto v = x.data();
                                  const auto& sv = *sig;
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                    const T u = v[i];
                                    const T s = sv[i];
                                    const T dz = T{2} * kAlpha * (T{1} + T{3} * kBeta * u * u);
                                    (*gx)[i] += g[i] * (s + u * s * (T{1} - s) * dz);
                                  }
                                });
}

/// Element r of the output repeats input element r / factor along the last
/// dim: [..., n] -> [..., n * factor].
template <typename T>
Tensor<T> repeat_last(const Tensor<T>& x, std::size_t factor) {
  Shape shape = x.shape();
  shape.back() *= factor;
  std::vector<T> out(x.size() * factor);
  auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i / factor];
  return detail::make_result<T>(std::move(shape), std::move(out), "repeat_last", {x},
                                [x, factor](std::span<const T> g) {
                                  if (auto* gx = detail::grad_target(x)) {
                                    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i / factor] += g[i];
                                  }
                                });
}

// ----------------------------------------------------------------- structural

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  return detail::make_result<T>(std::move(shape), x.values(), "reshape", {x},
                                [x](std::span<const T> g) { detail::accumulate(x, g); });
}

/// Swaps the last two dimensions.
template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("transpose needs rank >= 2");
  const Shape& in = x.shape();
  const std::size_t rows = in[in.size() - 2];
  const std::size_t cols = in.back();
  const std::size_t batches = x.size() / (rows * cols);
  Shape shape = in;
  std::swap(shape[shape.size() - 2], shape.back());
  std::vector<T> out(x.size());
  auto v = x.data();
  for (std::size_t b = 0; b < batches; ++b) {
    const std::size_t off = b * rows * cols;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) out[off + c * rows + r] = v[off + r * cols + c];
    }
  }
  return detail::make_result<T>(std::move(shape), std::move(out), "transpose", {x},
                                [x, rows, cols, batches](std::span<const T> g) {
                                  auto* gx = detail::grad_target(x);
                                  if (!gx) return;
                                  for (std::size_t b = 0; b < batches; ++b) {
                                    const std::size_t off = b * rows * cols;
                                    for (std::size_t r = 0; r < rows; ++r) {
                                      for (std::size_t c = 0; c < cols; ++c) {
                                        (*gx)[off + r * cols + c] += g[off + c * rows + r];
                                      }
                                    }
                                  }
                                });
}

/// Same values, cut from the tape.
template <typename T>
Tensor<T> detach(const Tensor<T>& x) {
  return Tensor<T>(x.shape(), x.values(), false);
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total{0};
  for (T v : x.data()) total += v;
  return detail::make_result<T>({1}, {total}, "sum", {x}, [x](std::span<const T> g) {
    if (auto* gx = detail::grad_target(x)) {
      for (auto& v : *gx) v += g[0];
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.size()));
}

// --------------------------------------------------------------- linear algebra

/// [m, k] x [k, n] -> [m, n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const int m = static_cast<int>(a.dim(0));
  const int k = static_cast<int>(a.dim(1));
  const int n = static_cast<int>(b.dim(1));
  std::vector<T> out(static_cast<std::size_t>(m) * n);
  blas::gemm<T>(false, false, m, n, k, T{1}, a.data().data(), k, b.data().data(), n, T{0},
                out.data(), n);
  return detail::make_result<T>({a.dim(0), b.dim(1)}, std::move(out), "matmul", {a, b},
                                [a, b, m, n, k](std::span<const T> g) {
                                  if (auto* ga = detail::grad_target(a)) {
                                    blas::gemm<T>(false, true, m, k, n, T{1}, g.data(), n,
                                                  b.data().data(), n, T{1}, ga->data(), k);
                                  }
                                  if (auto* gb = detail::grad_target(b)) {
                                    blas::gemm<T>(true, false, k, n, m, T{1}, a.data().data(), k,
                                                  g.data(), n, T{1}, gb->data(), n);
                                  }
                                });
}

/// x[..., in] @ weight[in, out] (+ bias[out]).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias = nullptr) {
  if (weight.rank() != 2 || x.shape().back() != weight.dim(0)) {
    throw ShapeError("linear: input " + to_string(x.shape()) + " vs weight " +
                     to_string(weight.shape()));
  }
  const int rows = static_cast<int>(detail::leading_rows(x.shape()));
  const int in = static_cast<int>(weight.dim(0));
  const int out_dim = static_cast<int>(weight.dim(1));
  std::vector<T> out(static_cast<std::size_t>(rows) * out_dim);
  if (bias) {
    if (bias->size() != static_cast<std::size_t>(out_dim)) throw ShapeError("linear: bias size");
    auto b = bias->data();
    for (int r = 0; r < rows; ++r) std::copy(b.begin(), b.end(), out.begin() + r * out_dim);
  }
  blas::gemm<T>(false, false, rows, out_dim, in, T{1}, x.data().data(), in,
                weight.data().data(), out_dim, bias ? T{1} : T{0}, out.data(), out_dim);
  Shape shape = x.shape();
  shape.back() = static_cast<std::size_t>(out_dim);
  Tensor<T> b = bias ? *bias : Tensor<T>::zeros({1});
  const bool has_bias = bias != nullptr;
  return detail::make_result<T>(
      std::move(shape), std::move(out), "linear",
      {x, weight, b}, [x, weight, b, has_bias, rows, in, out_dim](std::span<const T> g) {
        if (auto* gx = detail::grad_target(x)) {
          blas::gemm<T>(false, true, rows, in, out_dim, T{1}, g.data(), out_dim,
                        weight.data().data(), out_dim, T{1}, gx->data(), in);
        }
        if (auto* gw = detail::grad_target(weight)) {
          blas::gemm<T>(true, false, in, out_dim, rows, T{1}, x.data().data(), in, g.data(),
                        out_dim, T{1}, gw->data(), out_dim);
        }
        if (has_bias) {
          if (auto* gb = detail::grad_target(b)) {
            for (int r = 0; r < rows; ++r) {
              for (int c = 0; c < out_dim; ++c) (*gb)[c] += g[r * out_dim + c];
            }
          }
        }
      });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  return linear(x, weight, &bias);
}

// -------------------------------------------------------------- normalization

/// Softmax along `axis` with max-subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
  const int rank = static_cast<int>(x.rank());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("softmax: axis out of range");
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < rank; ++i) inner *= s[i];
  const std::size_t len = s[axis];
  std::vector<T> out(x.size());
  auto v = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, v[base + j * inner]);
      double total = 0.0;  // double accumulation keeps the row sum within 1e-6 of 1 for float
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(v[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      const double inv = 1.0 / total;
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] = static_cast<T>(out[base + j * inner] * inv);
    }
  }
  auto probs = std::make_shared<std::vector<T>>(out);
  return detail::make_result<T>(
      s, std::move(out), "softmax", {x}, [x, probs, outer, inner, len](std::span<const T> g) {
        auto* gx = detail::grad_target(x);
        if (!gx) return;
        const auto& y = *probs;
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            T dot{0};
            for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
            for (std::size_t j = 0; j < len; ++j) {
              const std::size_t idx = base + j * inner;
              (*gx)[idx] += y[idx] * (g[idx] - dot);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = static_cast<T>(1e-5)) {
  const std::size_t n = detail::last_dim(x.shape());
  if (gain.size() != n || bias.size() != n) {
    throw ShapeError("layer_norm: gain/bias must match last dim " + std::to_string(n));
  }
  const std::size_t rows = x.size() / n;
  auto v = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  std::vector<T> out(x.size());
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = v.data() + r * n;
    T mu{0};
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<T>(n);
    T var{0};
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(n);
    const T rs = T{1} / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (row[j] - mu) * rs;
      (*xhat)[r * n + j] = h;
      out[r * n + j] = h * gv[j] + bv[j];
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), "layer_norm", {x, gain, bias},
      [x, gain, bias, xhat, rstd, rows, n](std::span<const T> g) {
        auto* gx = detail::grad_target(x);
        auto* gg = detail::grad_target(gain);
        auto* gb = detail::grad_target(bias);
        auto gv = gain.data();
        const auto& h = *xhat;
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t off = r * n;
          T mean_dh{0}, mean_dh_h{0};
          for (std::size_t j = 0; j < n; ++j) {
            const T dy = g[off + j];
            if (gg) (*gg)[j] += dy * h[off + j];
            if (gb) (*gb)[j] += dy;
            const T dh = dy * gv[j];
            mean_dh += dh;
            mean_dh_h += dh * h[off + j];
          }
          if (!gx) continue;
          mean_dh /= static_cast<T>(n);
          mean_dh_h /= static_cast<T>(n);
          for (std::size_t j = 0; j < n; ++j) {
            const T dh = g[off + j] * gv[j];
            (*gx)[off + j] += (*rstd)[r] * (dh - mean_dh - h[off + j] * mean_dh_h);
          }
        }
      });
}

// ------------------------------------------------------------------ embedding

/// Rows of `table` [vocab, dim] gathered by `ids`; output shape is
/// `ids_shape + [dim]`.
template <typename T>
Tensor<T> embedding(std::span<const std::int32_t> ids, const Shape& ids_shape,
                    const Tensor<T>& table) {
  if (numel(ids_shape) != ids.size()) throw ShapeError("embedding: ids shape mismatch");
  if (table.rank() != 2) throw ShapeError("embedding: table must be [vocab, dim]");
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  std::vector<T> out(ids.size() * d);
  auto tv = table.data();
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= vocab) {
      throw RangeError("embedding: id " + std::to_string(idx[i]) + " out of range [0," +
                       std::to_string(vocab) + ")");
    }
    std::copy_n(tv.begin() + idx[i] * d, d, out.begin() + i * d);
  }
  Shape shape = ids_shape;
  shape.push_back(d);
  return detail::make_result<T>(std::move(shape), std::move(out), "embedding", {table},
                                [table, idx = std::move(idx), d](std::span<const T> g) {
                                  auto* gt = detail::grad_target(table);
                                  if (!gt) return;
                                  for (std::size_t i = 0; i < idx.size(); ++i) {
                                    T* dst = gt->data() + idx[i] * d;
                                    for (std::size_t j = 0; j < d; ++j) dst[j] += g[i * d + j];
                                  }
                                });
}

// ---------------------------------------------------------------------- losses

/// Mean negative log-likelihood of `targets` under softmax(logits) over the
/// last dim. `logits` is [..., vocab] with one row per target.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
  const std::size_t vocab = detail::last_dim(logits.shape());
  const std::size_t rows = logits.size() / vocab;
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(rows) + " rows");
  }
  auto v = logits.data();
  auto probs = std::make_shared<std::vector<T>>(logits.size());
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  T total{0};
  for (std::size_t r = 0; r < rows; ++r) {
    if (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= vocab) {
      throw RangeError("cross_entropy: target id " + std::to_string(tgt[r]) + " out of range");
    }
    const T* row = v.data() + r * vocab;
    const T mx = *std::max_element(row, row + vocab);
    T z{0};
    for (std::size_t j = 0; j < vocab; ++j) {
      const T e = std::exp(row[j] - mx);
      (*probs)[r * vocab + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < vocab; ++j) (*probs)[r * vocab + j] /= z;
    total += std::log(z) + mx - row[tgt[r]];
  }
  const T loss = total / static_cast<T>(rows);
  return detail::make_result<T>(
      {1}, {loss}, "cross_entropy", {logits},
      [logits, probs, tgt = std::move(tgt), rows, vocab](std::span<const T> g) {
        auto* gl = detail::grad_target(logits);
        if (!gl) return;
        const T s = g[0] / static_cast<T>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < vocab; ++j) (*gl)[r * vocab + j] += s * (*probs)[r * vocab + j];
          (*gl)[r * vocab + tgt[r]] -= s;
        }
      });
}

// ------------------------------------------------------------------- attention

/// Causal multi-head scaled dot-product attention over q, k, v of shape
/// [batch, seq, d_model]. Returns the concatenated per-head outputs
/// [batch, seq, d_model] before any output projection.
template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::size_t n_heads) {
  detail::require_same_shape(q.shape(), k.shape(), "causal_attention");
  detail::require_same_shape(q.shape(), v.shape(), "causal_attention");
  if (q.rank() != 3) throw ShapeError("causal_attention expects [batch, seq, d_model]");
  const std::size_t B = q.dim(0), S = q.dim(1), D = q.dim(2);
  if (n_heads == 0 || D % n_heads != 0) throw ShapeError("causal_attention: heads must divide d_model");
  const std::size_t dh = D / n_heads;
  const T scale_factor = T{1} / std::sqrt(static_cast<T>(dh));
  const int iS = static_cast<int>(S), iD = static_cast<int>(D), idh = static_cast<int>(dh);

  auto probs = std::make_shared<std::vector<T>>(B * n_heads * S * S, T{0});
  std::vector<T> out(q.size(), T{0});
  const T* qd = q.data().data();
  const T* kd = k.data().data();
  const T* vd = v.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      T* p = probs->data() + (b * n_heads + h) * S * S;
      const std::size_t off = b * S * D + h * dh;
      blas::gemm<T>(false, true, iS, iS, idh, scale_factor, qd + off, iD, kd + off, iD, T{0}, p, iS);
      for (std::size_t i = 0; i < S; ++i) {
        T* row = p + i * S;
        T mx = row[0];
        for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, row[j]);
        T z{0};
        for (std::size_t j = 0; j <= i; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        for (std::size_t j = 0; j <= i; ++j) row[j] /= z;
        for (std::size_t j = i + 1; j < S; ++j) row[j] = T{0};
      }
      blas::gemm<T>(false, false, iS, idh, iS, T{1}, p, iS, vd + off, iD, T{0}, out.data() + off, iD);
    }
  }
  return detail::make_result<T>(
      q.shape(), std::move(out), "causal_attention", {q, k, v},
      [q, k, v, probs, B, S, D, n_heads, dh, scale_factor](std::span<const T> g) {
        auto* gq = detail::grad_target(q);
        auto* gk = detail::grad_target(k);
        auto* gv = detail::grad_target(v);
        const int iS = static_cast<int>(S), iD = static_cast<int>(D), idh = static_cast<int>(dh);
        std::vector<T> dp(S * S);
        const T* qd = q.data().data();
        const T* kd = k.data().data();
        const T* vd = v.data().data();
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < n_heads; ++h) {
            const T* p = probs->data() + (b * n_heads + h) * S * S;
            const std::size_t off = b * S * D + h * dh;
            if (gv) {
              blas::gemm<T>(true, false, iS, idh, iS, T{1}, p, iS, g.data() + off, iD, T{1},
                            gv->data() + off, iD);
            }
            if (!gq && !gk) continue;
            // dP = dOut V^T, then softmax backward into dS in place.
            blas::gemm<T>(false, true, iS, iS, idh, T{1}, g.data() + off, iD, vd + off, iD, T{0},
                          dp.data(), iS);
            for (std::size_t i = 0; i < S; ++i) {
              T dot{0};
              for (std::size_t j = 0; j <= i; ++j) dot += dp[i * S + j] * p[i * S + j];
              for (std::size_t j = 0; j <= i; ++j) dp[i * S + j] = p[i * S + j] * (dp[i * S + j] - dot);
              for (std::size_t j = i + 1; j < S; ++j) dp[i * S + j] = T{0};
            }
            if (gq) {
              blas::gemm<T>(false, false, iS, idh, iS, scale_factor, dp.data(), iS, kd + off, iD,
                            T{1}, gq->data() + off, iD);
            }
            if (gk) {
              blas::gemm<T>(true, false, iS, idh, iS, scale_factor, dp.data(), iS, qd + off, iD,
                            T{1}, gk->data() + off, iD);
            }
          }
        }
      });
}

// ------------------------------------------------------------------- selection

/// Indices of the k largest entries of each slice along the last dim, in
/// descending value order; ties go to the lower index. Not differentiable.
/// Result has shape [..., k] stored as int32.
template <typename T>
std::vector<std::int32_t> topk_indices(const Tensor<T>& x, std::size_t k) {
  const std::size_t n = detail::last_dim(x.shape());
  if (k < 1 || k > n) {
    throw RangeError("topk_indices: k=" + std::to_string(k) + " outside [1," + std::to_string(n) + "]");
  }
  const std::size_t rows = x.size() / n;
  std::vector<std::int32_t> out(rows * k);
  std::vector<std::int32_t> order(n);
  auto v = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = v.data() + r * n;
    std::iota(order.begin(), order.end(), 0);
    auto before = [row](std::int32_t a, std::int32_t b) {
      return row[a] > row[b] || (row[a] == row[b] && a < b);
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), before);
    std::copy_n(order.begin(), k, out.begin() + r * k);
  }
  return out;
}

/// 1-D convenience form operating on a plain vector.
template <typename T>
std::vector<std::int32_t> topk_indices(std::span<const T> x, std::size_t k) {
  return topk_indices(Tensor<T>({x.size()}, std::vector<T>(x.begin(), x.end())), k);
}

}  // namespace selfablate
