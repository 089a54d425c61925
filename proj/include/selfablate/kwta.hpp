#pragma once

// k-winners-take-all gating with a straight-through estimator.
//
// For per-position unit scores x (last dim = n units) and a keep count k:
//   gamma = (x_k + x_{k+1}) / 2
//   T     = max(x_k - x_{k+1}, kTemperatureFloor)
//   w_i   = softmax_i((x_i - gamma) / T)
// where x_k is the k-th largest score. The forward gate is the binary top-k
// mask; its backward pass is the Jacobian of w with gamma and T held fixed.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <vector>

#include "selfablate/ops.hpp"
#include "selfablate/tensor.hpp"

namespace selfablate::kwta {

inline constexpr double kTemperatureFloor = 1e-6;

/// Number of per-position top-k selections performed (one partial sort
/// each). Used to check that gating costs one sort per site per position.
inline std::atomic<std::uint64_t>& sort_counter() {
  static std::atomic<std::uint64_t> count{0};
  return count;
}

template <typename T>
struct ThresholdTemp {
  Tensor<T> gamma;  // one entry per position
  Tensor<T> temp;
};

namespace detail {

inline Shape position_shape(const Shape& scores) {
  Shape s(scores.begin(), scores.end() - 1);
  if (s.empty()) s = {1};
  return s;
}

/// One partial sort per row: fills the ordered top-(k+1) index prefix.
template <typename T>
void rank_row(const T* row, std::size_t n, std::size_t keep, std::vector<std::int32_t>& order) {
  order.resize(n);
  std::iota(order.begin(), order.end(), 0);
  auto before = [row](std::int32_t a, std::int32_t b) {
    return row[a] > row[b] || (row[a] == row[b] && a < b);
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(), before);
  sort_counter().fetch_add(1, std::memory_order_relaxed);
}

template <typename T>
void soft_row(const T* x, std::size_t n, T gamma, T temp, T* w) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = (x[i] - gamma) / temp;
    mx = std::max(mx, w[i]);
  }
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = std::exp(w[i] - mx);
    z += w[i];
  }
  const double inv = 1.0 / z;
  for (std::size_t i = 0; i < n; ++i) w[i] = static_cast<T>(w[i] * inv);
}

inline void require_units(const Shape& s) {
  if (s.empty() || s.back() == 0) throw ShapeError("gate scores need at least one unit");
}

}  // namespace detail

/// Dynamic threshold and temperature per position. For k >= n there is no
/// (k+1)-th score; gamma is then the smallest score and T the floor.
template <typename T>
ThresholdTemp<T> threshold_temperature(const Tensor<T>& scores, std::size_t k) {
  detail::require_units(scores.shape());
  if (k < 1) throw RangeError("threshold_temperature: k must be >= 1");
  const std::size_t n = scores.shape().back();
  const std::size_t rows = scores.size() / n;
  const T floor = static_cast<T>(kTemperatureFloor);
  std::vector<T> gamma(rows), temp(rows);
  std::vector<std::int32_t> order;
  auto v = scores.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = v.data() + r * n;
    if (k >= n) {
      gamma[r] = *std::min_element(row, row + n);
      temp[r] = floor;
      continue;
    }
    detail::rank_row(row, n, k + 1, order);
    const T xk = row[order[k - 1]];
    const T xk1 = row[order[k]];
    gamma[r] = (xk + xk1) / T{2};
    temp[r] = std::max(xk - xk1, floor);
  }
  Shape ps = detail::position_shape(scores.shape());
  return {Tensor<T>(ps, std::move(gamma)), Tensor<T>(ps, std::move(temp))};
}

/// Tempered softmax weights. Differentiable w.r.t. the scores; gamma and
/// temperature enter as constants.
template <typename T>
Tensor<T> soft_weights(const Tensor<T>& scores, const ThresholdTemp<T>& tt) {
  detail::require_units(scores.shape());
  const std::size_t n = scores.shape().back();
  const std::size_t rows = scores.size() / n;
  if (tt.gamma.size() != rows || tt.temp.size() != rows) {
    throw ShapeError("soft_weights: threshold/temperature do not match score positions");
  }
  std::vector<T> w(scores.size());
  auto v = scores.data();
  auto g = tt.gamma.data();
  auto t = tt.temp.data();
  for (std::size_t r = 0; r < rows; ++r) detail::soft_row(v.data() + r * n, n, g[r], t[r], w.data() + r * n);
  auto saved = std::make_shared<std::vector<T>>(w);
  Tensor<T> temp = tt.temp;
  return selfablate::detail::make_result<T>(
      scores.shape(), std::move(w), "soft_weights", {scores},
      [scores, saved, temp, rows, n](std::span<const T> grad) {
        auto* gx = selfablate::detail::grad_target(scores);
        if (!gx) return;
        auto tv = temp.data();
        for (std::size_t r = 0; r < rows; ++r) {
          const T* w = saved->data() + r * n;
          T dot{0};
          for (std::size_t i = 0; i < n; ++i) dot += w[i] * grad[r * n + i];
          for (std::size_t i = 0; i < n; ++i) (*gx)[r * n + i] += w[i] * (grad[r * n + i] - dot) / tv[r];
        }
      });
}

/// Binary mask with ones at the top-min(k, n) scores of each position.
template <typename T>
Tensor<T> hard_mask(const Tensor<T>& scores, std::size_t k) {
  detail::require_units(scores.shape());
  if (k < 1) throw RangeError("hard_mask: k must be >= 1");
  const std::size_t n = scores.shape().back();
  if (k >= n) return Tensor<T>::ones(scores.shape());
  const std::size_t rows = scores.size() / n;
  std::vector<T> mask(scores.size(), T{0});
  std::vector<std::int32_t> order;
  auto v = scores.data();
  for (std::size_t r = 0; r < rows; ++r) {
    detail::rank_row(v.data() + r * n, n, k, order);
    for (std::size_t i = 0; i < k; ++i) mask[r * n + order[i]] = T{1};
  }
  return Tensor<T>(scores.shape(), std::move(mask));
}

/// Straight-through kWTA gate: value is the hard mask, gradient is that of
/// the tempered softmax with gamma and T frozen. Inert (all ones, no
/// gradient) when k >= n.
template <typename T>
Tensor<T> ste_gate(const Tensor<T>& scores, std::size_t k) {
  detail::require_units(scores.shape());
  if (k < 1) throw RangeError("ste_gate: k must be >= 1");
  const std::size_t n = scores.shape().back();
  if (k >= n) return Tensor<T>::ones(scores.shape());

  const std::size_t rows = scores.size() / n;
  const T floor = static_cast<T>(kTemperatureFloor);
  std::vector<T> mask(scores.size(), T{0});
  auto weights = std::make_shared<std::vector<T>>(scores.size());
  auto temps = std::make_shared<std::vector<T>>(rows);
  std::vector<std::int32_t> order;
  auto v = scores.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = v.data() + r * n;
    detail::rank_row(row, n, k + 1, order);
    for (std::size_t i = 0; i < k; ++i) mask[r * n + order[i]] = T{1};
    const T xk = row[order[k - 1]];
    const T xk1 = row[order[k]];
    const T gamma = (xk + xk1) / T{2};
    const T temp = std::max(xk - xk1, floor);
    (*temps)[r] = temp;
    detail::soft_row(row, n, gamma, temp, weights->data() + r * n);
  }
  return selfablate::detail::make_result<T>(
      scores.shape(), std::move(mask), "ste_gate", {scores},
      [scores, weights, temps, rows, n](std::span<const T> grad) {
        auto* gx = selfablate::detail::grad_target(scores);
        if (!gx) return;
        for (std::size_t r = 0; r < rows; ++r) {
          const T* w = weights->data() + r * n;
          T dot{0};
          for (std::size_t i = 0; i < n; ++i) dot += w[i] * grad[r * n + i];
          const T inv_t = T{1} / (*temps)[r];
          for (std::size_t i = 0; i < n; ++i) (*gx)[r * n + i] += w[i] * (grad[r * n + i] - dot) * inv_t;
        }
      });
}

}  // namespace selfablate::kwta
