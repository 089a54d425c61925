#pragma once

// Central finite-difference gradient checking in double precision.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "selfablate/ops.hpp"
#include "selfablate/tensor.hpp"

namespace fdcheck {

using selfablate::Tensor;

struct Result {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "input i, element j"
};

/// Relative error with a small floor on the denominator so entries whose
/// true derivative is ~0 are compared absolutely.
inline double rel_error(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

using LossFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Compares backward() of loss(inputs) against central differences of
/// `numeric_loss` (default: loss itself) for every element of every input
/// that requires grad.
inline Result check(std::vector<Tensor<double>> inputs, const LossFn& loss, const LossFn& numeric_loss = {},
                    double h = 1e-6) {
  const LossFn& fd = numeric_loss ? numeric_loss : loss;
  selfablate::Tape<double>::current().clear();
  for (auto& t : inputs) t.zero_grad();
  Tensor<double> out = loss(inputs);
  selfablate::backward(out);

  Result r;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].requires_grad()) continue;
    const std::vector<double> analytic(inputs[i].grad().begin(), inputs[i].grad().end());
    auto& vals = inputs[i].values();
    for (std::size_t j = 0; j < vals.size(); ++j) {
      const double saved = vals[j];
      double plus, minus;
      {
        selfablate::NoGradGuard ng;
        vals[j] = saved + h;
        plus = fd(inputs).item();
        vals[j] = saved - h;
        minus = fd(inputs).item();
      }
      vals[j] = saved;
      const double numeric = (plus - minus) / (2.0 * h);
      const double e = rel_error(analytic[j], numeric);
      ++r.checked;
      if (e > r.max_rel_error) {
        r.max_rel_error = e;
        r.worst = "input " + std::to_string(i) + ", element " + std::to_string(j) + ": analytic " +
                  std::to_string(analytic[j]) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return r;
}

inline Tensor<double> random_tensor(std::mt19937_64& rng, selfablate::Shape shape, double lo = -1.0, double hi = 1.0,
                                    bool requires_grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(selfablate::numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor<double>(std::move(shape), std::move(v), requires_grad);
}

/// Fixed random weights so a tensor-valued op reduces to a scalar with
/// non-uniform upstream gradient.
inline Tensor<double> weighted_sum(const Tensor<double>& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  const Tensor<double> w = random_tensor(rng, y.shape(), -1.0, 1.0, false);
  return selfablate::sum(selfablate::mul(y, w));
}

}  // namespace fdcheck
