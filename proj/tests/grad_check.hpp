#pragma once

// Central finite-difference gradient oracle shared by the test suites.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "dgn/ops.hpp"
#include "dgn/random.hpp"

namespace dgn::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<Real> v(numel(shape));
  for (auto& x : v) x = static_cast<Real>(rng.uniform(-scale, scale));
  return Tensor::from(std::move(shape), std::move(v));
}

inline Tensor tracked(Tensor t) {
  t.set_requires_grad(true);
  return t;
}

/// Analytic gradients of f() w.r.t. each input, via one taped backward pass.
inline std::vector<std::vector<Real>> analytic_grads(const std::function<Tensor()>& f, std::vector<Tensor>& inputs) {
  for (auto& t : inputs) t.zero_grad();
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor y = f();
    tape.backward(y);
  }
  std::vector<std::vector<Real>> out;
  for (auto& t : inputs) out.emplace_back(t.grad().begin(), t.grad().end());
  return out;
}

/// d f / d input[k][i] by central differences at step h (no tape active).
inline Real numeric_partial(const std::function<Tensor()>& f, Tensor& input, std::size_t i, double h) {
  auto d = input.mutable_data();
  const Real keep = d[i];
  d[i] = keep + static_cast<Real>(h);
  const double fp = f().item();
  d[i] = keep - static_cast<Real>(h);
  const double fm = f().item();
  d[i] = keep;
  return static_cast<Real>((fp - fm) / (2 * h));
}

/// Norm-wise relative error ||a - n|| / max(||a||, ||n||, floor).
inline double relative_error(const std::vector<Real>& a, const std::vector<Real>& n, double floor = 1e-12) {
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
}

/// Worst relative error over all inputs, checking every element.
inline double check_gradients(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double h = 1e-5) {
  const auto an = analytic_grads(f, inputs);
  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::vector<Real> num(inputs[k].numel());
    for (std::size_t i = 0; i < num.size(); ++i) num[i] = numeric_partial(f, inputs[k], i, h);
    worst = std::max(worst, relative_error(an[k], num));
  }
  return worst;
}

/// sum(y * R) for a fixed random R, so every output element carries weight.
inline Tensor project(const Tensor& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum(mul(y, random_tensor(y.shape(), rng)));
}

}  // namespace dgn::testing
