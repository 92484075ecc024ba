#pragma once

// Segmentation objective on logits: mean BCE plus squared-denominator Dice.

#include <cmath>
#include <string>
#include <vector>

#include "dgn/ops.hpp"

namespace dgn {

namespace detail {

inline void check_loss_inputs(const std::string& op, const Tensor& logits, const Tensor& target) {
  if (logits.shape() != target.shape()) {
    throw DimensionError(op + ": logits " + to_string(logits.shape()) + " vs mask " + to_string(target.shape()));
  }
  for (Real g : target.values()) {
    if (g != Real(0) && g != Real(1)) throw std::invalid_argument(op + ": mask values must be 0 or 1");
  }
}

}  // namespace detail

/// mean(max(x,0) - x g + log(1 + exp(-|x|))).
inline Tensor bce_with_logits(const Tensor& logits, const Tensor& target) {
  detail::check_loss_inputs("bce_with_logits", logits, target);
  const auto& X = logits.values();
  const auto& G = target.values();
  const std::size_t n = X.size();
  Real acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Real x = X[i];
    acc += std::max(x, Real(0)) - x * G[i] + std::log1p(std::exp(-std::abs(x)));
  }
  const Real inv = Real(1) / static_cast<Real>(n);
  return detail::make_result("bce_with_logits", {1}, {acc * inv}, {logits, target}, [inv](detail::Node& n) {
    Real* gx = detail::parent_grad(n, 0);
    if (gx == nullptr) return;
    const auto& X = n.parents[0]->data;
    const auto& G = n.parents[1]->data;
    const Real g = n.grad[0] * inv;
    for (std::size_t i = 0; i < X.size(); ++i) gx[i] += g * (sigmoid_scalar(X[i]) - G[i]);
  });
}

/// 1 - (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps), p = sigmoid(x).
inline Tensor dice_with_logits(const Tensor& logits, const Tensor& target, Real eps = Real(1e-6)) {
  detail::check_loss_inputs("dice_with_logits", logits, target);
  if (!(eps > 0)) throw std::invalid_argument("dice_with_logits: eps must be positive");
  const auto& X = logits.values();
  const auto& G = target.values();
  std::vector<Real> p(X.size());
  Real inter = 0, pp = 0, gg = 0;
  for (std::size_t i = 0; i < X.size(); ++i) {
    p[i] = sigmoid_scalar(X[i]);
    inter += p[i] * G[i];
    pp += p[i] * p[i];
    gg += G[i] * G[i];
  }
  const Real num = 2 * inter + eps;
  const Real den = pp + gg + eps;
  const Real loss = Real(1) - num / den;
  return detail::make_result("dice_with_logits", {1}, {loss}, {logits, target},
                             [p = std::move(p), num, den](detail::Node& n) {
                               Real* gx = detail::parent_grad(n, 0);
                               if (gx == nullptr) return;
                               const auto& G = n.parents[1]->data;
                               const Real g = n.grad[0];
                               const Real den2 = den * den;
                               for (std::size_t i = 0; i < p.size(); ++i) {
                                 const Real dp = -(2 * G[i] * den - num * 2 * p[i]) / den2;
                                 gx[i] += g * dp * p[i] * (Real(1) - p[i]);
                               }
                             });
}

struct LossBreakdown {
  Real bce = 0;
  Real dice = 0;
  Real total = 0;
  Tensor objective;  // differentiable total
};

inline LossBreakdown total_loss(const Tensor& logits, const Tensor& target, Real eps = Real(1e-6)) {
  Tensor b = bce_with_logits(logits, target);
  Tensor d = dice_with_logits(logits, target, eps);
  LossBreakdown r;
  r.objective = add(d, b);
  r.bce = b.item();
  r.dice = d.item();
  r.total = r.objective.item();
  return r;
}

}  // namespace dgn
