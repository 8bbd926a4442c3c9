// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <vector>

#include "dynaroute/errors.hpp"
#include "dynaroute/metrics.hpp"
#include "dynaroute/ops.hpp"

namespace dynaroute {
namespace {

template <typename T>
bool recording(const BasicTensor<T>& x) {
  return active_tape() != nullptr && x.requires_grad();
}

}  // namespace

template <typename T>
BasicTensor<T> dice_loss(const BasicTensor<T>& logits, std::span<const std::uint8_t> truth, int classes,
                         T eps) {
  if (logits.rank() != 4) throw ShapeError("dice_loss: logits must be [N, C, H, W], got " + shape_str(logits.shape()));
  if (logits.dim(1) != classes) {
    throw ShapeError("dice_loss: logits carry " + std::to_string(logits.dim(1)) + " classes, expected " +
                     std::to_string(classes));
  }
  const std::int64_t n = logits.dim(0), hw = logits.dim(2) * logits.dim(3);
  if (static_cast<std::int64_t>(truth.size()) != n * hw) {
    throw ShapeError("dice_loss: truth holds " + std::to_string(truth.size()) + " labels, expected " +
                     std::to_string(n * hw));
  }
  for (auto t : truth) {
    if (t >= classes) throw ShapeError("dice_loss: label " + std::to_string(t) + " out of range");
  }
  const std::int64_t C = classes;
  // Softmax over the class axis, per pixel.
  std::vector<T> prob(static_cast<std::size_t>(logits.numel()));
  const T* z = logits.data().data();
  for (std::int64_t b = 0; b < n; ++b) {
    const T* zb = z + b * C * hw;
    T* pb = prob.data() + b * C * hw;
    for (std::int64_t j = 0; j < hw; ++j) {
      T mx = zb[j];
      for (std::int64_t c = 1; c < C; ++c) mx = std::max(mx, zb[c * hw + j]);
      T total = 0;
      for (std::int64_t c = 0; c < C; ++c) {
        pb[c * hw + j] = std::exp(zb[c * hw + j] - mx);
        total += pb[c * hw + j];
      }
      for (std::int64_t c = 0; c < C; ++c) pb[c * hw + j] /= total;
    }
  }
  std::vector<double> inter(C, 0.0), psum(C, 0.0), tsum(C, 0.0);
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t c = 0; c < C; ++c) {
      const T* pc = prob.data() + (b * C + c) * hw;
      const std::uint8_t* tb = truth.data() + b * hw;
      double i = 0, p = 0, t = 0;
      for (std::int64_t j = 0; j < hw; ++j) {
        p += pc[j];
        if (tb[j] == c) {
          i += pc[j];
          t += 1;
        }
      }
      inter[c] += i;
      psum[c] += p;
      tsum[c] += t;
    }
  }
  double loss = 0;
  const double e = static_cast<double>(eps);
  for (std::int64_t c = 0; c < C; ++c) loss += 1.0 - (2 * inter[c] + e) / (psum[c] + tsum[c] + e);
  auto out = BasicTensor<T>::scalar(static_cast<T>(loss));
  if (recording(logits)) {
    out.set_requires_grad(true);
    std::vector<std::uint8_t> labels(truth.begin(), truth.end());
    active_tape()->record("dice_loss", [logits, out, prob = std::move(prob), labels = std::move(labels),
                                        inter, psum, tsum, n, C, hw, e]() {
      if (!out.has_grad()) return;
      const double g = static_cast<double>(out.grad_view()[0]);
      // dL/dp for class c at pixel j: -2 t / den + (2 I + eps) / den^2.
      std::vector<double> a(C), b(C);
      for (std::int64_t c = 0; c < C; ++c) {
        const double den = psum[c] + tsum[c] + e;
        a[c] = -2.0 / den;
        b[c] = (2 * inter[c] + e) / (den * den);
      }
      T* gz = logits.grad().data();
      std::vector<double> gp(C);
      for (std::int64_t bi = 0; bi < n; ++bi) {
        const T* pb = prob.data() + bi * C * hw;
        const std::uint8_t* tb = labels.data() + bi * hw;
        T* gb = gz + bi * C * hw;
        for (std::int64_t j = 0; j < hw; ++j) {
          double dot = 0;
          for (std::int64_t c = 0; c < C; ++c) {
            gp[c] = g * (b[c] + (tb[j] == c ? a[c] : 0.0));
            dot += gp[c] * pb[c * hw + j];
          }
          for (std::int64_t c = 0; c < C; ++c) {
            gb[c * hw + j] += static_cast<T>(pb[c * hw + j] * (gp[c] - dot));
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> bank_loss(std::span<const BasicTensor<T>> losses) {
  if (losses.empty()) throw ConfigError("bank_loss: no attached candidates");
  BasicTensor<T> total = losses[0];
  for (std::size_t i = 1; i < losses.size(); ++i) total = ops::add(total, losses[i]);
  if (losses.size() == 1) return total;
  return ops::scale(total, static_cast<T>(1.0 / static_cast<double>(losses.size())));
}

template <typename T>
BasicTensor<T> weighted_cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets,
                                      std::span<const double> weights) {
  if (logits.rank() != 2) throw ShapeError("weighted_cross_entropy: logits must be [N, K], got " + shape_str(logits.shape()));
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != n) {
    throw ShapeError("weighted_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(n) + " rows");
  }
  if (static_cast<std::int64_t>(weights.size()) != k) {
    throw ShapeError("weighted_cross_entropy: " + std::to_string(weights.size()) + " weights for " +
                     std::to_string(k) + " classes");
  }
  for (double w : weights) {
    if (!(w > 0)) throw ConfigError("weighted_cross_entropy: class weights must be positive");
  }
  for (int t : targets) {
    if (t < 0 || t >= k) throw ShapeError("weighted_cross_entropy: target " + std::to_string(t) + " out of range");
  }
  std::vector<double> prob(static_cast<std::size_t>(n * k));
  const T* z = logits.data().data();
  double loss = 0;
  constexpr double kFloor = 1e-12;
  for (std::int64_t r = 0; r < n; ++r) {
    double mx = z[r * k];
    for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(z[r * k + j]));
    double total = 0;
    for (std::int64_t j = 0; j < k; ++j) total += (prob[r * k + j] = std::exp(z[r * k + j] - mx));
    for (std::int64_t j = 0; j < k; ++j) prob[r * k + j] /= total;
    loss -= weights[targets[r]] * std::log(std::max(prob[r * k + targets[r]], kFloor));
  }
  loss /= static_cast<double>(std::max<std::int64_t>(n, 1));
  auto out = BasicTensor<T>::scalar(static_cast<T>(loss));
  if (recording(logits)) {
    out.set_requires_grad(true);
    std::vector<int> tgt(targets.begin(), targets.end());
    std::vector<double> w(weights.begin(), weights.end());
    active_tape()->record("weighted_cross_entropy", [logits, out, prob = std::move(prob), tgt = std::move(tgt),
                                                     w = std::move(w), n, k]() {
      if (!out.has_grad()) return;
      const double g = static_cast<double>(out.grad_view()[0]) / static_cast<double>(n);
      T* gz = logits.grad().data();
      for (std::int64_t r = 0; r < n; ++r) {
        // Below the clamp the loss term is constant in the logits.
        if (prob[r * k + tgt[r]] < kFloor) continue;
        const double s = g * w[tgt[r]];
        for (std::int64_t j = 0; j < k; ++j) {
          gz[r * k + j] += static_cast<T>(s * (prob[r * k + j] - (j == tgt[r] ? 1.0 : 0.0)));
        }
      }
    });
  }
  return out;
}

template BasicTensor<float> dice_loss(const BasicTensor<float>&, std::span<const std::uint8_t>, int, float);
template BasicTensor<double> dice_loss(const BasicTensor<double>&, std::span<const std::uint8_t>, int, double);
template BasicTensor<float> bank_loss(std::span<const BasicTensor<float>>);
template BasicTensor<double> bank_loss(std::span<const BasicTensor<double>>);
template BasicTensor<float> weighted_cross_entropy(const BasicTensor<float>&, std::span<const int>,
                                                   std::span<const double>);
template BasicTensor<double> weighted_cross_entropy(const BasicTensor<double>&, std::span<const int>,
                                                    std::span<const double>);

}  // namespace dynaroute
