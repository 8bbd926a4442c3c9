// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dynaroute/tensor.hpp"

namespace dynaroute {

/// Linear warmup followed by polynomial decay:
///   lr(t) = base_lr * min(t / warmup, 1) * (1 - t / total)^power,  t <= total
/// and 0 past the end. A zero warmup disables the warmup factor.
struct LrSchedule {
  double base_lr = 1e-3;
  std::int64_t warmup_steps = 0;
  std::int64_t total_steps = 1;
  double power = 0.9;

  double at(std::int64_t step) const;
};

struct AdamConfig {
  LrSchedule schedule;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Decoupled L2 decay, applied as p -= lr * weight_decay * p.
  double weight_decay = 0.0;
};

/// Adam with bias correction. Moment buffers are keyed by parameter name, so
/// the parameter set may shrink between steps (detached candidates).
template <typename T>
class BasicAdam {
 public:
  explicit BasicAdam(AdamConfig config);

  /// Advances the step counter and updates every parameter from its gradient.
  void step(std::span<BasicNamedParam<T>> params);

  std::int64_t steps_taken() const noexcept { return step_; }
  double current_lr() const { return config_.schedule.at(step_); }
  const AdamConfig& config() const noexcept { return config_; }

  struct Moments {
    std::vector<T> first;
    std::vector<T> second;
  };
  const std::map<std::string, Moments>& state() const noexcept { return moments_; }

 private:
  AdamConfig config_;
  std::int64_t step_ = 0;
  std::map<std::string, Moments> moments_;
};

using Adam = BasicAdam<float>;

}  // namespace dynaroute
