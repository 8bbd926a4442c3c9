// SPDX-License-Identifier: Apache-2.0
#include "dynaroute/optim.hpp"

#include <algorithm>
#include <cmath>

#include "dynaroute/errors.hpp"

namespace dynaroute {

double LrSchedule::at(std::int64_t step) const {
  if (total_steps <= 0) throw ConfigError("learning-rate schedule needs total_steps > 0");
  if (step >= total_steps) return 0.0;
  const double t = static_cast<double>(std::max<std::int64_t>(step, 0));
  const double warm = warmup_steps > 0 ? std::min(t / static_cast<double>(warmup_steps), 1.0) : 1.0;
  const double decay = std::pow(1.0 - t / static_cast<double>(total_steps), power);
  return std::max(0.0, base_lr * warm * decay);
}

template <typename T>
BasicAdam<T>::BasicAdam(AdamConfig config) : config_(config) {
  if (config_.schedule.total_steps <= 0) {
    throw ConfigError("Adam: total steps must be positive");
  }
}

template <typename T>
void BasicAdam<T>::step(std::span<BasicNamedParam<T>> params) {
  ++step_;
  const double lr = config_.schedule.at(step_);
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  const T b1 = static_cast<T>(config_.beta1);
  const T b2 = static_cast<T>(config_.beta2);
  for (auto& p : params) {
    auto w = p.tensor.data();
    auto g = p.tensor.grad();
    auto& m = moments_[p.name];
    if (m.first.size() != w.size()) {
      m.first.assign(w.size(), T(0));
      m.second.assign(w.size(), T(0));
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      m.first[i] = b1 * m.first[i] + (T(1) - b1) * g[i];
      m.second[i] = b2 * m.second[i] + (T(1) - b2) * g[i] * g[i];
      const double mhat = m.first[i] / bc1;
      const double vhat = m.second[i] / bc2;
      const double update = mhat / (std::sqrt(vhat) + config_.eps) + config_.weight_decay * w[i];
      w[i] = static_cast<T>(w[i] - lr * update);
    }
  }
}

template class BasicAdam<float>;
template class BasicAdam<double>;

}  // namespace dynaroute
