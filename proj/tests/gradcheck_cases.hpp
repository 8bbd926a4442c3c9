// SPDX-License-Identifier: Apache-2.0
// Random small instances of every differentiable primitive, checked against
// the finite-difference oracle. Shared by the unit and acceptance suites.
#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "dynaroute/metrics.hpp"
#include "gradcheck.hpp"

namespace dynaroute::test_support {

template <typename T>
struct GradCase {
  std::string name;
  // Builds one random instance from `rng` and returns its max relative error.
  std::function<double(std::mt19937_64&, double)> run;
};

// Keeps values away from the relu kink so finite differences stay one-sided-free.
template <typename T>
BasicTensor<T> away_from_zero(BasicTensor<T> t, double margin = 0.05) {
  for (auto& v : t.data()) {
    if (std::abs(static_cast<double>(v)) < margin) v = static_cast<T>(v < 0 ? -margin : margin);
  }
  return t;
}

// Distinct values on a 0.1 grid so no pooling window has a near-tie.
template <typename T>
BasicTensor<T> well_separated(Shape shape, std::mt19937_64& rng) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  std::vector<T> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<T>(0.1 * (static_cast<double>(i) - n / 2.0));
  std::shuffle(v.begin(), v.end(), rng);
  return BasicTensor<T>(std::move(shape), std::move(v), true);
}

template <typename T>
std::vector<GradCase<T>> primitive_grad_cases() {
  using Fn = std::function<BasicTensor<T>(std::vector<BasicTensor<T>>&)>;
  std::vector<GradCase<T>> cases;
  auto add_case = [&](std::string name, std::function<std::vector<BasicTensor<T>>(std::mt19937_64&)> make,
                      std::function<BasicTensor<T>(std::vector<BasicTensor<T>>&)> body) {
    cases.push_back({std::move(name), [make, body](std::mt19937_64& rng, double step) {
                       auto inputs = make(rng);
                       const std::uint64_t proj_seed = rng();
                       Fn fn = [body, proj_seed](std::vector<BasicTensor<T>>& in) {
                         return project(body(in), proj_seed);
                       };
                       return max_gradient_error<T>(fn, inputs, step);
                     }});
  };

  add_case("add", [](auto& rng) {
    return std::vector{random_tensor<T>({2, 3, 4}, rng), random_tensor<T>({2, 3, 4}, rng)};
  }, [](auto& in) { return ops::add(in[0], in[1]); });
  add_case("add_channel_bias", [](auto& rng) {
    return std::vector{random_tensor<T>({2, 3, 2, 2}, rng), random_tensor<T>({3}, rng)};
  }, [](auto& in) { return ops::add(in[0], in[1]); });
  add_case("add_row_bias", [](auto& rng) {
    return std::vector{random_tensor<T>({2, 5, 3}, rng), random_tensor<T>({3}, rng)};
  }, [](auto& in) { return ops::add(in[0], in[1]); });
  add_case("mul", [](auto& rng) {
    return std::vector{random_tensor<T>({3, 4}, rng), random_tensor<T>({3, 4}, rng)};
  }, [](auto& in) { return ops::mul(in[0], in[1]); });
  add_case("mul_scalar", [](auto& rng) {
    return std::vector{random_tensor<T>({3, 4}, rng), random_tensor<T>({1}, rng)};
  }, [](auto& in) { return ops::mul(in[0], in[1]); });
  add_case("matmul", [](auto& rng) {
    return std::vector{random_tensor<T>({2, 3, 4}, rng), random_tensor<T>({4, 5}, rng)};
  }, [](auto& in) { return ops::matmul(in[0], in[1]); });
  add_case("matmul_batched", [](auto& rng) {
    return std::vector{random_tensor<T>({2, 3, 4}, rng), random_tensor<T>({2, 4, 3}, rng)};
  }, [](auto& in) { return ops::matmul(in[0], in[1]); });
  add_case("transpose_last2", [](auto& rng) {
    return std::vector{random_tensor<T>({2, 3, 4}, rng)};
  }, [](auto& in) { return ops::transpose_last2(in[0]); });
  add_case("conv2d", [](auto& rng) {
    return std::vector{random_tensor<T>({1, 1, 5, 5}, rng), random_tensor<T>({2, 1, 3, 3}, rng)};
  }, [](auto& in) { return ops::conv2d(in[0], in[1], {1, 1}); });
  add_case("conv2d_stride2_multichannel", [](auto& rng) {
    return std::vector{random_tensor<T>({2, 2, 6, 6}, rng), random_tensor<T>({3, 2, 3, 3}, rng)};
  }, [](auto& in) { return ops::conv2d(in[0], in[1], {2, 1}); });
  add_case("conv2d_pointwise", [](auto& rng) {
    return std::vector{random_tensor<T>({2, 3, 4, 4}, rng), random_tensor<T>({2, 3, 1, 1}, rng)};
  }, [](auto& in) { return ops::conv2d(in[0], in[1]); });
  add_case("depthwise_conv2d", [](auto& rng) {
    return std::vector{random_tensor<T>({2, 3, 6, 6}, rng), random_tensor<T>({3, 1, 3, 3}, rng)};
  }, [](auto& in) { return ops::depthwise_conv2d(in[0], in[1], {2, 1}); });
  add_case("maxpool2d", [](auto& rng) {
    return std::vector{well_separated<T>({2, 2, 4, 4}, rng)};
  }, [](auto& in) { return ops::maxpool2d(in[0], 2); });
  add_case("nearest_upsample2x", [](auto& rng) {
    return std::vector{random_tensor<T>({1, 2, 3, 3}, rng)};
  }, [](auto& in) { return ops::nearest_upsample2x(in[0]); });
  add_case("relu", [](auto& rng) {
    return std::vector{away_from_zero(random_tensor<T>({4, 6}, rng))};
  }, [](auto& in) { return ops::relu(in[0]); });
  add_case("gelu", [](auto& rng) {
    return std::vector{random_tensor<T>({4, 6}, rng, -3.0, 3.0)};
  }, [](auto& in) { return ops::gelu(in[0]); });
  add_case("softmax_lastdim", [](auto& rng) {
    return std::vector{random_tensor<T>({3, 5}, rng, -2.0, 2.0)};
  }, [](auto& in) { return ops::softmax_lastdim(in[0]); });
  add_case("groupnorm", [](auto& rng) {
    return std::vector{random_tensor<T>({2, 4, 3, 3}, rng), random_tensor<T>({4}, rng),
                       random_tensor<T>({4}, rng)};
  }, [](auto& in) { return ops::groupnorm(in[0], in[1], in[2], 2); });
  add_case("layernorm_lastdim", [](auto& rng) {
    return std::vector{random_tensor<T>({2, 3, 6}, rng), random_tensor<T>({6}, rng),
                       random_tensor<T>({6}, rng)};
  }, [](auto& in) { return ops::layernorm_lastdim(in[0], in[1], in[2]); });
  add_case("concat_channels", [](auto& rng) {
    return std::vector{random_tensor<T>({2, 1, 2, 3}, rng), random_tensor<T>({2, 2, 2, 3}, rng)};
  }, [](auto& in) { return ops::concat_channels(in[0], in[1]); });
  add_case("reshape", [](auto& rng) {
    return std::vector{random_tensor<T>({2, 6}, rng)};
  }, [](auto& in) { return ops::reshape(in[0], Shape{3, 4}); });
  add_case("global_avg_pool", [](auto& rng) {
    return std::vector{random_tensor<T>({2, 3, 2, 2}, rng)};
  }, [](auto& in) { return ops::global_avg_pool(in[0]); });
  add_case("scale", [](auto& rng) {
    return std::vector{random_tensor<T>({5}, rng)};
  }, [](auto& in) { return ops::scale(in[0], T(-1.75)); });
  add_case("mean", [](auto& rng) {
    return std::vector{random_tensor<T>({2, 5}, rng)};
  }, [](auto& in) { return ops::mul(ops::mean(in[0]), ops::mean(in[0])); });
  return cases;
}

// dice_loss and weighted cross-entropy; these are scalar already, no projection.
template <typename T>
std::vector<GradCase<T>> loss_grad_cases() {
  using Fn = std::function<BasicTensor<T>(std::vector<BasicTensor<T>>&)>;
  std::vector<GradCase<T>> cases;
  cases.push_back({"dice_loss", [](std::mt19937_64& rng, double step) {
                     constexpr int kClasses = 3;
                     std::vector<std::uint8_t> truth(2 * 4 * 4);
                     for (auto& t : truth) t = static_cast<std::uint8_t>(rng() % kClasses);
                     Fn fn = [truth](std::vector<BasicTensor<T>>& in) {
                       return dice_loss<T>(in[0], truth, kClasses);
                     };
                     return max_gradient_error<T>(fn, {random_tensor<T>({2, kClasses, 4, 4}, rng, -2.0, 2.0)}, step);
                   }});
  cases.push_back({"weighted_cross_entropy", [](std::mt19937_64& rng, double step) {
                     constexpr int kOptions = 5;
                     std::vector<int> targets(6);
                     for (auto& t : targets) t = static_cast<int>(rng() % kOptions);
                     std::vector<double> weights(kOptions);
                     std::uniform_real_distribution<double> w(0.25, 2.0);
                     for (auto& x : weights) x = w(rng);
                     Fn fn = [targets, weights](std::vector<BasicTensor<T>>& in) {
                       return weighted_cross_entropy<T>(in[0], targets, weights);
                     };
                     return max_gradient_error<T>(fn, {random_tensor<T>({6, kOptions}, rng, -2.0, 2.0)}, step);
                   }});
  return cases;
}

}  // namespace dynaroute::test_support
