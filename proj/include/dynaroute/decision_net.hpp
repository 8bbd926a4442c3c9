// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "dynaroute/data.hpp"
#include "dynaroute/flops.hpp"
#include "dynaroute/layers.hpp"
#include "dynaroute/specs.hpp"

namespace dynaroute {

/// Depthwise-separable stride-2 stages (depthwise 3x3 + pointwise 1x1, each
/// with bias and ReLU), global average pooling and a linear head over the
/// n + 1 options.
class DecisionNet {
 public:
  DecisionNet(const DecisionNetSpec& spec, std::uint64_t seed);

  /// [N, Cin, H, W] -> [N, n + 1]
  Tensor logits(const Tensor& x) const;

  const DecisionNetSpec& spec() const noexcept { return spec_; }
  ParamStore& store() noexcept { return store_; }
  const ParamStore& store() const noexcept { return store_; }

 private:
  struct Stage {
    DepthwiseConv dw;
    Conv pw;
  };
  DecisionNetSpec spec_;
  ParamStore store_;
  std::vector<Stage> stages_;
  Linear head_;
};

/// Builds the net and rejects it unless its cost at height x width is below
/// 0.15 x `cheapest_candidate_flops`.
DecisionNet build_decision_net(const DecisionNetSpec& spec, std::uint64_t seed, int height, int width,
                               flops::Count cheapest_candidate_flops);

/// Index of the largest value, ties to the lower index.
int argmax_lower(std::span<const float> values);

struct Decision {
  std::vector<float> logits;
  int chosen = 0;
};

/// Single slice [Cin, H, W]; throws ShapeError on a channel mismatch.
Decision decide(const DecisionNet& net, const Tensor& slice);
std::vector<Decision> decide_batch(const DecisionNet& net, const Tensor& batch);

/// Skip gets 0.5, candidate i gets 1 + 0.1 (i - 1).
std::vector<double> default_decision_weights(int candidate_count);

struct DecisionTrainConfig {
  int epochs = 40;
  int batch_size = 32;
  double lr = 1e-2;
  double warmup_fraction = 0.05;
  double poly_power = 0.9;
  double weight_decay = 1e-5;
  std::vector<double> weights;
  /// Resample each epoch with equal expected counts per label instead of the
  /// natural frequencies.
  bool balanced = false;
  bool flips = true;
  /// Flips apply to the first round(flip_fraction * epochs) epochs only.
  double flip_fraction = 1.0;
  std::uint64_t seed = 2;
  std::function<void(int epoch, double loss, double accuracy)> on_epoch;
};

struct DecisionTrainResult {
  std::vector<double> loss_curve;
  /// Accuracy of the net on the (unaugmented) training set after each epoch.
  std::vector<double> accuracy_curve;
};

DecisionTrainResult train_decision(DecisionNet& net, const std::vector<Tensor>& slices,
                                   const std::vector<int>& labels, const DecisionTrainConfig& cfg);

double decision_accuracy(const DecisionNet& net, const std::vector<Tensor>& slices, const std::vector<int>& labels);

void save_decision_net(const std::filesystem::path& dir, const DecisionNet& net, std::uint64_t seed,
                       const std::string& config_hash);
DecisionNet load_decision_net(const std::filesystem::path& dir);

}  // namespace dynaroute
