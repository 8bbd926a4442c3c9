// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <vector>

#include "dynaroute/data.hpp"
#include "dynaroute/flops.hpp"
#include "dynaroute/layers.hpp"
#include "dynaroute/specs.hpp"

namespace dynaroute {

/// One candidate segmentation network: a three-stage conv encoder, either a
/// conv bottleneck (unet) or a stack of single-head attention blocks over the
/// bottleneck tokens (attn), and a mirrored decoder with skip concatenation.
class SegModel {
 public:
  SegModel(const CandidateSpec& spec, std::uint64_t seed);

  /// [N, Cin, H, W] -> [N, C, H, W] logits. H and W must be divisible by 8.
  Tensor forward(const Tensor& x) const;

  const CandidateSpec& spec() const noexcept { return spec_; }
  ParamStore& store() noexcept { return store_; }
  const ParamStore& store() const noexcept { return store_; }

 private:
  struct Block {
    LayerNorm ln1, ln2;
    Linear q, k, v, proj, fc1, fc2;
  };

  Tensor attention(const Tensor& tokens) const;

  CandidateSpec spec_;
  ParamStore store_;
  DoubleConv enc1_, enc2_, enc3_, bottleneck_;
  Linear embed_, unembed_;
  std::vector<Block> blocks_;
  Conv reduce3_, reduce2_, reduce1_, head_;
  DoubleConv dec3_, dec2_, dec1_;
};

struct ModelBank {
  std::vector<CandidateSpec> specs;
  std::vector<std::unique_ptr<SegModel>> models;
  std::uint64_t seed = 0;
  int height = 0;
  int width = 0;
  /// F_1..F_n at height x width.
  std::vector<flops::Count> flops_table;
  bool trained = false;

  int size() const { return static_cast<int>(models.size()); }
  SegModel& model(int index);
  const SegModel& model(int index) const;
};

/// Initializes every candidate from its own stream derived from `seed` and
/// checks that the cost at height x width strictly increases with index.
ModelBank build_bank(const std::vector<CandidateSpec>& specs, std::uint64_t seed, int height, int width);

/// Single slice [Cin, H, W] through candidate `index` (1-based) -> [C, H, W].
Tensor forward_candidate(const ModelBank& bank, int index, const Tensor& slice);

/// Same on a batch [N, Cin, H, W].
Tensor forward_candidate_batch(const ModelBank& bank, int index, const Tensor& batch);

/// Per-pixel argmax over classes of [C, H, W] logits, ties to the lower class.
std::vector<std::uint8_t> argmax_mask(const Tensor& logits);

struct BankTrainConfig {
  int epochs = 16;
  /// Epoch (count of completed epochs) after which candidate i is frozen;
  /// empty means every candidate trains for all epochs.
  std::vector<int> detach_epochs;
  int batch_size = 8;
  double lr = 3e-3;
  double warmup_fraction = 0.05;
  double poly_power = 0.9;
  double weight_decay = 1e-5;
  AugmentConfig augment;
  std::uint64_t seed = 1;
  /// Convergence check: trailing-mean smoothing width, window length, and the
  /// relative rise tolerated across one window.
  int smooth_width = 3;
  int window = 10;
  double tolerance = 0.02;
  std::function<void(int epoch, const std::vector<double>& losses)> on_epoch;
};

struct BankTrainResult {
  /// loss_curve[i][e]: mean dice loss of candidate i+1 over the steps of epoch e,
  /// recorded for the epochs it was attached.
  std::vector<std::vector<double>> loss_curve;
  /// Mean over steps of the averaged bank loss, per epoch.
  std::vector<double> bank_loss_curve;
  std::vector<std::vector<int>> attached_per_epoch;
  std::vector<bool> converged;
  std::int64_t steps = 0;
  bool all_converged() const;
};

/// True when the trailing-mean-smoothed curve never rises by more than
/// `tolerance` (relative) between the two ends of any `window`-epoch span.
bool curve_converged(const std::vector<double>& curve, int smooth_width, int window, double tolerance);

/// Joint training under the mean dice loss of the attached candidates. A
/// candidate past its detach epoch stops receiving updates and leaves the
/// average. Throws ConfigError on an empty dataset or bad schedule.
BankTrainResult train_bank_jointly(ModelBank& bank, const std::vector<SliceItem>& data,
                                   const BankTrainConfig& cfg);

/// One DWT1 file per candidate plus bank.json holding specs, seed, schedule
/// and the flops table.
void save_bank(const std::filesystem::path& dir, const ModelBank& bank, const BankTrainConfig& cfg,
               const std::string& config_hash);
ModelBank load_bank(const std::filesystem::path& dir);

}  // namespace dynaroute
