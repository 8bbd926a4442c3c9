// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dynaroute/flops.hpp"
#include "dynaroute/tensor.hpp"

namespace dynaroute {

// ---- losses (tape-aware) ----

/// Sum over classes of 1 - (2 I_c + eps) / (P_c + T_c + eps) with soft
/// intersection, softmax over the class axis of `logits` [N, C, H, W].
/// `truth` holds N*H*W class ids. Sums run over the whole batch.
template <typename T>
BasicTensor<T> dice_loss(const BasicTensor<T>& logits, std::span<const std::uint8_t> truth, int classes,
                         T eps = T(1e-5));

/// Arithmetic mean of the attached candidates' losses.
template <typename T>
BasicTensor<T> bank_loss(std::span<const BasicTensor<T>> losses);

/// Batch mean of -w[y] log softmax(logits)[y] with the log argument clamped at
/// 1e-12. `logits` is [N, K]; all weights must be positive.
template <typename T>
BasicTensor<T> weighted_cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets,
                                      std::span<const double> weights);

// ---- evaluation ----

/// Spatial extent of a mask; 2D masks use depth 1.
struct MaskDims {
  int depth = 1;
  int height = 0;
  int width = 0;
  std::size_t size() const { return static_cast<std::size_t>(depth) * height * width; }
};

using Region = std::vector<int>;

struct NamedRegion {
  std::string name;
  Region classes;
};

/// whole / core / enhancing composites for 4 classes; nested ">= k" sets otherwise.
std::vector<NamedRegion> default_regions(int class_count);

/// 2|P n T| / (|P| + |T|) over the binarized region; 1 when both are empty.
double dice_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth,
                  const Region& region);

/// Mean over classes 1..C-1 of the single-class dice score.
double mean_foreground_dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth,
                            int class_count);

struct Hd95 {
  double value = 0;
  bool defined = true;
};

/// 95th percentile (nearest rank) of the symmetric boundary distance multiset,
/// Euclidean in pixel units. Both regions empty: 0. Exactly one empty: undefined.
Hd95 hd95(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth, MaskDims dims,
          const Region& region);

/// Boundary voxels as linear indices: inside the region with a face neighbour
/// outside it or a face on the mask border.
std::vector<std::size_t> boundary_voxels(std::span<const std::uint8_t> mask, MaskDims dims,
                                         const Region& region);

/// Squared distances from each point of `a` to its nearest point in `b`,
/// followed by the same from `b` to `a`.
std::vector<std::int64_t> symmetric_sq_distances(const std::vector<std::size_t>& a,
                                                 const std::vector<std::size_t>& b, MaskDims dims);

/// Nearest-rank percentile (ceil(q n) - 1 after sorting) via selection.
std::int64_t nearest_rank(std::vector<std::int64_t> values, double q);

// ---- routing accounting ----

struct Rational {
  std::uint64_t num = 0;
  std::uint64_t den = 1;

  static Rational make(std::uint64_t num, std::uint64_t den);
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  friend bool operator==(const Rational&, const Rational&) = default;
};

struct TraceRow {
  std::string case_id;
  int slice_index = 0;
  int decision = 0;
  flops::Count decision_flops = 0;
  flops::Count executed_flops = 0;
  /// Candidate forward passes run for this slice; the one-pass contract is <= 1.
  int candidate_runs = 0;
  /// Extra candidate passes made only to pick the route (oracle routing).
  int probe_runs = 0;
};

using RoutingTrace = std::vector<TraceRow>;

struct FlopsReport {
  flops::Count all_cases = 0;
  std::uint64_t case_count = 0;
  std::uint64_t slice_count = 0;
  Rational per_case;
  Rational per_slice;
  /// Executed candidate cost over non-skipped slices, decision cost excluded.
  Rational per_inference;
  bool skip_all = false;
  /// Executed candidate cost alone (no decision net), summed over all slices.
  flops::Count executed_total = 0;
};

/// `bank_flops[i]` is F_{i+1}; F_0 = 0. Throws ConfigError on an empty trace
/// or a decision outside 0..n.
FlopsReport flops_report(const RoutingTrace& trace, std::span<const flops::Count> bank_flops,
                         flops::Count decision_flops);

/// Fraction of slices sent to each option 0..n, exact.
std::vector<Rational> activation_ratio(const RoutingTrace& trace, int candidate_count);

struct RegionScore {
  std::string name;
  double dice = 0;
  double hd95 = 0;
  int hd95_undefined = 0;
};

struct CaseScore {
  std::string case_id;
  std::vector<double> region_dice;
  std::vector<Hd95> region_hd95;
  double mean_foreground_dice = 0;
  flops::Count executed_flops = 0;
};

struct MetricsReport {
  std::vector<RegionScore> regions;
  std::vector<CaseScore> cases;
  double mean_foreground_dice = 0;
  FlopsReport flops;
  std::vector<Rational> activation;
  std::string config_hash;
};

}  // namespace dynaroute
