// SPDX-License-Identifier: Apache-2.0
#include "dynaroute/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "dynaroute/errors.hpp"

namespace dynaroute {

std::vector<NamedRegion> default_regions(int class_count) {
  if (class_count == 4) return {{"whole", {1, 2, 3}}, {"core", {2, 3}}, {"enhancing", {3}}};
  std::vector<NamedRegion> out;
  for (int k = 1; k < class_count; ++k) {
    Region r;
    for (int c = k; c < class_count; ++c) r.push_back(c);
    out.push_back({"ge" + std::to_string(k), std::move(r)});
  }
  return out;
}

namespace {

struct Membership {
  std::array<bool, 256> in{};
  explicit Membership(const Region& r) {
    for (int c : r) {
      if (c >= 0 && c < 256) in[static_cast<std::size_t>(c)] = true;
    }
  }
  bool operator()(std::uint8_t c) const { return in[c]; }
};

}  // namespace

double dice_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth,
                  const Region& region) {
  if (pred.size() != truth.size()) throw ShapeError("dice_score: mask sizes differ");
  const Membership m(region);
  std::uint64_t p = 0, t = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = m(pred[i]), b = m(truth[i]);
    p += a;
    t += b;
    both += a && b;
  }
  if (p + t == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + t);
}

double mean_foreground_dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth,
                            int class_count) {
  if (class_count < 2) throw ConfigError("mean_foreground_dice needs at least one foreground class");
  double total = 0;
  for (int c = 1; c < class_count; ++c) total += dice_score(pred, truth, Region{c});
  return total / (class_count - 1);
}

std::vector<std::size_t> boundary_voxels(std::span<const std::uint8_t> mask, MaskDims dims,
                                         const Region& region) {
  if (mask.size() != dims.size()) throw ShapeError("boundary_voxels: mask size does not match dims");
  const Membership m(region);
  const std::size_t H = dims.height, W = dims.width, D = dims.depth;
  std::vector<std::size_t> out;
  for (std::size_t z = 0; z < D; ++z) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t i = (z * H + y) * W + x;
        if (!m(mask[i])) continue;
        bool edge = y == 0 || y + 1 == H || x == 0 || x + 1 == W || !m(mask[i - W]) || !m(mask[i + W]) ||
                    !m(mask[i - 1]) || !m(mask[i + 1]);
        if (!edge && D > 1) {
          edge = z == 0 || z + 1 == D || !m(mask[i - H * W]) || !m(mask[i + H * W]);
        }
        if (edge) out.push_back(i);
      }
    }
  }
  return out;
}

std::vector<std::int64_t> symmetric_sq_distances(const std::vector<std::size_t>& a,
                                                 const std::vector<std::size_t>& b, MaskDims dims) {
  const std::size_t H = dims.height, W = dims.width;
  auto coords = [&](std::size_t i) {
    const auto z = static_cast<std::int64_t>(i / (H * W));
    const auto y = static_cast<std::int64_t>((i / W) % H);
    const auto x = static_cast<std::int64_t>(i % W);
    return std::array<std::int64_t, 3>{z, y, x};
  };
  auto directed = [&](const std::vector<std::size_t>& from, const std::vector<std::size_t>& to,
                      std::vector<std::int64_t>& out) {
    std::vector<std::array<std::int64_t, 3>> tc;
    tc.reserve(to.size());
    for (auto j : to) tc.push_back(coords(j));
    for (auto i : from) {
      const auto p = coords(i);
      std::int64_t best = std::numeric_limits<std::int64_t>::max();
      for (const auto& q : tc) {
        const std::int64_t dz = p[0] - q[0], dy = p[1] - q[1], dx = p[2] - q[2];
        best = std::min(best, dz * dz + dy * dy + dx * dx);
      }
      out.push_back(best);
    }
  };
  std::vector<std::int64_t> out;
  out.reserve(a.size() + b.size());
  directed(a, b, out);
  directed(b, a, out);
  return out;
}

std::int64_t nearest_rank(std::vector<std::int64_t> values, double q) {
  if (values.empty()) throw ConfigError("nearest_rank of an empty set");
  auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(values.size())));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  auto nth = values.begin() + static_cast<std::ptrdiff_t>(rank - 1);
  std::nth_element(values.begin(), nth, values.end());
  return *nth;
}

Hd95 hd95(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth, MaskDims dims,
          const Region& region) {
  if (pred.size() != truth.size()) throw ShapeError("hd95: mask sizes differ");
  const auto bp = boundary_voxels(pred, dims, region);
  const auto bt = boundary_voxels(truth, dims, region);
  if (bp.empty() && bt.empty()) return {0.0, true};
  if (bp.empty() || bt.empty()) return {std::numeric_limits<double>::quiet_NaN(), false};
  const auto d2 = nearest_rank(symmetric_sq_distances(bp, bt, dims), 0.95);
  return {std::sqrt(static_cast<double>(d2)), true};
}

Rational Rational::make(std::uint64_t num, std::uint64_t den) {
  if (den == 0) throw ConfigError("rational with zero denominator");
  const auto g = std::gcd(num, den);
  return g ? Rational{num / g, den / g} : Rational{0, 1};
}

FlopsReport flops_report(const RoutingTrace& trace, std::span<const flops::Count> bank_flops,
                         flops::Count decision_flops) {
  if (trace.empty()) throw ConfigError("flops_report: empty routing trace");
  FlopsReport r;
  std::set<std::string> cases;
  std::uint64_t inferences = 0;
  for (const auto& row : trace) {
    if (row.decision < 0 || static_cast<std::size_t>(row.decision) > bank_flops.size()) {
      throw ConfigError("flops_report: decision " + std::to_string(row.decision) + " outside 0.." +
                        std::to_string(bank_flops.size()));
    }
    cases.insert(row.case_id);
    const flops::Count chosen = row.decision == 0 ? 0 : bank_flops[static_cast<std::size_t>(row.decision - 1)];
    r.all_cases += decision_flops + chosen;
    r.executed_total += chosen;
    inferences += row.decision != 0;
  }
  r.case_count = cases.size();
  r.slice_count = trace.size();
  r.per_case = Rational::make(r.all_cases, r.case_count);
  r.per_slice = Rational::make(r.all_cases, r.slice_count);
  r.skip_all = inferences == 0;
  r.per_inference = r.skip_all ? Rational{0, 1} : Rational::make(r.executed_total, inferences);
  return r;
}

std::vector<Rational> activation_ratio(const RoutingTrace& trace, int candidate_count) {
  if (trace.empty()) throw ConfigError("activation_ratio: empty routing trace");
  std::vector<std::uint64_t> counts(static_cast<std::size_t>(candidate_count) + 1, 0);
  for (const auto& row : trace) {
    if (row.decision < 0 || row.decision > candidate_count) {
      throw ConfigError("activation_ratio: decision " + std::to_string(row.decision) + " out of range");
    }
    ++counts[static_cast<std::size_t>(row.decision)];
  }
  std::vector<Rational> out;
  for (auto c : counts) out.push_back(Rational::make(c, trace.size()));
  return out;
}

}  // namespace dynaroute
