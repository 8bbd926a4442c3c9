// SPDX-License-Identifier: Apache-2.0
#include "dynaroute/decision_net.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numeric>

#include "dynaroute/checkpoint.hpp"
#include "dynaroute/errors.hpp"
#include "dynaroute/metrics.hpp"
#include "dynaroute/optim.hpp"

namespace dynaroute {

DecisionNet::DecisionNet(const DecisionNetSpec& spec, std::uint64_t seed) : spec_(spec) {
  if (spec.widths.empty()) throw ConfigError("decision net needs at least one stage");
  if (spec.option_count < 2) throw ConfigError("decision net needs at least skip plus one candidate");
  if (spec.input_channels < 1) throw ConfigError("decision net needs at least one input channel");
  Rng rng(seed);
  int c = spec.input_channels;
  for (std::size_t i = 0; i < spec.widths.size(); ++i) {
    const int w = spec.widths[i];
    if (w < 1) throw ConfigError("decision net stage widths must be positive");
    const std::string p = "stage" + std::to_string(i);
    stages_.push_back({DepthwiseConv::make(store_, p + ".dw", c, rng, 2),
                       Conv::make(store_, p + ".pw", c, w, 1, rng, true)});
    c = w;
  }
  head_ = Linear::make(store_, "head", c, spec.option_count, rng);
}

Tensor DecisionNet::logits(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != spec_.input_channels) {
    throw ShapeError("decision net: expected [N, " + std::to_string(spec_.input_channels) + ", H, W], got " +
                     shape_str(x.shape()));
  }
  Tensor h = x;
  for (const auto& s : stages_) h = ops::relu(s.pw(ops::relu(s.dw(h))));
  return head_(ops::global_avg_pool(h));
}

DecisionNet build_decision_net(const DecisionNetSpec& spec, std::uint64_t seed, int height, int width,
                               flops::Count cheapest_candidate_flops) {
  const auto cost = flops::decision(spec, height, width);
  // cost < 0.15 * cheapest, in integers.
  if (100 * static_cast<long double>(cost) >= 15 * static_cast<long double>(cheapest_candidate_flops)) {
    throw ConfigError("decision net costs " + std::to_string(cost) + " FLOPs, not below 0.15 x the cheapest candidate (" +
                      std::to_string(cheapest_candidate_flops) + ")");
  }
  return DecisionNet(spec, seed);
}

int argmax_lower(std::span<const float> values) {
  if (values.empty()) throw ConfigError("argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return static_cast<int>(best);
}

std::vector<Decision> decide_batch(const DecisionNet& net, const Tensor& batch) {
  const auto z = net.logits(batch);
  const auto k = z.dim(1);
  std::vector<Decision> out(static_cast<std::size_t>(z.dim(0)));
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto row = z.data().subspan(i * static_cast<std::size_t>(k), static_cast<std::size_t>(k));
    out[i].logits.assign(row.begin(), row.end());
    out[i].chosen = argmax_lower(out[i].logits);
  }
  return out;
}

Decision decide(const DecisionNet& net, const Tensor& slice) {
  if (slice.rank() != 3) throw ShapeError("decide expects a [C, H, W] slice, got " + shape_str(slice.shape()));
  return decide_batch(net, ops::reshape(slice, {1, slice.dim(0), slice.dim(1), slice.dim(2)})).front();
}

std::vector<double> default_decision_weights(int candidate_count) {
  std::vector<double> w{0.5};
  for (int i = 1; i <= candidate_count; ++i) w.push_back(1.0 + 0.1 * (i - 1));
  return w;
}

namespace {

Tensor stack(const std::vector<Tensor>& slices, std::span<const std::size_t> idx, bool flips, Rng* rng) {
  const auto& s0 = slices[idx.front()];
  const auto C = s0.dim(0), H = s0.dim(1), W = s0.dim(2);
  std::vector<float> px;
  px.reserve(static_cast<std::size_t>(idx.size() * C * H * W));
  for (auto i : idx) {
    const auto& s = slices[i];
    if (s.shape() != s0.shape()) throw ShapeError("decision batch: mixed slice shapes");
    const bool fh = flips && rng && coin(*rng), fv = flips && rng && coin(*rng);
    const auto d = s.data();
    for (std::int64_t c = 0; c < C; ++c) {
      for (std::int64_t y = 0; y < H; ++y) {
        const auto sy = fv ? H - 1 - y : y;
        for (std::int64_t x = 0; x < W; ++x) {
          px.push_back(d[static_cast<std::size_t>((c * H + sy) * W + (fh ? W - 1 - x : x))]);
        }
      }
    }
  }
  return Tensor({static_cast<std::int64_t>(idx.size()), C, H, W}, std::move(px));
}

}  // namespace

double decision_accuracy(const DecisionNet& net, const std::vector<Tensor>& slices, const std::vector<int>& labels) {
  if (slices.empty()) return 0.0;
  std::size_t hits = 0;
  constexpr std::size_t kBatch = 64;
  std::vector<std::size_t> idx;
  for (std::size_t lo = 0; lo < slices.size(); lo += kBatch) {
    idx.clear();
    for (std::size_t k = lo; k < std::min(slices.size(), lo + kBatch); ++k) idx.push_back(k);
    const auto d = decide_batch(net, stack(slices, idx, false, nullptr));
    for (std::size_t k = 0; k < idx.size(); ++k) hits += d[k].chosen == labels[idx[k]];
  }
  return static_cast<double>(hits) / static_cast<double>(slices.size());
}

DecisionTrainResult train_decision(DecisionNet& net, const std::vector<Tensor>& slices, const std::vector<int>& labels,
                                   const DecisionTrainConfig& cfg) {
  const int k = net.spec().option_count;
  if (slices.empty()) throw ConfigError("train_decision: empty training set");
  if (slices.size() != labels.size()) throw ConfigError("train_decision: slice/label count mismatch");
  if (cfg.epochs < 1 || cfg.batch_size < 1) throw ConfigError("train_decision: epochs and batch_size must be >= 1");
  const auto weights = cfg.weights.empty() ? default_decision_weights(k - 1) : cfg.weights;
  if (static_cast<int>(weights.size()) != k) {
    throw ConfigError("train_decision: " + std::to_string(weights.size()) + " class weights for " + std::to_string(k) +
                      " options");
  }
  for (double w : weights) {
    if (!(w > 0)) throw ConfigError("train_decision: class weights must be positive");
  }
  std::vector<std::size_t> per_class(static_cast<std::size_t>(k), 0);
  for (int l : labels) {
    if (l < 0 || l >= k) {
      throw ConfigError("train_decision: label " + std::to_string(l) + " outside 0.." + std::to_string(k - 1));
    }
    ++per_class[static_cast<std::size_t>(l)];
  }
  const std::int64_t steps_per_epoch =
      (static_cast<std::int64_t>(slices.size()) + cfg.batch_size - 1) / cfg.batch_size;
  AdamConfig acfg;
  acfg.schedule.base_lr = cfg.lr;
  acfg.schedule.total_steps = steps_per_epoch * cfg.epochs;
  acfg.schedule.warmup_steps = static_cast<std::int64_t>(std::llround(cfg.warmup_fraction * acfg.schedule.total_steps));
  acfg.schedule.power = cfg.poly_power;
  acfg.weight_decay = cfg.weight_decay;
  Adam adam(acfg);
  net.store().set_requires_grad(true);
  auto& params = net.store().params();

  DecisionTrainResult result;
  std::vector<std::size_t> order(slices.size());
  const auto flip_epochs = std::llround(cfg.flip_fraction * cfg.epochs);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const bool flip_epoch = cfg.flips && epoch < flip_epochs;
    Rng rng(derive_seed(cfg.seed, "decision-epoch", static_cast<std::uint64_t>(epoch)));
    if (cfg.balanced) {
      // Inverse-frequency sampling with replacement via the cumulative weights.
      std::vector<double> cum(slices.size());
      double acc = 0;
      for (std::size_t i = 0; i < slices.size(); ++i) cum[i] = (acc += 1.0 / per_class[static_cast<std::size_t>(labels[i])]);
      for (auto& o : order) {
        const double u = uniform01(rng) * acc;
        o = std::min<std::size_t>(static_cast<std::size_t>(std::upper_bound(cum.begin(), cum.end(), u) - cum.begin()),
                                  slices.size() - 1);
      }
    } else {
      std::iota(order.begin(), order.end(), std::size_t{0});
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    }
    double loss_sum = 0;
    for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
      const std::size_t lo = static_cast<std::size_t>(s) * cfg.batch_size;
      const std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(cfg.batch_size));
      const std::span<const std::size_t> idx(order.data() + lo, hi - lo);
      auto batch = stack(slices, idx, flip_epoch, &rng);
      std::vector<int> targets;
      for (auto i : idx) targets.push_back(labels[i]);
      for (auto& p : params) p.tensor.zero_grad();
      Tape tape;
      {
        TapeScope scope(tape);
        auto loss = weighted_cross_entropy<float>(net.logits(batch), targets, weights);
        backward(loss, tape);
        loss_sum += loss.item();
      }
      adam.step(params);
    }
    result.loss_curve.push_back(loss_sum / static_cast<double>(steps_per_epoch));
    net.store().set_requires_grad(false);
    result.accuracy_curve.push_back(decision_accuracy(net, slices, labels));
    net.store().set_requires_grad(true);
    if (cfg.on_epoch) cfg.on_epoch(epoch, result.loss_curve.back(), result.accuracy_curve.back());
  }
  net.store().set_requires_grad(false);
  return result;
}

void save_decision_net(const std::filesystem::path& dir, const DecisionNet& net, std::uint64_t seed,
                       const std::string& config_hash) {
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "decision.dwt", net.store().params());
  nlohmann::json j;
  j["widths"] = net.spec().widths;
  j["input_channels"] = net.spec().input_channels;
  j["option_count"] = net.spec().option_count;
  j["seed"] = seed;
  j["config_hash"] = config_hash;
  j["file"] = "decision.dwt";
  std::ofstream os(dir / "decision.json");
  os << j.dump(2) << "\n";
  if (!os) throw DataError(DataError::Kind::kIo, "cannot write " + (dir / "decision.json").string());
}

DecisionNet load_decision_net(const std::filesystem::path& dir) {
  std::ifstream is(dir / "decision.json");
  if (!is) throw DataError(DataError::Kind::kIo, "cannot open " + (dir / "decision.json").string());
  try {
    nlohmann::json j;
    is >> j;
    DecisionNetSpec spec;
    spec.widths = j.at("widths").get<std::vector<int>>();
    spec.input_channels = j.at("input_channels");
    spec.option_count = j.at("option_count");
    DecisionNet net(spec, j.at("seed").get<std::uint64_t>());
    load_checkpoint_into(dir / j.at("file").get<std::string>(), net.store().params());
    net.store().set_requires_grad(false);
    return net;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataError::Kind::kInvalid, (dir / "decision.json").string() + ": " + e.what());
  }
}

}  // namespace dynaroute
