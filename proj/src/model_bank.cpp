// SPDX-License-Identifier: Apache-2.0
#include "dynaroute/model_bank.hpp"

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

SegModel::SegModel(const CandidateSpec& spec, std::uint64_t seed) : spec_(spec) {
  if (spec.input_channels < 1 || spec.class_count < 2) throw ConfigError("candidate needs >= 1 input channel and >= 2 classes");
  const bool attn = spec.family == Family::kAttn;
  const int w = attn ? kAttnBaseWidth : spec.width;
  if (w < 1) throw ConfigError("candidate width must be >= 1");
  if (attn && (spec.depth < 1 || spec.embed_dim < 1)) throw ConfigError("attn candidate needs depth >= 1 and embed_dim >= 1");
  const int c1 = w, c2 = 2 * w, c3 = 4 * w, cb = 8 * w;
  Rng rng(seed);
  enc1_ = DoubleConv::make(store_, "enc1", spec.input_channels, c1, rng);
  enc2_ = DoubleConv::make(store_, "enc2", c1, c2, rng);
  enc3_ = DoubleConv::make(store_, "enc3", c2, c3, rng);
  if (attn) {
    const int e = spec.embed_dim;
    embed_ = Linear::make(store_, "embed", c3, e, rng);
    for (int i = 0; i < spec.depth; ++i) {
      const std::string p = "block" + std::to_string(i);
      Block b;
      b.ln1 = LayerNorm::make(store_, p + ".ln1", e);
      b.q = Linear::make(store_, p + ".q", e, e, rng);
      b.k = Linear::make(store_, p + ".k", e, e, rng);
      b.v = Linear::make(store_, p + ".v", e, e, rng);
      b.proj = Linear::make(store_, p + ".proj", e, e, rng);
      b.ln2 = LayerNorm::make(store_, p + ".ln2", e);
      b.fc1 = Linear::make(store_, p + ".fc1", e, 4 * e, rng);
      b.fc2 = Linear::make(store_, p + ".fc2", 4 * e, e, rng);
      // Residual branches start small so deep stacks begin near identity.
      for (auto* t : {&b.proj.weight, &b.fc2.weight}) {
        for (auto& x : t->data()) x *= 0.1f;
      }
      blocks_.push_back(std::move(b));
    }
    unembed_ = Linear::make(store_, "unembed", e, cb, rng);
  } else {
    bottleneck_ = DoubleConv::make(store_, "bottleneck", c3, cb, rng);
  }
  reduce3_ = Conv::make(store_, "reduce3", cb, c3, 1, rng, true);
  dec3_ = DoubleConv::make(store_, "dec3", 2 * c3, c3, rng);
  reduce2_ = Conv::make(store_, "reduce2", c3, c2, 1, rng, true);
  dec2_ = DoubleConv::make(store_, "dec2", 2 * c2, c2, rng);
  reduce1_ = Conv::make(store_, "reduce1", c2, c1, 1, rng, true);
  dec1_ = DoubleConv::make(store_, "dec1", 2 * c1, c1, rng);
  head_ = Conv::make(store_, "head", c1, spec.class_count, 1, rng, true);
}

Tensor SegModel::attention(const Tensor& x) const {
  // x: [N, C, h, w] -> tokens [N, T, C]
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto tokens = ops::transpose_last2(ops::reshape(x, {n, c, h * w}));
  auto t = embed_(tokens);
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(spec_.embed_dim));
  for (const auto& b : blocks_) {
    auto hn = b.ln1(t);
    auto q = b.q(hn), k = b.k(hn), v = b.v(hn);
    auto scores = ops::scale(ops::matmul(q, ops::transpose_last2(k)), inv_sqrt);
    auto mixed = ops::matmul(ops::softmax_lastdim(scores), v);
    t = ops::add(t, b.proj(mixed));
    auto h2 = b.ln2(t);
    t = ops::add(t, b.fc2(ops::gelu(b.fc1(h2))));
  }
  auto out = unembed_(t);  // [N, T, cb]
  const auto cb = out.dim(2);
  return ops::reshape(ops::transpose_last2(out), {n, cb, h, w});
}

Tensor SegModel::forward(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != spec_.input_channels) {
    throw ShapeError(spec_.label() + ": expected [N, " + std::to_string(spec_.input_channels) +
                     ", H, W] input, got " + shape_str(x.shape()));
  }
  if (x.dim(2) % kDownsampleFactor || x.dim(3) % kDownsampleFactor) {
    throw ShapeError(spec_.label() + ": spatial size " + std::to_string(x.dim(2)) + "x" +
                     std::to_string(x.dim(3)) + " is not divisible by " + std::to_string(kDownsampleFactor));
  }
  auto e1 = enc1_(x);
  auto e2 = enc2_(ops::maxpool2d(e1, 2));
  auto e3 = enc3_(ops::maxpool2d(e2, 2));
  auto low = ops::maxpool2d(e3, 2);
  auto b = spec_.family == Family::kAttn ? attention(low) : bottleneck_(low);
  auto d3 = dec3_(ops::concat_channels(ops::nearest_upsample2x(reduce3_(b)), e3));
  auto d2 = dec2_(ops::concat_channels(ops::nearest_upsample2x(reduce2_(d3)), e2));
  auto d1 = dec1_(ops::concat_channels(ops::nearest_upsample2x(reduce1_(d2)), e1));
  return head_(d1);
}

SegModel& ModelBank::model(int index) {
  if (index < 1 || index > size()) {
    throw ConfigError("candidate index " + std::to_string(index) + " outside 1.." + std::to_string(size()) +
                      (index == 0 ? " (0 is the skip option, not a bank member)" : ""));
  }
  return *models[static_cast<std::size_t>(index - 1)];
}

const SegModel& ModelBank::model(int index) const { return const_cast<ModelBank*>(this)->model(index); }

ModelBank build_bank(const std::vector<CandidateSpec>& specs, std::uint64_t seed, int height, int width) {
  if (specs.empty()) throw ConfigError("model bank needs at least one candidate");
  ModelBank bank;
  bank.seed = seed;
  bank.height = height;
  bank.width = width;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (specs[i].index != static_cast<int>(i) + 1) {
      throw ConfigError("candidate indices must run 1..n in order; position " + std::to_string(i + 1) +
                        " has index " + std::to_string(specs[i].index));
    }
    bank.flops_table.push_back(flops::candidate(specs[i], height, width));
    if (i > 0 && bank.flops_table[i] <= bank.flops_table[i - 1]) {
      throw ConfigError("candidate " + std::to_string(i + 1) + " (" + specs[i].label() + ", " +
                        std::to_string(bank.flops_table[i]) + " FLOPs) is not costlier than candidate " +
                        std::to_string(i) + " (" + specs[i - 1].label() + ", " +
                        std::to_string(bank.flops_table[i - 1]) + " FLOPs)");
    }
  }
  bank.specs = specs;
  for (const auto& s : specs) {
    bank.models.push_back(std::make_unique<SegModel>(s, derive_seed(seed, "candidate-init", s.index)));
  }
  return bank;
}

Tensor forward_candidate_batch(const ModelBank& bank, int index, const Tensor& batch) {
  return bank.model(index).forward(batch);
}

Tensor forward_candidate(const ModelBank& bank, int index, const Tensor& slice) {
  const auto& m = bank.model(index);
  if (slice.rank() != 3) throw ShapeError("forward_candidate expects a [C, H, W] slice, got " + shape_str(slice.shape()));
  auto x = ops::reshape(slice, {1, slice.dim(0), slice.dim(1), slice.dim(2)});
  auto y = m.forward(x);
  return ops::reshape(y, {y.dim(1), y.dim(2), y.dim(3)});
}

std::vector<std::uint8_t> argmax_mask(const Tensor& logits) {
  if (logits.rank() != 3) throw ShapeError("argmax_mask expects [C, H, W] logits, got " + shape_str(logits.shape()));
  const auto C = logits.dim(0), hw = logits.dim(1) * logits.dim(2);
  const float* z = logits.data().data();
  std::vector<std::uint8_t> out(static_cast<std::size_t>(hw));
  for (std::int64_t j = 0; j < hw; ++j) {
    std::int64_t best = 0;
    for (std::int64_t c = 1; c < C; ++c) {
      if (z[c * hw + j] > z[best * hw + j]) best = c;
    }
    out[static_cast<std::size_t>(j)] = static_cast<std::uint8_t>(best);
  }
  return out;
}

bool BankTrainResult::all_converged() const {
  return std::all_of(converged.begin(), converged.end(), [](bool b) { return b; });
}

bool curve_converged(const std::vector<double>& curve, int smooth_width, int window, double tolerance) {
  if (curve.empty()) return true;
  for (double v : curve) {
    if (!std::isfinite(v)) return false;
  }
  const int sw = std::max(1, smooth_width);
  std::vector<double> smooth(curve.size());
  for (std::size_t i = 0; i < curve.size(); ++i) {
    const std::size_t lo = i + 1 >= static_cast<std::size_t>(sw) ? i + 1 - sw : 0;
    smooth[i] = std::accumulate(curve.begin() + static_cast<std::ptrdiff_t>(lo),
                                curve.begin() + static_cast<std::ptrdiff_t>(i + 1), 0.0) /
                static_cast<double>(i + 1 - lo);
  }
  // Shorter curves are checked end to end.
  const std::size_t span = std::min(static_cast<std::size_t>(std::max(1, window)) - 1, smooth.size() - 1);
  for (std::size_t i = 0; i + span < smooth.size(); ++i) {
    if (smooth[i + span] > smooth[i] * (1.0 + tolerance)) return false;
  }
  return true;
}

BankTrainResult train_bank_jointly(ModelBank& bank, const std::vector<SliceItem>& data,
                                   const BankTrainConfig& cfg) {
  if (data.empty()) throw ConfigError("train_bank_jointly: empty dataset");
  if (cfg.epochs < 1) throw ConfigError("train_bank_jointly: epochs must be >= 1");
  if (cfg.batch_size < 1) throw ConfigError("train_bank_jointly: batch_size must be >= 1");
  const int n = bank.size();
  std::vector<int> detach = cfg.detach_epochs.empty() ? std::vector<int>(n, cfg.epochs) : cfg.detach_epochs;
  if (static_cast<int>(detach.size()) != n) {
    throw ConfigError("detach schedule lists " + std::to_string(detach.size()) + " epochs for " +
                      std::to_string(n) + " candidates");
  }
  for (int d : detach) {
    if (d < 1 || d > cfg.epochs) throw ConfigError("detach epochs must lie in 1..epochs");
  }
  for (const auto& item : data) {
    if (item.label.empty()) throw ConfigError("train_bank_jointly: slice without labels");
  }
  const int classes = bank.specs.front().class_count;
  const std::int64_t steps_per_epoch =
      (static_cast<std::int64_t>(data.size()) + cfg.batch_size - 1) / cfg.batch_size;
  AdamConfig acfg;
  acfg.schedule.base_lr = cfg.lr;
  acfg.schedule.total_steps = steps_per_epoch * cfg.epochs;
  acfg.schedule.warmup_steps = static_cast<std::int64_t>(std::llround(cfg.warmup_fraction * acfg.schedule.total_steps));
  acfg.schedule.power = cfg.poly_power;
  acfg.weight_decay = cfg.weight_decay;
  Adam adam(acfg);

  BankTrainResult result;
  result.loss_curve.assign(static_cast<std::size_t>(n), {});
  std::vector<std::size_t> order(data.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int> attached;
    for (int i = 1; i <= n; ++i) {
      const bool on = epoch < detach[static_cast<std::size_t>(i - 1)];
      bank.model(i).store().set_requires_grad(on);
      if (on) attached.push_back(i);
    }
    result.attached_per_epoch.push_back(attached);
    std::vector<NamedParam> params;
    for (int i : attached) {
      for (auto& p : bank.model(i).store().params()) params.push_back({"m" + std::to_string(i) + "." + p.name, p.tensor});
    }

    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, "bank-epoch", static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);

    std::vector<double> sums(static_cast<std::size_t>(n), 0.0);
    double bank_sum = 0;
    for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
      const std::size_t lo = static_cast<std::size_t>(s) * cfg.batch_size;
      const std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(cfg.batch_size));
      std::vector<float> pixels;
      std::vector<std::uint8_t> labels;
      Shape item_shape;
      for (std::size_t k = lo; k < hi; ++k) {
        const auto& item = data[order[k]];
        auto a = augment(item.image, item.label, cfg.augment, rng);
        item_shape = a.image.shape();
        pixels.insert(pixels.end(), a.image.data().begin(), a.image.data().end());
        labels.insert(labels.end(), a.label.begin(), a.label.end());
      }
      Tensor batch({static_cast<std::int64_t>(hi - lo), item_shape[0], item_shape[1], item_shape[2]}, std::move(pixels));
      for (auto& p : params) p.tensor.zero_grad();
      Tape tape;
      {
        TapeScope scope(tape);
        std::vector<Tensor> losses;
        for (int i : attached) losses.push_back(dice_loss(bank.model(i).forward(batch), labels, classes));
        auto loss = bank_loss<float>(losses);
        if (!loss.all_finite()) throw Error("bank loss became non-finite at epoch " + std::to_string(epoch));
        backward(loss, tape);
        for (std::size_t k = 0; k < attached.size(); ++k) {
          sums[static_cast<std::size_t>(attached[k] - 1)] += losses[k].item();
        }
        bank_sum += loss.item();
      }
      adam.step(params);
      ++result.steps;
    }
    std::vector<double> epoch_losses(static_cast<std::size_t>(n), std::nan(""));
    for (int i : attached) {
      const double v = sums[static_cast<std::size_t>(i - 1)] / static_cast<double>(steps_per_epoch);
      result.loss_curve[static_cast<std::size_t>(i - 1)].push_back(v);
      epoch_losses[static_cast<std::size_t>(i - 1)] = v;
    }
    result.bank_loss_curve.push_back(bank_sum / static_cast<double>(steps_per_epoch));
    if (cfg.on_epoch) cfg.on_epoch(epoch, epoch_losses);
  }
  for (int i = 1; i <= n; ++i) bank.model(i).store().set_requires_grad(false);
  for (const auto& curve : result.loss_curve) {
    result.converged.push_back(curve_converged(curve, cfg.smooth_width, cfg.window, cfg.tolerance));
  }
  bank.trained = true;
  return result;
}

namespace {

nlohmann::json spec_json(const CandidateSpec& s) {
  return {{"index", s.index},           {"family", family_name(s.family)}, {"width", s.width},
          {"depth", s.depth},           {"embed_dim", s.embed_dim},        {"input_channels", s.input_channels},
          {"class_count", s.class_count}};
}

}  // namespace

void save_bank(const std::filesystem::path& dir, const ModelBank& bank, const BankTrainConfig& cfg,
               const std::string& config_hash) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["seed"] = bank.seed;
  j["height"] = bank.height;
  j["width"] = bank.width;
  j["trained"] = bank.trained;
  j["config_hash"] = config_hash;
  j["schedule"] = {{"epochs", cfg.epochs},
                   {"detach_epochs", cfg.detach_epochs.empty() ? std::vector<int>(bank.specs.size(), cfg.epochs)
                                                               : cfg.detach_epochs}};
  j["candidates"] = nlohmann::json::array();
  for (int i = 1; i <= bank.size(); ++i) {
    const std::string file = "candidate_" + std::to_string(i) + ".dwt";
    save_checkpoint(dir / file, bank.model(i).store().params());
    auto entry = spec_json(bank.specs[static_cast<std::size_t>(i - 1)]);
    entry["file"] = file;
    entry["flops"] = bank.flops_table[static_cast<std::size_t>(i - 1)];
    entry["parameters"] = bank.model(i).store().parameter_count();
    j["candidates"].push_back(entry);
  }
  std::ofstream os(dir / "bank.json");
  os << j.dump(2) << "\n";
  if (!os) throw DataError(DataError::Kind::kIo, "cannot write " + (dir / "bank.json").string());
}

ModelBank load_bank(const std::filesystem::path& dir) {
  std::ifstream is(dir / "bank.json");
  if (!is) throw DataError(DataError::Kind::kIo, "cannot open " + (dir / "bank.json").string());
  nlohmann::json j;
  try {
    is >> j;
    std::vector<CandidateSpec> specs;
    for (const auto& c : j.at("candidates")) {
      CandidateSpec s;
      s.index = c.at("index");
      s.family = parse_family(c.at("family"));
      s.width = c.at("width");
      s.depth = c.at("depth");
      s.embed_dim = c.at("embed_dim");
      s.input_channels = c.at("input_channels");
      s.class_count = c.at("class_count");
      specs.push_back(s);
    }
    auto bank = build_bank(specs, j.at("seed").get<std::uint64_t>(), j.at("height"), j.at("width"));
    for (int i = 1; i <= bank.size(); ++i) {
      const std::string file = j.at("candidates").at(static_cast<std::size_t>(i - 1)).at("file");
      load_checkpoint_into(dir / file, bank.model(i).store().params());
    }
    bank.trained = j.at("trained");
    for (int i = 1; i <= bank.size(); ++i) bank.model(i).store().set_requires_grad(false);
    return bank;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataError::Kind::kInvalid, (dir / "bank.json").string() + ": " + e.what());
  }
}

}  // namespace dynaroute
