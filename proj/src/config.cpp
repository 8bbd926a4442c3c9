// SPDX-License-Identifier: Apache-2.0
#include "dynaroute/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "dynaroute/decision_net.hpp"
#include "dynaroute/errors.hpp"
#include "dynaroute/flops.hpp"

namespace dynaroute {

using nlohmann::json;

std::vector<CandidateSpec> ExperimentConfig::roster() const {
  auto specs = bank.candidates.empty() ? default_roster(data.channels, data.class_count) : bank.candidates;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    specs[i].index = static_cast<int>(i) + 1;
    specs[i].input_channels = data.channels;
    specs[i].class_count = data.class_count;
  }
  return specs;
}

std::vector<int> ExperimentConfig::detach_schedule() const {
  if (!bank.detach_epochs.empty()) return bank.detach_epochs;
  const int n = static_cast<int>(roster().size());
  const int early = std::max(1, (3 * bank.epochs) / 4);
  std::vector<int> out;
  for (int i = 0; i < n; ++i) out.push_back(n > 1 && i < n / 2 ? early : bank.epochs);
  return out;
}

std::vector<double> ExperimentConfig::decision_weights() const {
  return decision.weights.empty() ? default_decision_weights(static_cast<int>(roster().size())) : decision.weights;
}

std::vector<NamedRegion> ExperimentConfig::region_set() const {
  return regions.empty() ? default_regions(data.class_count) : regions;
}

SynthConfig ExperimentConfig::synth(bool eval_split) const {
  SynthConfig s;
  s.seed = derive_seed(seed, eval_split ? seeds::kEvalData : seeds::kTrainData);
  s.volume_count = eval_split ? data.eval_volumes : data.train_volumes;
  s.channels = data.channels;
  s.depth = data.depth;
  s.height = data.height;
  s.width = data.width;
  s.class_count = data.class_count;
  s.margin = data.margin;
  s.min_lesions = data.min_lesions;
  s.max_lesions = data.max_lesions;
  s.min_radius = data.min_radius;
  s.max_radius_min = data.max_radius_min;
  s.max_radius_max = data.max_radius_max;
  s.band_irregularity = data.band_irregularity;
  s.noise_std = data.noise_std;
  s.id_prefix = eval_split ? "eval" : "train";
  return s;
}

DecisionNetSpec ExperimentConfig::decision_spec() const {
  DecisionNetSpec s;
  s.widths = decision.widths;
  s.input_channels = data.channels;
  s.option_count = static_cast<int>(roster().size()) + 1;
  return s;
}

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.bank.candidates = default_roster(c.data.channels, c.data.class_count);
  return c;
}

namespace {

json candidate_json(const CandidateSpec& s) {
  return {{"family", family_name(s.family)}, {"width", s.width}, {"depth", s.depth}, {"embed_dim", s.embed_dim}};
}

[[noreturn]] void fail(const std::string& where, const std::string& what) {
  throw ConfigError("config " + where + ": " + what);
}

// Overlays `user` onto `base`, which must already hold every known key.
void merge(json& base, const json& user, const std::string& where) {
  if (!user.is_object()) fail(where.empty() ? "root" : where, "expected an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string path = where.empty() ? it.key() : where + "." + it.key();
    if (!base.contains(it.key())) fail(path, "unknown key");
    json& slot = base[it.key()];
    const json& v = it.value();
    if (slot.is_object()) {
      merge(slot, v, path);
      continue;
    }
    const bool ok = (slot.is_boolean() && v.is_boolean()) || (slot.is_string() && v.is_string()) ||
                    (slot.is_array() && v.is_array()) ||
                    (slot.is_number_integer() && v.is_number_integer()) ||
                    (slot.is_number_float() && v.is_number());
    if (!ok) fail(path, std::string("expected ") + slot.type_name() + ", got " + v.type_name());
    slot = slot.is_number_float() ? json(v.get<double>()) : v;
  }
}

template <typename V>
V field(const json& j, const char* key, const std::string& where) {
  try {
    return j.at(key).get<V>();
  } catch (const json::exception& e) {
    fail(where + "." + key, e.what());
  }
}

int int_field(const json& j, const char* key, const std::string& where) {
  const auto& v = j.at(key);
  if (!v.is_number_integer()) fail(where + "." + key, "expected an integer");
  return v.get<int>();
}

std::vector<double> numbers(const json& j, const char* key, const std::string& where) {
  const auto& v = j.at(key);
  for (const auto& e : v) {
    if (!e.is_number()) fail(where + "." + key, "expected numbers");
  }
  return v.get<std::vector<double>>();
}

std::vector<int> ints(const json& j, const char* key, const std::string& where) {
  const auto& v = j.at(key);
  for (const auto& e : v) {
    if (!e.is_number_integer()) fail(where + "." + key, "expected integers");
  }
  return v.get<std::vector<int>>();
}

CandidateSpec parse_candidate(const json& e, const std::string& where) {
  json full = candidate_json(CandidateSpec{});
  merge(full, e, where);
  CandidateSpec s;
  try {
    s.family = parse_family(full.at("family").get<std::string>());
  } catch (const ConfigError& err) {
    fail(where + ".family", err.what());
  }
  s.width = int_field(full, "width", where);
  s.depth = int_field(full, "depth", where);
  s.embed_dim = int_field(full, "embed_dim", where);
  return s;
}

}  // namespace

json config_to_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  const auto& d = c.data;
  j["data"] = {{"train_volumes", d.train_volumes},   {"eval_volumes", d.eval_volumes},
               {"channels", d.channels},             {"depth", d.depth},
               {"height", d.height},                 {"width", d.width},
               {"class_count", d.class_count},       {"margin", d.margin},
               {"min_lesions", d.min_lesions},       {"max_lesions", d.max_lesions},
               {"min_radius", d.min_radius},         {"max_radius_min", d.max_radius_min},
               {"max_radius_max", d.max_radius_max}, {"band_irregularity", d.band_irregularity},
               {"noise_std", d.noise_std}};
  const auto& b = c.bank;
  json cands = json::array();
  for (const auto& s : b.candidates) cands.push_back(candidate_json(s));
  j["bank"] = {{"candidates", cands},
               {"epochs", b.epochs},
               {"detach_epochs", b.detach_epochs},
               {"batch_size", b.batch_size},
               {"lr", b.lr},
               {"warmup_fraction", b.warmup_fraction},
               {"poly_power", b.poly_power},
               {"weight_decay", b.weight_decay},
               {"crop", b.crop},
               {"flips", b.flips},
               {"shift_fraction", b.shift_fraction},
               {"smooth_width", b.smooth_width},
               {"convergence_window", b.convergence_window},
               {"convergence_tolerance", b.convergence_tolerance}};
  j["metric"] = {{"alpha", c.metric.alpha},
                 {"softmax_on_S", c.metric.softmax_on_S},
                 {"softmax_on_F", c.metric.softmax_on_F},
                 {"flops_unit", c.metric.flops_unit}};
  const auto& dn = c.decision;
  j["decision"] = {{"widths", dn.widths},
                   {"epochs", dn.epochs},
                   {"batch_size", dn.batch_size},
                   {"lr", dn.lr},
                   {"warmup_fraction", dn.warmup_fraction},
                   {"poly_power", dn.poly_power},
                   {"weight_decay", dn.weight_decay},
                   {"weights", dn.weights},
                   {"balanced", dn.balanced},
                   {"flips", dn.flips},
                   {"flip_fraction", dn.flip_fraction}};
  j["ablate"] = {{"alphas", c.ablate.alphas}};
  json regions = json::array();
  for (const auto& r : c.regions) regions.push_back({{"name", r.name}, {"classes", r.classes}});
  j["regions"] = regions;
  return j;
}

ExperimentConfig config_from_json(const json& user) {
  json full = config_to_json(default_config());
  merge(full, user, "");

  ExperimentConfig c;
  const auto& seed = full.at("seed");
  if (!seed.is_number_unsigned() && !(seed.is_number_integer() && seed.get<std::int64_t>() >= 0)) {
    fail("seed", "expected a non-negative integer");
  }
  c.seed = seed.get<std::uint64_t>();
  c.out_dir = field<std::string>(full, "out_dir", "root");

  const auto& d = full.at("data");
  c.data.train_volumes = int_field(d, "train_volumes", "data");
  c.data.eval_volumes = int_field(d, "eval_volumes", "data");
  c.data.channels = int_field(d, "channels", "data");
  c.data.depth = int_field(d, "depth", "data");
  c.data.height = int_field(d, "height", "data");
  c.data.width = int_field(d, "width", "data");
  c.data.class_count = int_field(d, "class_count", "data");
  c.data.margin = int_field(d, "margin", "data");
  c.data.min_lesions = int_field(d, "min_lesions", "data");
  c.data.max_lesions = int_field(d, "max_lesions", "data");
  c.data.min_radius = field<double>(d, "min_radius", "data");
  c.data.max_radius_min = field<double>(d, "max_radius_min", "data");
  c.data.max_radius_max = field<double>(d, "max_radius_max", "data");
  c.data.band_irregularity = numbers(d, "band_irregularity", "data");
  c.data.noise_std = field<double>(d, "noise_std", "data");

  const auto& b = full.at("bank");
  c.bank.candidates.clear();
  const auto& cands = b.at("candidates");
  for (std::size_t i = 0; i < cands.size(); ++i) {
    c.bank.candidates.push_back(parse_candidate(cands[i], "bank.candidates[" + std::to_string(i) + "]"));
  }
  c.bank.epochs = int_field(b, "epochs", "bank");
  c.bank.detach_epochs = ints(b, "detach_epochs", "bank");
  c.bank.batch_size = int_field(b, "batch_size", "bank");
  c.bank.lr = field<double>(b, "lr", "bank");
  c.bank.warmup_fraction = field<double>(b, "warmup_fraction", "bank");
  c.bank.poly_power = field<double>(b, "poly_power", "bank");
  c.bank.weight_decay = field<double>(b, "weight_decay", "bank");
  c.bank.crop = int_field(b, "crop", "bank");
  c.bank.flips = field<bool>(b, "flips", "bank");
  c.bank.shift_fraction = field<double>(b, "shift_fraction", "bank");
  c.bank.smooth_width = int_field(b, "smooth_width", "bank");
  c.bank.convergence_window = int_field(b, "convergence_window", "bank");
  c.bank.convergence_tolerance = field<double>(b, "convergence_tolerance", "bank");

  const auto& m = full.at("metric");
  c.metric.alpha = field<double>(m, "alpha", "metric");
  c.metric.softmax_on_S = field<bool>(m, "softmax_on_S", "metric");
  c.metric.softmax_on_F = field<bool>(m, "softmax_on_F", "metric");
  c.metric.flops_unit = field<double>(m, "flops_unit", "metric");

  const auto& dn = full.at("decision");
  c.decision.widths = ints(dn, "widths", "decision");
  c.decision.epochs = int_field(dn, "epochs", "decision");
  c.decision.batch_size = int_field(dn, "batch_size", "decision");
  c.decision.lr = field<double>(dn, "lr", "decision");
  c.decision.warmup_fraction = field<double>(dn, "warmup_fraction", "decision");
  c.decision.poly_power = field<double>(dn, "poly_power", "decision");
  c.decision.weight_decay = field<double>(dn, "weight_decay", "decision");
  c.decision.weights = numbers(dn, "weights", "decision");
  c.decision.balanced = field<bool>(dn, "balanced", "decision");
  c.decision.flips = field<bool>(dn, "flips", "decision");
  c.decision.flip_fraction = field<double>(dn, "flip_fraction", "decision");

  c.ablate.alphas = numbers(full.at("ablate"), "alphas", "ablate");

  const auto& regions = full.at("regions");
  for (std::size_t i = 0; i < regions.size(); ++i) {
    const std::string where = "regions[" + std::to_string(i) + "]";
    json r = {{"name", ""}, {"classes", json::array()}};
    merge(r, regions[i], where);
    c.regions.push_back({field<std::string>(r, "name", where), ints(r, "classes", where)});
  }
  validate_config(c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

void validate_config(const ExperimentConfig& c) {
  const auto& d = c.data;
  if (d.train_volumes < 1 || d.eval_volumes < 1) fail("data", "need at least one train and one eval volume");
  if (d.channels < 1) fail("data.channels", "must be >= 1");
  if (d.class_count < 2 || d.class_count > 255) fail("data.class_count", "must be in 2..255");
  if (d.height < kDownsampleFactor || d.width < kDownsampleFactor || d.height % kDownsampleFactor ||
      d.width % kDownsampleFactor) {
    fail("data", "height and width must be positive multiples of " + std::to_string(kDownsampleFactor));
  }
  try {
    c.synth(false).validate();
  } catch (const ConfigError& e) {
    fail("data", e.what());
  }

  const auto roster = c.roster();
  if (roster.empty()) fail("bank.candidates", "need at least one candidate");
  for (const auto& s : roster) {
    if (s.family == Family::kUnet && s.width < 1) fail("bank.candidates", "unet width must be positive");
    if (s.family == Family::kAttn && (s.depth < 1 || s.embed_dim < 1)) {
      fail("bank.candidates", "attn depth and embed_dim must be positive");
    }
  }
  const auto& b = c.bank;
  if (b.epochs < 1) fail("bank.epochs", "must be >= 1");
  if (b.batch_size < 1) fail("bank.batch_size", "must be >= 1");
  if (!(b.lr > 0)) fail("bank.lr", "must be positive");
  if (b.warmup_fraction < 0 || b.warmup_fraction >= 1) fail("bank.warmup_fraction", "must be in [0, 1)");
  if (b.weight_decay < 0) fail("bank.weight_decay", "must be >= 0");
  if (b.crop != 0 && (b.crop > d.height || b.crop > d.width || b.crop % kDownsampleFactor)) {
    fail("bank.crop", "must be 0 or a multiple of " + std::to_string(kDownsampleFactor) + " no larger than the slice");
  }
  if (b.shift_fraction < 0) fail("bank.shift_fraction", "must be >= 0");
  if (b.smooth_width < 1 || b.convergence_window < 2 || b.convergence_tolerance < 0) {
    fail("bank", "convergence parameters out of range");
  }
  const auto detach = c.detach_schedule();
  if (detach.size() != roster.size()) fail("bank.detach_epochs", "needs one entry per candidate");
  for (int e : detach) {
    if (e < 1 || e > b.epochs) fail("bank.detach_epochs", "entries must be in 1..epochs");
  }

  const auto& m = c.metric;
  if (!(m.alpha >= 0 && m.alpha <= 1)) fail("metric.alpha", "must be in [0, 1]");
  if (!(m.flops_unit > 0)) fail("metric.flops_unit", "must be positive");

  const auto& dn = c.decision;
  if (dn.widths.empty()) fail("decision.widths", "need at least one stage");
  for (int w : dn.widths) {
    if (w < 1) fail("decision.widths", "must be positive");
  }
  if (dn.epochs < 1) fail("decision.epochs", "must be >= 1");
  if (dn.batch_size < 1) fail("decision.batch_size", "must be >= 1");
  if (!(dn.lr > 0)) fail("decision.lr", "must be positive");
  if (dn.warmup_fraction < 0 || dn.warmup_fraction >= 1) fail("decision.warmup_fraction", "must be in [0, 1)");
  if (dn.flip_fraction < 0 || dn.flip_fraction > 1) fail("decision.flip_fraction", "must be in [0, 1]");
  const auto w = c.decision_weights();
  if (w.size() != roster.size() + 1) fail("decision.weights", "needs n + 1 entries");
  for (double x : w) {
    if (!(x > 0)) fail("decision.weights", "must all be positive");
  }

  if (c.ablate.alphas.empty()) fail("ablate.alphas", "must not be empty");
  for (double a : c.ablate.alphas) {
    if (!(a >= 0 && a <= 1)) fail("ablate.alphas", "entries must be in [0, 1]");
  }

  for (const auto& r : c.region_set()) {
    if (r.classes.empty()) fail("regions", "region " + r.name + " has no classes");
    for (int k : r.classes) {
      if (k < 1 || k >= d.class_count) fail("regions", "region " + r.name + " names class " + std::to_string(k));
    }
  }
}

std::string config_hash(const ExperimentConfig& cfg) {
  auto j = config_to_json(cfg);
  j.erase("out_dir");
  const std::string canon = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canon) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace dynaroute
