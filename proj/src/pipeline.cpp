// SPDX-License-Identifier: Apache-2.0
#include "dynaroute/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <charconv>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

#include "dynaroute/choice_metric.hpp"
#include "dynaroute/errors.hpp"
#include "dynaroute/flops.hpp"

namespace dynaroute {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::ostream* g_log = nullptr;

template <typename... A>
void log(const A&... parts) {
  if (!g_log) return;
  ((*g_log) << ... << parts) << '\n';
  g_log->flush();
}

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  os << j.dump(2) << "\n";
  if (!os) throw DataError(DataError::Kind::kIo, "cannot write " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError(DataError::Kind::kIo, "cannot open " + path.string());
  try {
    json j;
    is >> j;
    return j;
  } catch (const json::exception& e) {
    throw DataError(DataError::Kind::kInvalid, path.string() + ": " + e.what());
  }
}

json rational_json(const Rational& r) { return {{"num", r.num}, {"den", r.den}, {"value", r.value()}}; }

Rational rational_sum(const std::vector<Rational>& v) {
  Rational acc{0, 1};
  for (const auto& r : v) {
    const auto l = std::lcm(acc.den, r.den);
    acc = Rational::make(acc.num * (l / acc.den) + r.num * (l / r.den), l);
  }
  return acc;
}

std::string option_name(int k) { return k == 0 ? "skip" : "M" + std::to_string(k); }

std::vector<flops::Count> roster_flops(const ExperimentConfig& cfg) {
  std::vector<flops::Count> out;
  for (const auto& s : cfg.roster()) out.push_back(flops::candidate(s, cfg.data.height, cfg.data.width));
  return out;
}

ModelBank load_checked_bank(const ExperimentConfig& cfg) {
  auto bank = load_bank(fs::path(cfg.out_dir) / "bank");
  if (bank.specs != cfg.roster()) {
    throw ConfigError("bank checkpoint has " + std::to_string(bank.size()) +
                      " candidates that do not match the configured roster");
  }
  if (bank.height != cfg.data.height || bank.width != cfg.data.width) {
    throw ConfigError("bank checkpoint was costed at a different slice size");
  }
  return bank;
}

}  // namespace

void set_log_stream(std::ostream* os) { g_log = os; }

std::string mode_dir(const std::string& base, const RoutingOptions& opts) {
  if (opts.oracle_routing && opts.force_decision) throw ConfigError("--force-decision and --oracle-routing are exclusive");
  if (opts.oracle_routing) return base + "-oracle";
  if (opts.force_decision) return base + "-force-" + std::to_string(*opts.force_decision);
  return base;
}

std::vector<Volume> load_split(const fs::path& out_dir, const std::string& split) {
  const auto manifest = read_json(out_dir / "data" / "manifest.json");
  std::vector<Volume> out;
  try {
    for (const auto& f : manifest.at("splits").at(split).at("files")) {
      out.push_back(load_dvol(out_dir / "data" / split / f.get<std::string>()));
    }
  } catch (const json::exception& e) {
    throw DataError(DataError::Kind::kInvalid, "data manifest: " + std::string(e.what()));
  }
  return out;
}

InferenceOutput route_volumes(const ModelBank& bank, const DecisionNet* net, const std::vector<Volume>& volumes,
                              const RoutingOptions& opts, const MetricConfig& metric) {
  const int n = bank.size();
  if (opts.force_decision && (*opts.force_decision < 0 || *opts.force_decision > n)) {
    throw ConfigError("forced decision " + std::to_string(*opts.force_decision) + " outside 0.." + std::to_string(n));
  }
  const bool use_net = !opts.force_decision && !opts.oracle_routing;
  if (use_net && !net) throw ConfigError("routing needs a decision net unless the decision is forced");
  if (use_net && net->spec().option_count != n + 1) {
    throw ConfigError("decision net has " + std::to_string(net->spec().option_count) + " outputs but the bank has " +
                      std::to_string(n) + " candidates");
  }
  const flops::Count dflops = use_net ? flops::decision(net->spec(), bank.height, bank.width) : 0;
  const int classes = bank.specs.front().class_count;
  InferenceOutput out;
  for (const auto& v : volumes) {
    if (v.height != bank.height || v.width != bank.width) {
      throw ShapeError("volume " + v.case_id + " is " + std::to_string(v.height) + "x" + std::to_string(v.width) +
                       ", bank expects " + std::to_string(bank.height) + "x" + std::to_string(bank.width));
    }
    if (opts.oracle_routing && !v.has_labels()) throw ConfigError("oracle routing needs labelled volumes");
    Volume mask;
    mask.case_id = v.case_id;
    mask.depth = v.depth;
    mask.height = v.height;
    mask.width = v.width;
    mask.labels.assign(static_cast<std::size_t>(v.depth) * v.slice_pixels(), 0);
    for (const auto& item : iter_slices({v})) {
      TraceRow row{item.case_id, item.slice_index, 0, dflops, 0, 0, 0};
      std::vector<std::uint8_t> pred;
      if (opts.force_decision) {
        row.decision = *opts.force_decision;
      } else if (opts.oracle_routing) {
        SliceEvalRecord rec{item.case_id, item.slice_index, foreground_count(item.label), {}, bank.flops_table};
        if (rec.pf >= 1) {
          std::vector<std::vector<std::uint8_t>> probes;
          for (int i = 1; i <= n; ++i) {
            probes.push_back(argmax_mask(forward_candidate(bank, i, item.image)));
            rec.S.push_back(slice_dice(probes.back(), item.label, classes));
          }
          row.decision = choice_label(rec, metric);
          pred = std::move(probes[static_cast<std::size_t>(row.decision - 1)]);
          row.candidate_runs = 1;
          row.probe_runs = n - 1;
        }
      } else {
        row.decision = decide(*net, item.image).chosen;
      }
      if (row.decision > 0 && pred.empty()) {
        pred = argmax_mask(forward_candidate(bank, row.decision, item.image));
        ++row.candidate_runs;
      }
      if (row.decision > 0) {
        row.executed_flops = bank.flops_table[static_cast<std::size_t>(row.decision - 1)];
        std::copy(pred.begin(), pred.end(),
                  mask.labels.begin() + static_cast<std::ptrdiff_t>(item.slice_index * v.slice_pixels()));
      }
      out.trace.push_back(std::move(row));
    }
    out.masks.push_back(std::move(mask));
  }
  return out;
}

void write_trace(const fs::path& path, const RoutingTrace& trace) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  os << "case_id,slice,decision,decision_flops,executed_flops,candidate_runs,probe_runs\n";
  for (const auto& r : trace) {
    os << r.case_id << ',' << r.slice_index << ',' << r.decision << ',' << r.decision_flops << ',' << r.executed_flops
       << ',' << r.candidate_runs << ',' << r.probe_runs << '\n';
  }
  if (!os) throw DataError(DataError::Kind::kIo, "cannot write " + path.string());
}

RoutingTrace read_trace(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError(DataError::Kind::kIo, "cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != "case_id,slice,decision,decision_flops,executed_flops,candidate_runs,probe_runs") {
    throw DataError(DataError::Kind::kInvalid, path.string() + ": unexpected header");
  }
  RoutingTrace trace;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (f.size() != 7) throw DataError(DataError::Kind::kInvalid, where + ": wrong field count");
    auto num = [&](const std::string& s, auto& v) {
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || p != s.data() + s.size()) {
        throw DataError(DataError::Kind::kInvalid, where + ": bad number '" + s + "'");
      }
    };
    TraceRow r;
    r.case_id = f[0];
    num(f[1], r.slice_index);
    num(f[2], r.decision);
    num(f[3], r.decision_flops);
    num(f[4], r.executed_flops);
    num(f[5], r.candidate_runs);
    num(f[6], r.probe_runs);
    trace.push_back(std::move(r));
  }
  return trace;
}

MetricsReport evaluate_predictions(const std::vector<Volume>& predictions, const std::vector<Volume>& truths,
                                   const RoutingTrace& trace, const std::vector<NamedRegion>& regions,
                                   int class_count, std::span<const flops::Count> bank_flops) {
  if (truths.empty()) throw DataError(DataError::Kind::kInvalid, "nothing to evaluate");
  if (predictions.size() != truths.size()) {
    throw DataError(DataError::Kind::kInvalid, std::to_string(predictions.size()) + " predictions for " +
                                                   std::to_string(truths.size()) + " cases");
  }
  if (trace.empty()) throw DataError(DataError::Kind::kInvalid, "empty routing trace");
  const flops::Count dflops = trace.front().decision_flops;
  std::map<std::string, flops::Count> case_flops;
  std::size_t expected_rows = 0;
  for (const auto& r : trace) {
    if (r.decision_flops != dflops) throw DataError(DataError::Kind::kInvalid, "trace mixes decision costs");
    case_flops[r.case_id] += r.decision_flops + r.executed_flops;
  }

  MetricsReport rep;
  rep.regions.resize(regions.size());
  std::vector<int> defined(regions.size(), 0);
  for (std::size_t k = 0; k < regions.size(); ++k) rep.regions[k].name = regions[k].name;
  for (std::size_t c = 0; c < truths.size(); ++c) {
    const auto& t = truths[c];
    const auto& p = predictions[c];
    if (!t.has_labels() || p.case_id != t.case_id || p.depth != t.depth || p.height != t.height ||
        p.width != t.width || p.labels.size() != t.labels.size()) {
      throw DataError(DataError::Kind::kInvalid, "prediction " + p.case_id + " does not match case " + t.case_id);
    }
    expected_rows += static_cast<std::size_t>(t.depth);
    CaseScore cs;
    cs.case_id = t.case_id;
    const MaskDims dims{t.depth, t.height, t.width};
    for (std::size_t k = 0; k < regions.size(); ++k) {
      cs.region_dice.push_back(dice_score(p.labels, t.labels, regions[k].classes));
      cs.region_hd95.push_back(hd95(p.labels, t.labels, dims, regions[k].classes));
      rep.regions[k].dice += cs.region_dice.back();
      if (cs.region_hd95.back().defined) {
        rep.regions[k].hd95 += cs.region_hd95.back().value;
        ++defined[k];
      } else {
        ++rep.regions[k].hd95_undefined;
      }
    }
    cs.mean_foreground_dice = mean_foreground_dice(p.labels, t.labels, class_count);
    cs.executed_flops = case_flops.count(t.case_id) ? case_flops.at(t.case_id) : 0;
    rep.mean_foreground_dice += cs.mean_foreground_dice;
    rep.cases.push_back(std::move(cs));
  }
  if (expected_rows != trace.size()) {
    throw DataError(DataError::Kind::kInvalid, "trace has " + std::to_string(trace.size()) + " rows for " +
                                                   std::to_string(expected_rows) + " slices");
  }
  const double nc = static_cast<double>(truths.size());
  rep.mean_foreground_dice /= nc;
  for (std::size_t k = 0; k < regions.size(); ++k) {
    rep.regions[k].dice /= nc;
    rep.regions[k].hd95 = defined[k] ? rep.regions[k].hd95 / defined[k] : 0.0;
  }
  rep.flops = flops_report(trace, bank_flops, dflops);
  rep.activation = activation_ratio(trace, static_cast<int>(bank_flops.size()));
  return rep;
}

json report_json(const MetricsReport& rep, int candidate_count) {
  json j;
  j["config_hash"] = rep.config_hash;
  j["mean_foreground_dice"] = rep.mean_foreground_dice;
  j["regions"] = json::array();
  for (const auto& r : rep.regions) {
    j["regions"].push_back({{"name", r.name}, {"dice", r.dice}, {"hd95", r.hd95}, {"hd95_undefined", r.hd95_undefined}});
  }
  j["cases"] = json::array();
  for (const auto& c : rep.cases) {
    json regions = json::array();
    for (std::size_t k = 0; k < c.region_dice.size(); ++k) {
      regions.push_back({{"name", rep.regions[k].name},
                         {"dice", c.region_dice[k]},
                         {"hd95", c.region_hd95[k].defined ? json(c.region_hd95[k].value) : json(nullptr)}});
    }
    j["cases"].push_back({{"case_id", c.case_id},
                          {"mean_foreground_dice", c.mean_foreground_dice},
                          {"flops", c.executed_flops},
                          {"regions", regions}});
  }
  const auto& f = rep.flops;
  j["flops"] = {{"all_cases", f.all_cases},
                {"case_count", f.case_count},
                {"slice_count", f.slice_count},
                {"per_case", rational_json(f.per_case)},
                {"per_slice", rational_json(f.per_slice)},
                {"per_inference", rational_json(f.per_inference)},
                {"skip_all", f.skip_all},
                {"executed_total", f.executed_total}};
  json act = json::array();
  for (int k = 0; k <= candidate_count && k < static_cast<int>(rep.activation.size()); ++k) {
    auto e = rational_json(rep.activation[static_cast<std::size_t>(k)]);
    e["option"] = option_name(k);
    act.push_back(e);
  }
  j["activation_ratio"] = act;
  j["activation_sum"] = rational_json(rational_sum(rep.activation));
  return j;
}

namespace {

void write_report_csv(const fs::path& path, const MetricsReport& rep) {
  std::ofstream os(path, std::ios::trunc);
  os << "case_id,mean_foreground_dice";
  for (const auto& r : rep.regions) os << ',' << r.name << "_dice," << r.name << "_hd95";
  os << ",flops\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  for (const auto& c : rep.cases) {
    os << c.case_id << ',' << num(c.mean_foreground_dice);
    for (std::size_t k = 0; k < c.region_dice.size(); ++k) {
      os << ',' << num(c.region_dice[k]) << ',' << (c.region_hd95[k].defined ? num(c.region_hd95[k].value) : "nan");
    }
    os << ',' << c.executed_flops << '\n';
  }
  os << "mean," << num(rep.mean_foreground_dice);
  for (const auto& r : rep.regions) os << ',' << num(r.dice) << ',' << num(r.hd95);
  os << ',' << num(rep.flops.per_case.value()) << '\n';
  if (!os) throw DataError(DataError::Kind::kIo, "cannot write " + path.string());
}

}  // namespace

TableStats table_stats(const std::vector<SliceEvalRecord>& records) {
  TableStats st;
  if (records.empty()) return st;
  st.candidate_mean_dice.assign(records.front().S.size(), 0.0);
  for (const auto& r : records) {
    for (std::size_t i = 0; i < r.S.size(); ++i) st.candidate_mean_dice[i] += r.S[i];
    st.oracle_mean_dice += *std::max_element(r.S.begin(), r.S.end());
  }
  const double n = static_cast<double>(records.size());
  for (auto& v : st.candidate_mean_dice) v /= n;
  st.oracle_mean_dice /= n;
  return st;
}

std::vector<AblationCell> ablation_grid(const std::vector<SliceEvalRecord>& records, const std::vector<double>& alphas,
                                        double flops_unit) {
  if (records.empty()) throw ConfigError("ablation over an empty record table");
  const int n = static_cast<int>(records.front().S.size());
  std::vector<AblationCell> cells;
  for (const auto& v : metric_variants()) {
    for (double a : alphas) {
      MetricConfig mc{a, v.softmax_on_S, v.softmax_on_F, flops_unit};
      const auto labels = oracle_route(records, mc);
      AblationCell cell{v.name, v.softmax_on_S, v.softmax_on_F, a, 0, 0, {}};
      std::vector<std::uint64_t> counts(static_cast<std::size_t>(n) + 1, 0);
      std::uint64_t routed = 0;
      for (std::size_t k = 0; k < records.size(); ++k) {
        const int l = labels[k];
        ++counts[static_cast<std::size_t>(l)];
        if (l == 0) continue;
        ++routed;
        cell.mean_selected_flops += static_cast<double>(records[k].F[static_cast<std::size_t>(l - 1)]);
        cell.mean_selected_dice += records[k].S[static_cast<std::size_t>(l - 1)];
      }
      if (routed) {
        cell.mean_selected_flops /= static_cast<double>(routed);
        cell.mean_selected_dice /= static_cast<double>(routed);
      }
      for (auto c : counts) cell.activation.push_back(Rational::make(c, records.size()));
      cells.push_back(std::move(cell));
    }
  }
  return cells;
}

// ---- commands ----

CommandResult cmd_generate(const ExperimentConfig& cfg) {
  const fs::path out = cfg.out_dir;
  const auto hash = config_hash(cfg);
  json manifest{{"config_hash", hash}, {"seed", cfg.seed}, {"splits", json::object()}};
  CommandResult res;
  for (bool eval_split : {false, true}) {
    const std::string split = eval_split ? "eval" : "train";
    const auto sc = cfg.synth(eval_split);
    const auto volumes = synth_generate(sc);
    const fs::path dir = out / "data" / split;
    fs::create_directories(dir);
    json files = json::array();
    for (const auto& v : volumes) {
      save_dvol(dir / (v.case_id + ".dvl"), v);
      files.push_back(v.case_id + ".dvl");
    }
    const auto mix = slice_mix(volumes);
    manifest["splits"][split] = {{"seed", sc.seed},
                                 {"files", files},
                                 {"empty_fraction", mix.empty_fraction},
                                 {"multi_class_fraction", mix.multi_class_fraction}};
    res.summary[split] = {{"volumes", volumes.size()},
                          {"empty_fraction", mix.empty_fraction},
                          {"multi_class_fraction", mix.multi_class_fraction}};
    log("generate: ", split, " ", volumes.size(), " volumes, empty ", mix.empty_fraction, ", multi-class ",
        mix.multi_class_fraction);
  }
  write_json(out / "data" / "manifest.json", manifest);
  res.summary["config_hash"] = hash;
  return res;
}

CommandResult cmd_train_bank(const ExperimentConfig& cfg) {
  const fs::path out = cfg.out_dir;
  const auto hash = config_hash(cfg);
  const auto slices = iter_slices(load_split(out, "train"));
  auto bank = build_bank(cfg.roster(), derive_seed(cfg.seed, seeds::kBankInit), cfg.data.height, cfg.data.width);
  BankTrainConfig tc;
  tc.epochs = cfg.bank.epochs;
  tc.detach_epochs = cfg.detach_schedule();
  tc.batch_size = cfg.bank.batch_size;
  tc.lr = cfg.bank.lr;
  tc.warmup_fraction = cfg.bank.warmup_fraction;
  tc.poly_power = cfg.bank.poly_power;
  tc.weight_decay = cfg.bank.weight_decay;
  tc.augment = {cfg.bank.crop, cfg.bank.crop, cfg.bank.flips, cfg.bank.shift_fraction};
  tc.seed = derive_seed(cfg.seed, seeds::kBankTrain);
  tc.smooth_width = cfg.bank.smooth_width;
  tc.window = cfg.bank.convergence_window;
  tc.tolerance = cfg.bank.convergence_tolerance;
  tc.on_epoch = [&](int epoch, const std::vector<double>& losses) {
    std::ostringstream ss;
    for (double l : losses) {
      if (std::isnan(l)) ss << " frozen";
      else ss << ' ' << l;
    }
    log("train-bank: epoch ", epoch + 1, "/", tc.epochs, " dice losses", ss.str());
  };
  const auto result = train_bank_jointly(bank, slices, tc);
  save_bank(out / "bank", bank, tc, hash);

  json curves{{"config_hash", hash},
              {"epochs", tc.epochs},
              {"detach_epochs", tc.detach_epochs},
              {"steps", result.steps},
              {"bank_loss", result.bank_loss_curve},
              {"candidates", json::array()}};
  for (int i = 0; i < bank.size(); ++i) {
    curves["candidates"].push_back({{"index", i + 1},
                                    {"label", bank.specs[static_cast<std::size_t>(i)].label()},
                                    {"dice_loss", result.loss_curve[static_cast<std::size_t>(i)]},
                                    {"converged", static_cast<bool>(result.converged[static_cast<std::size_t>(i)])}});
  }
  write_json(out / "bank" / "curves.json", curves);
  CommandResult res;
  res.summary = {{"config_hash", hash},
                 {"steps", result.steps},
                 {"flops", bank.flops_table},
                 {"converged", result.all_converged()}};
  if (!result.all_converged()) {
    res.exit_code = kExitNotConverged;
    res.summary["error"] = "one or more candidates did not converge";
  }
  return res;
}

CommandResult cmd_gen_labels(const ExperimentConfig& cfg) {
  const fs::path out = cfg.out_dir;
  const auto hash = config_hash(cfg);
  const auto bank = load_checked_bank(cfg);
  CommandResult res;
  res.summary["config_hash"] = hash;
  for (bool eval_split : {false, true}) {
    const std::string split = eval_split ? "eval" : "train";
    const auto slices = iter_slices(load_split(out, split));
    const auto table = build_label_dataset(bank, slices, cfg.metric);
    fs::create_directories(out / "labels");
    write_label_table(out / "labels" / (eval_split ? "eval_records.csv" : "records.csv"), table);
    const auto st = table_stats(table.records);
    std::vector<std::uint64_t> hist(static_cast<std::size_t>(bank.size()) + 1, 0);
    for (int l : table.labels) ++hist[static_cast<std::size_t>(l)];
    res.summary[split] = {{"rows", table.records.size()},
                          {"label_counts", hist},
                          {"candidate_mean_dice", st.candidate_mean_dice},
                          {"oracle_mean_dice", st.oracle_mean_dice}};
    log("gen-labels: ", split, " ", table.records.size(), " rows, oracle mean dice ", st.oracle_mean_dice);
  }
  write_json(out / "labels" / "summary.json", res.summary);
  return res;
}

namespace {

struct LabelledSlices {
  std::vector<Tensor> images;
  std::vector<int> labels;
};

LabelledSlices labelled_train_slices(const ExperimentConfig& cfg, int n) {
  const fs::path out = cfg.out_dir;
  const auto table = read_label_table(out / "labels" / "records.csv");
  if (!table.records.empty() && static_cast<int>(table.records.front().S.size()) != n) {
    throw DataError(DataError::Kind::kInvalid, "record table has " + std::to_string(table.records.front().S.size()) +
                                                   " candidates, config has " + std::to_string(n));
  }
  auto slices = iter_slices(load_split(out, "train"));
  if (slices.size() != table.records.size()) {
    throw DataError(DataError::Kind::kInvalid, "record table has " + std::to_string(table.records.size()) +
                                                   " rows for " + std::to_string(slices.size()) + " slices");
  }
  LabelledSlices ls;
  for (std::size_t k = 0; k < slices.size(); ++k) {
    const auto& r = table.records[k];
    if (r.case_id != slices[k].case_id || r.slice_index != slices[k].slice_index) {
      throw DataError(DataError::Kind::kInvalid, "record table row " + std::to_string(k + 1) + " is " + r.case_id + ":" +
                                                     std::to_string(r.slice_index) + ", expected " +
                                                     slices[k].case_id + ":" + std::to_string(slices[k].slice_index));
    }
    ls.images.push_back(std::move(slices[k].image));
    ls.labels.push_back(table.labels[k]);
  }
  return ls;
}

}  // namespace

CommandResult cmd_train_decision(const ExperimentConfig& cfg) {
  const fs::path out = cfg.out_dir;
  const auto hash = config_hash(cfg);
  const auto roster = cfg.roster();
  const int n = static_cast<int>(roster.size());
  const auto data = labelled_train_slices(cfg, n);
  const auto cheapest = flops::candidate(roster.front(), cfg.data.height, cfg.data.width);
  const auto seed = derive_seed(cfg.seed, seeds::kDecisionInit);
  auto net = build_decision_net(cfg.decision_spec(), seed, cfg.data.height, cfg.data.width, cheapest);

  DecisionTrainConfig tc;
  tc.epochs = cfg.decision.epochs;
  tc.batch_size = cfg.decision.batch_size;
  tc.lr = cfg.decision.lr;
  tc.warmup_fraction = cfg.decision.warmup_fraction;
  tc.poly_power = cfg.decision.poly_power;
  tc.weight_decay = cfg.decision.weight_decay;
  tc.weights = cfg.decision_weights();
  tc.balanced = cfg.decision.balanced;
  tc.flips = cfg.decision.flips;
  tc.flip_fraction = cfg.decision.flip_fraction;
  tc.seed = derive_seed(cfg.seed, seeds::kDecisionTrain);
  tc.on_epoch = [&](int epoch, double loss, double acc) {
    log("train-decision: epoch ", epoch + 1, "/", tc.epochs, " loss ", loss, " accuracy ", acc);
  };
  const auto result = train_decision(net, data.images, data.labels, tc);
  save_decision_net(out / "decision", net, seed, hash);

  // Upward trend check on the error curve with the bank's smoothing rule.
  std::vector<double> error;
  for (double a : result.accuracy_curve) error.push_back(1.0 - a + 1e-9);
  const bool trend_ok = curve_converged(error, cfg.bank.smooth_width, cfg.bank.convergence_window, 0.05);
  const auto dflops = flops::decision(net.spec(), cfg.data.height, cfg.data.width);
  json curves{{"config_hash", hash},
              {"weights", tc.weights},
              {"balanced", tc.balanced},
              {"loss", result.loss_curve},
              {"accuracy", result.accuracy_curve},
              {"accuracy_trend_ok", trend_ok},
              {"decision_flops", dflops},
              {"cheapest_candidate_flops", cheapest}};
  write_json(out / "decision" / "curves.json", curves);
  CommandResult res;
  res.summary = {{"config_hash", hash},
                 {"weights", tc.weights},
                 {"final_accuracy", result.accuracy_curve.back()},
                 {"accuracy_trend_ok", trend_ok},
                 {"decision_flops", dflops}};
  return res;
}

CommandResult cmd_infer(const ExperimentConfig& cfg, const RoutingOptions& opts) {
  const fs::path out = cfg.out_dir;
  const auto hash = config_hash(cfg);
  const auto dir = out / mode_dir("infer", opts);
  const auto bank = load_checked_bank(cfg);
  std::optional<DecisionNet> net;
  if (!opts.force_decision && !opts.oracle_routing) {
    net.emplace(load_decision_net(out / "decision"));
    if (net->spec().option_count != bank.size() + 1) {
      throw ConfigError("decision net has " + std::to_string(net->spec().option_count) + " outputs, bank has " +
                        std::to_string(bank.size()) + " candidates");
    }
  }
  const auto volumes = load_split(out, "eval");
  const auto result = route_volumes(bank, net ? &*net : nullptr, volumes, opts, cfg.metric);
  fs::create_directories(dir / "pred");
  for (const auto& m : result.masks) save_dvol(dir / "pred" / (m.case_id + ".dvl"), m);
  write_trace(dir / "trace.csv", result.trace);
  int max_runs = 0;
  std::uint64_t probes = 0;
  for (const auto& r : result.trace) {
    max_runs = std::max(max_runs, r.candidate_runs);
    probes += r.probe_runs;
  }
  CommandResult res;
  res.summary = {{"config_hash", hash},
                 {"mode", mode_dir("infer", opts)},
                 {"cases", result.masks.size()},
                 {"slices", result.trace.size()},
                 {"max_candidate_runs_per_slice", max_runs},
                 {"probe_runs", probes}};
  write_json(dir / "summary.json", res.summary);
  log("infer: ", result.trace.size(), " slices into ", dir.string());
  return res;
}

CommandResult cmd_evaluate(const ExperimentConfig& cfg, const RoutingOptions& opts) {
  const fs::path out = cfg.out_dir;
  const auto hash = config_hash(cfg);
  const auto in = out / mode_dir("infer", opts);
  const auto dir = out / mode_dir("eval", opts);
  const auto truths = load_split(out, "eval");
  std::vector<Volume> preds;
  for (const auto& t : truths) preds.push_back(load_dvol(in / "pred" / (t.case_id + ".dvl")));
  const auto trace = read_trace(in / "trace.csv");
  const auto table = roster_flops(cfg);
  auto rep = evaluate_predictions(preds, truths, trace, cfg.region_set(), cfg.data.class_count, table);
  rep.config_hash = hash;
  const auto j = report_json(rep, static_cast<int>(table.size()));
  write_json(dir / "report.json", j);
  write_report_csv(dir / "report.csv", rep);
  CommandResult res;
  res.summary = {{"config_hash", hash},
                 {"mean_foreground_dice", rep.mean_foreground_dice},
                 {"per_case_flops", rep.flops.per_case.value()},
                 {"activation_sum", j["activation_sum"]}};
  log("evaluate: mean foreground dice ", rep.mean_foreground_dice, ", per-case FLOPs ", rep.flops.per_case.value());
  return res;
}

CommandResult cmd_ablate(const ExperimentConfig& cfg) {
  const fs::path out = cfg.out_dir;
  const auto hash = config_hash(cfg);
  const auto table = read_label_table(out / "labels" / "records.csv");
  if (table.records.empty()) throw DataError(DataError::Kind::kInvalid, "empty record table");
  const auto cells = ablation_grid(table.records, cfg.ablate.alphas, cfg.metric.flops_unit);
  const auto st = table_stats(table.records);
  const auto lo = std::min_element(cfg.ablate.alphas.begin(), cfg.ablate.alphas.end()) - cfg.ablate.alphas.begin();
  const auto hi = std::max_element(cfg.ablate.alphas.begin(), cfg.ablate.alphas.end()) - cfg.ablate.alphas.begin();
  const std::size_t na = cfg.ablate.alphas.size();

  json jcells = json::array();
  json dominance = json::object();
  bool all_ok = true;
  bool sums_exact = true;
  for (std::size_t v = 0; v < cells.size() / na; ++v) {
    const auto& a0 = cells[v * na + static_cast<std::size_t>(lo)];
    const auto& a1 = cells[v * na + static_cast<std::size_t>(hi)];
    const bool ok = a1.mean_selected_flops <= a0.mean_selected_flops;
    dominance[a0.variant] = ok;
    all_ok = all_ok && ok;
  }
  std::ofstream csv;
  fs::create_directories(out / "ablate");
  csv.open(out / "ablate" / "ablation.csv", std::ios::trunc);
  csv << "variant,softmax_on_S,softmax_on_F,alpha,mean_selected_flops,mean_selected_dice";
  const int n = static_cast<int>(table.records.front().S.size());
  for (int k = 0; k <= n; ++k) csv << ",act_" << option_name(k);
  csv << '\n';
  char buf[64];
  for (const auto& c : cells) {
    json act = json::array();
    for (const auto& r : c.activation) act.push_back(rational_json(r));
    sums_exact = sums_exact && rational_sum(c.activation) == Rational{1, 1};
    jcells.push_back({{"variant", c.variant},
                      {"softmax_on_S", c.softmax_on_S},
                      {"softmax_on_F", c.softmax_on_F},
                      {"alpha", c.alpha},
                      {"mean_selected_flops", c.mean_selected_flops},
                      {"mean_selected_dice", c.mean_selected_dice},
                      {"activation_ratio", act}});
    std::snprintf(buf, sizeof buf, "%.6f", c.mean_selected_dice);
    csv << c.variant << ',' << c.softmax_on_S << ',' << c.softmax_on_F << ',' << c.alpha << ','
        << static_cast<std::uint64_t>(std::llround(c.mean_selected_flops)) << ',' << buf;
    for (const auto& r : c.activation) csv << ',' << r.num << '/' << r.den;
    csv << '\n';
  }
  if (!csv) throw DataError(DataError::Kind::kIo, "cannot write ablation.csv");
  json baselines = json::array();
  for (int i = 0; i < n; ++i) {
    baselines.push_back({{"candidate", i + 1},
                         {"mean_dice", st.candidate_mean_dice[static_cast<std::size_t>(i)]},
                         {"flops", table.records.front().F[static_cast<std::size_t>(i)]}});
  }
  json j{{"config_hash", hash},
         {"rows", table.records.size()},
         {"alphas", cfg.ablate.alphas},
         {"variants", json::array()},
         {"cells", jcells},
         {"fixed_candidates", baselines},
         {"oracle_mean_dice", st.oracle_mean_dice},
         {"endpoint_dominance", dominance},
         {"activation_sums_exact", sums_exact}};
  for (const auto& v : metric_variants()) j["variants"].push_back(v.name);
  write_json(out / "ablate" / "ablation.json", j);
  CommandResult res;
  res.summary = {{"config_hash", hash},
                 {"cells", cells.size()},
                 {"endpoint_dominance", all_ok},
                 {"activation_sums_exact", sums_exact}};
  return res;
}

CommandResult run_command(const std::string& name, const ExperimentConfig& cfg, const RoutingOptions& opts) {
  const bool routing_flags = opts.force_decision || opts.oracle_routing;
  if (routing_flags && name != "infer" && name != "evaluate") {
    throw ConfigError("--force-decision and --oracle-routing only apply to infer and evaluate");
  }
  if (name == "generate") return cmd_generate(cfg);
  if (name == "train-bank") return cmd_train_bank(cfg);
  if (name == "gen-labels") return cmd_gen_labels(cfg);
  if (name == "train-decision") return cmd_train_decision(cfg);
  if (name == "infer") return cmd_infer(cfg, opts);
  if (name == "evaluate") return cmd_evaluate(cfg, opts);
  if (name == "ablate") return cmd_ablate(cfg);
  throw ConfigError("unknown command '" + name + "'");
}

CommandResult run_command_safely(const std::string& name, const ExperimentConfig& cfg, const RoutingOptions& opts) {
  CommandResult res;
  try {
    return run_command(name, cfg, opts);
  } catch (const ConfigError& e) {
    res = {kExitConfig, {{"error", e.what()}}};
  } catch (const ShapeError& e) {
    res = {kExitConfig, {{"error", e.what()}}};
  } catch (const DataError& e) {
    res = {kExitData, {{"error", e.what()}}};
  } catch (const fs::filesystem_error& e) {
    res = {kExitData, {{"error", e.what()}}};
  }
  return res;
}

}  // namespace dynaroute
