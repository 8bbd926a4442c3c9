// SPDX-License-Identifier: Apache-2.0
// End-to-end acceptance run: one PASS/FAIL line per criterion. Exit status is
// the number of failed criteria.
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dynaroute/choice_metric.hpp"
#include "dynaroute/config.hpp"
#include "dynaroute/flops.hpp"
#include "dynaroute/metrics.hpp"
#include "dynaroute/model_bank.hpp"
#include "dynaroute/ops.hpp"
#include "dynaroute/pipeline.hpp"
#include "gradcheck_cases.hpp"
#include "oracles.hpp"

using namespace dynaroute;
using namespace dynaroute::test_support;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const std::vector<double> kAlphas{0.0, 1e-4, 1e-3, 1e-2, 0.5, 1.0};

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

int failures = 0;
std::map<int, std::string> lines;

// Lines are printed in criterion order once everything has run.
void report(int id, const std::string& title, Outcome& o) {
  lines[id] = "criterion " + std::to_string(id) + " " + (o.pass ? "PASS" : "FAIL") + " " + title + ":" + o.detail.str();
  std::cerr << "  finished criterion " << id << std::endl;
  if (!o.pass) ++failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

json read_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) return json();
  return json::parse(is);
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  if (!fs::exists(root)) return out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream is(e.path(), std::ios::binary);
    out[fs::relative(e.path(), root).generic_string()] = {std::istreambuf_iterator<char>(is), {}};
  }
  return out;
}

int argmax_first(const std::vector<double>& v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

int argmin_first(const std::vector<flops::Count>& v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i) {
    if (v[i] < v[best]) best = i;
  }
  return best;
}

// Every inference mode the toy run exercises.
std::vector<RoutingOptions> routing_modes(int n) {
  std::vector<RoutingOptions> modes{RoutingOptions{}};
  for (int k = 1; k <= n; ++k) modes.push_back(RoutingOptions{k, false});
  modes.push_back(RoutingOptions{std::nullopt, true});
  return modes;
}

struct PipelineRun {
  bool ok = true;
  std::string failure;
  double wall = 0;
  double cpu = 0;
  double toy_wall = 0;
  double toy_cpu = 0;
  json decision_summary;
};

PipelineRun run_pipeline(const ExperimentConfig& cfg) {
  PipelineRun r;
  const auto t0 = std::chrono::steady_clock::now();
  const double c0 = cpu_seconds();
  auto step = [&](const std::string& cmd, const RoutingOptions& o) {
    if (!r.ok) return json();
    const auto res = run_command_safely(cmd, cfg, o);
    if (res.exit_code != kExitOk) {
      r.ok = false;
      r.failure = cmd + " exited " + std::to_string(res.exit_code) + " " + res.summary.dump();
    }
    return res.summary;
  };
  for (const char* cmd : {"generate", "train-bank", "gen-labels"}) step(cmd, {});
  r.decision_summary = step("train-decision", {});
  const int n = static_cast<int>(cfg.roster().size());
  for (const auto& o : routing_modes(n)) {
    // The toy timing covers the dynamic and forced runs; oracle routing and
    // the ablation are diagnostics on top.
    if (o.oracle_routing) {
      r.toy_wall = seconds_since(t0);
      r.toy_cpu = cpu_seconds() - c0;
    }
    step("infer", o);
    step("evaluate", o);
  }
  step("ablate", {});
  r.wall = seconds_since(t0);
  r.cpu = cpu_seconds() - c0;
  return r;
}

bool exact_unit_sum(const std::vector<Rational>& parts) {
  // Sum of num/den == 1 using a common denominator, integers only.
  std::uint64_t den = 1;
  for (const auto& p : parts) den = std::lcm(den, p.den);
  std::uint64_t num = 0;
  for (const auto& p : parts) num += p.num * (den / p.den);
  return num == den;
}

// ---- criteria ----

void criterion_oracle_equivalence() {
  Outcome o;
  std::mt19937_64 rng(1);
  const auto records = random_records(rng, 1000);
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t checked = 0, mismatched = 0;
  for (const auto& v : metric_variants()) {
    for (double a : kAlphas) {
      const MetricConfig cfg{a, v.softmax_on_S, v.softmax_on_F, 1e9};
      for (const auto& r : records) {
        ++checked;
        mismatched += choice_label(r, cfg) != brute_label(r, a, v.softmax_on_S, v.softmax_on_F);
      }
    }
  }
  const double t = seconds_since(t0);
  o.detail << " " << checked << " labels, " << mismatched << " mismatches, " << t << " s";
  o.require(checked == 1000 * 4 * 6, "grid size");
  o.require(mismatched == 0, "exact match");
  o.require(t < 1.0, "< 1 s");
  report(1, "choice metric matches brute force", o);
}

void criterion_endpoints(const std::vector<std::vector<SliceEvalRecord>>& tables) {
  Outcome o;
  std::size_t rows = 0, bad = 0;
  for (const auto& table : tables) {
    for (const auto& r : table) {
      ++rows;
      for (const auto& v : metric_variants()) {
        const int at0 = choice_label(r, {0.0, v.softmax_on_S, v.softmax_on_F, 1e9});
        if (r.pf < 1) {
          bad += at0 != 0;
          bad += choice_label(r, {1.0, v.softmax_on_S, v.softmax_on_F, 1e9}) != 0;
          continue;
        }
        bad += at0 != 1 + argmax_first(r.S);
        if (v.softmax_on_F) bad += choice_label(r, {1.0, v.softmax_on_S, true, 1e9}) != 1 + argmin_first(r.F);
      }
    }
  }
  o.detail << " " << tables.size() << " tables, " << rows << " rows, " << bad << " violations";
  o.require(bad == 0, "exact endpoints");
  report(2, "label rule endpoints", o);
}

void criterion_gradients() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(20240501);
  auto cases = primitive_grad_cases<double>();
  for (auto& c : loss_grad_cases<double>()) cases.push_back(std::move(c));
  double worst = 0;
  std::string worst_name;
  for (const auto& c : cases) {
    for (int i = 0; i < 20; ++i) {
      const double e = c.run(rng, 1e-4);
      if (!(e <= worst)) {
        worst = e;
        worst_name = c.name;
      }
    }
  }
  const double t = seconds_since(t0);
  o.detail << " " << cases.size() << " ops x 20 instances, worst rel err " << worst << " (" << worst_name << "), "
           << t << " s";
  std::set<std::string> names;
  for (const auto& c : cases) names.insert(c.name);
  o.require(names.count("dice_loss") && names.count("weighted_cross_entropy"), "losses covered");
  o.require(worst < 1e-5, "rel err < 1e-5");
  o.require(t < 30.0, "< 30 s");
  report(3, "gradients match central differences (f64)", o);
}

void criterion_flops() {
  Outcome o;
  o.require(flops::conv2d(2, 4, 3, 3, 8, 8) == 9216, "conv closed form 9216");
  {
    FlopCounter c;
    ops::conv2d(Tensor({1, 2, 8, 8}), Tensor({4, 2, 3, 3}), {1, 1});
    o.require(c.count() == 9216, "conv counter 9216");
  }
  o.require(flops::depthwise_conv2d(3, 3, 3, 4, 4) == 2u * 3 * 9 * 16, "depthwise closed form");
  {
    FlopCounter c;
    ops::depthwise_conv2d(Tensor({1, 3, 8, 8}), Tensor({3, 1, 3, 3}), {2, 1});
    o.require(c.count() == 2u * 3 * 9 * 16, "depthwise counter");
  }
  o.require(flops::linear(64, 16, 192) == 2u * 64 * 16 * 192, "linear closed form");
  {
    FlopCounter c;
    ops::matmul(Tensor({64, 16}), Tensor({16, 192}));
    o.require(c.count() == 2u * 64 * 16 * 192, "linear counter");
  }
  o.require(flops::attention_products(64, 192) == 4u * 64 * 64 * 192, "attention closed form");
  {
    FlopCounter c;
    ops::matmul(ops::matmul(Tensor({1, 64, 192}), Tensor({1, 192, 64})), Tensor({1, 64, 192}));
    o.require(c.count() == 4u * 64 * 64 * 192, "attention counter");
  }
  const auto roster = default_roster();
  std::vector<flops::Count> table;
  for (const auto& s : roster) {
    table.push_back(flops::candidate(s, 64, 64));
    SegModel m(s, 1);
    FlopCounter c;
    m.forward(Tensor({1, 4, 64, 64}));
    o.require(c.count() == table.back(), "counted forward == analytic for " + s.label());
  }
  bool increasing = true;
  for (std::size_t i = 1; i < table.size(); ++i) increasing = increasing && table[i - 1] < table[i];
  o.require(increasing, "strictly increasing roster");
  o.detail << " roster F @64x64 =";
  for (auto f : table) o.detail << " " << f;
  report(4, "FLOPs counter closed forms and roster monotonicity", o);
}

void criterion_metric_oracles() {
  Outcome o;
  const std::vector<std::uint8_t> a{1, 1, 0, 0}, b{0, 0, 1, 1}, e(4, 0);
  o.require(dice_score(a, a, {1}) == 1.0, "identical -> 1");
  o.require(dice_score(e, e, {1}) == 1.0, "both empty -> 1");
  o.require(dice_score(a, b, {1}) == 0.0, "disjoint -> 0");
  const std::vector<std::uint8_t> p{1, 1, 1, 1, 0, 0, 0, 0}, t{0, 0, 1, 1, 1, 1, 0, 0};
  o.require(dice_score(p, t, {1}) == 0.5, "|P|=|T|=4, overlap 2 -> 0.5");
  std::mt19937_64 rng(2718);
  int pairs = 0, mismatch = 0, identical_bad = 0;
  for (int i = 0; i < 50; ++i) {
    const int h = 4 + static_cast<int>(rng() % 29), w = 4 + static_cast<int>(rng() % 29);
    const auto mp = random_blob_mask(rng, h, w, 4), mt = random_blob_mask(rng, h, w, 4);
    ++pairs;
    for (const Region& r : {Region{1, 2, 3}, Region{2}}) {
      const auto got = hd95(mp, mt, {1, h, w}, r);
      const auto want = brute_hd95(mp, mt, h, w, r);
      mismatch += got.defined != want.defined || (want.defined && got.value != want.value);
      const auto self = hd95(mp, mp, {1, h, w}, r);
      identical_bad += !self.defined || self.value != 0.0;
    }
  }
  o.detail << " " << pairs << " random mask pairs, " << mismatch << " hd95 mismatches, " << identical_bad
           << " nonzero self-distances";
  o.require(mismatch == 0, "hd95 == brute force");
  o.require(identical_bad == 0, "identical -> 0");
  report(5, "Dice and HD95 oracles", o);
}

double mean_selected(const std::vector<SliceEvalRecord>& recs, const MetricConfig& cfg) {
  double total = 0;
  std::size_t count = 0;
  for (const auto& r : recs) {
    const int l = choice_label(r, cfg);
    if (l == 0) continue;
    total += static_cast<double>(r.F[static_cast<std::size_t>(l - 1)]);
    ++count;
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

void criterion_dominance(const std::vector<std::pair<std::string, std::vector<SliceEvalRecord>>>& tables) {
  Outcome o;
  for (const auto& [name, recs] : tables) {
    const auto st = table_stats(recs);
    bool dom = true;
    for (double m : st.candidate_mean_dice) dom = dom && st.oracle_mean_dice >= m;
    o.detail << " " << name << ": oracle " << st.oracle_mean_dice << " vs best fixed "
             << *std::max_element(st.candidate_mean_dice.begin(), st.candidate_mean_dice.end()) << ";";
    o.require(dom, name + " max-mean dominance");
    for (const auto& v : metric_variants()) {
      const double f0 = mean_selected(recs, {0.0, v.softmax_on_S, v.softmax_on_F, 1e9});
      const double f1 = mean_selected(recs, {1.0, v.softmax_on_S, v.softmax_on_F, 1e9});
      o.require(f1 <= f0, name + " " + v.name + " F(alpha=1) <= F(alpha=0)");
    }
  }
  report(6, "routing dominance on generated record tables", o);
}

void criterion_toy(const fs::path& out, const PipelineRun& run, int n) {
  Outcome o;
  o.require(run.ok, "pipeline ran: " + run.failure);
  const double acc = run.decision_summary.value("final_accuracy", 0.0);
  std::vector<json> forced;
  std::vector<double> dice;
  for (int k = 1; k <= n; ++k) {
    forced.push_back(read_json(out / ("eval-force-" + std::to_string(k)) / "report.json"));
    dice.push_back(forced.back().value("mean_foreground_dice", 0.0));
  }
  const auto dyn = read_json(out / "eval" / "report.json");
  const double dyn_dice = dyn.value("mean_foreground_dice", 0.0);
  const double dyn_case = dyn.is_object() ? dyn["flops"]["per_case"]["value"].get<double>() : 0.0;
  const double big_case = forced.back().is_object() ? forced.back()["flops"]["per_case"]["value"].get<double>() : 0.0;
  o.detail << " candidate dice";
  for (double d : dice) o.detail << " " << d;
  o.detail << "; decision acc " << acc << "; dynamic dice " << dyn_dice << " vs largest " << dice.back()
           << "; per-case FLOPs " << dyn_case << " = " << (big_case > 0 ? dyn_case / big_case : 0.0)
           << " x largest; toy cpu " << run.toy_cpu << " s, wall " << run.toy_wall << " s";
  for (int k = 0; k < n; ++k) o.require(dice[k] >= 0.80, "candidate " + std::to_string(k + 1) + " dice >= 0.80");
  o.require(acc >= 0.90, "decision accuracy >= 0.90");
  o.require(big_case > 0 && dyn_case <= 0.6 * big_case, "per-case FLOPs <= 0.6 x largest");
  o.require(dyn_dice >= dice.back() - 0.02, "dice >= largest - 0.02");
  o.require(run.toy_cpu <= 15 * 60.0, "<= 15 min CPU");
  report(7, "toy end-to-end", o);
}

void criterion_one_pass(const fs::path& out, const ExperimentConfig& cfg) {
  Outcome o;
  const int n = static_cast<int>(cfg.roster().size());
  std::size_t rows = 0, over = 0;
  for (const auto& m : routing_modes(n)) {
    const auto trace = read_trace(out / mode_dir("infer", m) / "trace.csv");
    for (const auto& r : trace) {
      ++rows;
      over += r.candidate_runs > 1 || (r.decision == 0 && r.candidate_runs != 0) ||
              (r.decision > 0 && r.candidate_runs != 1);
      if (!m.oracle_routing) over += r.probe_runs != 0;
    }
  }
  auto bank = load_bank(out / "bank");
  auto vols = load_split(out, "eval");
  Volume bg = vols.front();
  bg.case_id = "all_background";
  std::fill(bg.labels.begin(), bg.labels.end(), 0);
  RoutingOptions oracle;
  oracle.oracle_routing = true;
  const auto routed = route_volumes(bank, nullptr, {bg}, oracle, cfg.metric);
  flops::Count executed = 0;
  int runs = 0;
  for (const auto& r : routed.trace) {
    executed += r.executed_flops;
    runs += r.candidate_runs + r.probe_runs;
  }
  const bool empty_mask = std::all_of(routed.masks[0].labels.begin(), routed.masks[0].labels.end(),
                                      [](std::uint8_t v) { return v == 0; });
  o.detail << " " << rows << " traced slices over " << routing_modes(n).size() << " modes, " << over
           << " counter violations; all-background volume: " << executed << " candidate FLOPs, " << runs
           << " candidate passes";
  o.require(rows > 0 && over == 0, "<= 1 candidate run per slice");
  o.require(executed == 0 && runs == 0 && empty_mask, "all-background oracle costs nothing");
  report(8, "one-pass and skip guarantees", o);
}

void criterion_determinism(const fs::path& a, const fs::path& b, const PipelineRun& second) {
  Outcome o;
  o.require(second.ok, "second run: " + second.failure);
  const auto ta = tree_bytes(a), tb = tree_bytes(b);
  std::size_t differ = 0, ckpt = 0, traces = 0, reports = 0;
  std::string first_diff;
  for (const auto& [name, bytes] : ta) {
    const auto it = tb.find(name);
    if (it == tb.end() || it->second != bytes) {
      if (first_diff.empty()) first_diff = name;
      ++differ;
    }
    ckpt += name.ends_with(".dwt");
    traces += name.ends_with("trace.csv");
    reports += name.ends_with("report.json");
  }
  for (const auto& [name, bytes] : tb) differ += !ta.count(name);
  o.detail << " " << ta.size() << " files (" << ckpt << " checkpoints, " << traces << " traces, " << reports
           << " reports), " << differ << " differ" << (first_diff.empty() ? "" : ", first " + first_diff)
           << "; second run " << second.wall << " s";
  o.require(ckpt > 0 && traces > 0 && reports > 0, "artifacts present");
  o.require(differ == 0, "bitwise identical");
  report(9, "determinism across two full runs", o);
}

void criterion_ablation(const fs::path& out, const ExperimentConfig& cfg,
                        const std::vector<SliceEvalRecord>& records) {
  Outcome o;
  const auto j = read_json(out / "ablate" / "ablation.json");
  std::set<std::string> variants;
  std::size_t cells_json = 0;
  if (j.is_object() && j.contains("cells")) {
    for (const auto& c : j["cells"]) {
      variants.insert(c["variant"].get<std::string>());
      ++cells_json;
    }
  }
  o.require(variants.size() == 4 && cells_json == 4 * cfg.ablate.alphas.size(), "four-variant table emitted");
  o.require(fs::exists(out / "ablate" / "ablation.csv"), "csv emitted");
  const auto grid = ablation_grid(records, cfg.ablate.alphas, cfg.metric.flops_unit);
  const double lo = *std::min_element(cfg.ablate.alphas.begin(), cfg.ablate.alphas.end());
  const double hi = *std::max_element(cfg.ablate.alphas.begin(), cfg.ablate.alphas.end());
  std::map<std::string, double> f_lo, f_hi;
  bool sums = true;
  for (const auto& c : grid) {
    if (c.alpha == lo) f_lo[c.variant] = c.mean_selected_flops;
    if (c.alpha == hi) f_hi[c.variant] = c.mean_selected_flops;
    sums = sums && exact_unit_sum(c.activation);
  }
  for (const auto& [v, f] : f_lo) {
    o.detail << " " << v << ": " << f << " -> " << f_hi[v] << ";";
    o.require(f_hi[v] <= f, v + " endpoint FLOPs non-increasing");
  }
  for (const auto& m : routing_modes(static_cast<int>(cfg.roster().size()))) {
    const auto trace = read_trace(out / mode_dir("infer", m) / "trace.csv");
    sums = sums && exact_unit_sum(activation_ratio(trace, static_cast<int>(cfg.roster().size())));
  }
  o.detail << " activation sums exact: " << (sums ? "yes" : "no");
  o.require(sums, "activation ratios sum to exactly 1");
  report(10, "ablation grid", o);
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "dynaroute_acceptance";
  fs::remove_all(work);
  auto cfg_a = default_config();
  cfg_a.out_dir = (work / "run_a").string();
  auto cfg_b = cfg_a;
  cfg_b.out_dir = (work / "run_b").string();
  std::cout << "config hash " << config_hash(cfg_a) << ", work dir " << work.string() << std::endl;

  criterion_oracle_equivalence();
  criterion_gradients();
  criterion_flops();
  criterion_metric_oracles();

  const auto first = run_pipeline(cfg_a);
  std::cout << "first pipeline run: " << first.wall << " s wall, " << first.cpu << " s cpu" << std::endl;
  const fs::path out = cfg_a.out_dir;
  std::vector<SliceEvalRecord> train_records, eval_records;
  if (first.ok) {
    train_records = read_label_table(out / "labels" / "records.csv").records;
    eval_records = read_label_table(out / "labels" / "eval_records.csv").records;
  }
  std::mt19937_64 rng(1);
  criterion_endpoints({random_records(rng, 1000), train_records, eval_records});
  criterion_dominance({{"train", train_records}, {"eval", eval_records}});
  const int n = static_cast<int>(cfg_a.roster().size());
  criterion_toy(out, first, n);
  if (first.ok) {
    criterion_one_pass(out, cfg_a);
  } else {
    Outcome o;
    o.require(false, "no pipeline output");
    report(8, "one-pass and skip guarantees", o);
  }
  const auto second = run_pipeline(cfg_b);
  criterion_determinism(out, cfg_b.out_dir, second);
  criterion_ablation(out, cfg_a, train_records);

  for (const auto& [id, line] : lines) std::cout << line << std::endl;
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures;
}
