// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include "dynaroute/config.hpp"
#include "dynaroute/errors.hpp"
#include "dynaroute/flops.hpp"
#include "dynaroute/pipeline.hpp"

using namespace dynaroute;
namespace fs = std::filesystem;

namespace {

ExperimentConfig micro_config(const fs::path& out) {
  auto c = default_config();
  c.out_dir = out.string();
  c.data.train_volumes = 3;
  c.data.eval_volumes = 2;
  c.data.depth = 8;
  c.data.height = c.data.width = 16;
  c.data.margin = 2;
  c.data.min_radius = 2;
  c.data.max_radius_min = 3;
  c.data.max_radius_max = 5;
  c.bank.epochs = 2;
  c.bank.crop = 16;
  c.bank.convergence_tolerance = 1.0;
  c.decision.epochs = 2;
  c.ablate.alphas = {0.0, 1.0};
  return c;
}

std::vector<Volume> micro_volumes(int count, std::uint64_t seed = 3) {
  auto sc = micro_config("unused").synth(true);
  sc.volume_count = count;
  sc.seed = seed;
  return synth_generate(sc);
}

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("dynaroute_pipeline_" + name);
  fs::remove_all(d);
  return d;
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream is(e.path(), std::ios::binary);
    out[fs::relative(e.path(), root).string()] = {std::istreambuf_iterator<char>(is), {}};
  }
  return out;
}

}  // namespace

TEST(Config, RoundTripAndHash) {
  const auto c = default_config();
  const auto j = config_to_json(c);
  EXPECT_EQ(config_to_json(config_from_json(j)), j);
  EXPECT_EQ(config_hash(c), "4ecd5d4acde07f78");
  auto moved = c;
  moved.out_dir = "elsewhere";
  EXPECT_EQ(config_hash(moved), config_hash(c));
  auto reseeded = c;
  reseeded.seed = 7;
  EXPECT_NE(config_hash(reseeded), config_hash(c));
  EXPECT_NO_THROW(validate_config(c));
}

TEST(Config, PartialJsonKeepsDefaults) {
  const auto c = config_from_json(nlohmann::json::parse(R"({"bank": {"epochs": 3}, "metric": {"alpha": 0.5}})"));
  EXPECT_EQ(c.bank.epochs, 3);
  EXPECT_DOUBLE_EQ(c.metric.alpha, 0.5);
  EXPECT_EQ(c.decision.epochs, default_config().decision.epochs);
  EXPECT_EQ(c.roster().size(), 4u);
}

TEST(Config, Rejections) {
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"bank": {"epoch": 3}})")), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"bank": {"epochs": "3"}})")), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"bank": {"epochs": 2.5}})")), ConfigError);
  auto c = default_config();
  c.bank.epochs = 0;
  EXPECT_THROW(validate_config(c), ConfigError);
  c = default_config();
  c.metric.alpha = 1.5;
  EXPECT_THROW(validate_config(c), ConfigError);
  c = default_config();
  c.bank.crop = 30;
  EXPECT_THROW(validate_config(c), ConfigError);
  c = default_config();
  c.decision.weights = {1, 1, 0, 1, 1};
  EXPECT_THROW(validate_config(c), ConfigError);
  EXPECT_THROW(load_config(fresh_dir("missing") / "nope.json"), ConfigError);
}

TEST(Trace, CsvRoundTrip) {
  const RoutingTrace t{{"a", 0, 0, 10, 0, 0, 0}, {"a", 1, 3, 10, 777, 1, 0}, {"b", 0, 2, 0, 55, 1, 3}};
  const auto p = fresh_dir("trace") / "trace.csv";
  write_trace(p, t);
  const auto back = read_trace(p);
  ASSERT_EQ(back.size(), t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    EXPECT_EQ(back[i].case_id, t[i].case_id);
    EXPECT_EQ(back[i].slice_index, t[i].slice_index);
    EXPECT_EQ(back[i].decision, t[i].decision);
    EXPECT_EQ(back[i].decision_flops, t[i].decision_flops);
    EXPECT_EQ(back[i].executed_flops, t[i].executed_flops);
    EXPECT_EQ(back[i].candidate_runs, t[i].candidate_runs);
    EXPECT_EQ(back[i].probe_runs, t[i].probe_runs);
  }
}

TEST(Routing, ForcedMatchesTheCandidateAlone) {
  const auto bank = build_bank(default_roster(), 5, 16, 16);
  const auto vols = micro_volumes(1);
  for (int k = 1; k <= bank.size(); ++k) {
    RoutingOptions o;
    o.force_decision = k;
    const auto out = route_volumes(bank, nullptr, vols, o, MetricConfig{});
    ASSERT_EQ(out.trace.size(), static_cast<std::size_t>(vols[0].depth));
    for (const auto& item : iter_slices(vols)) {
      const auto want = argmax_mask(forward_candidate(bank, k, item.image));
      const auto off = static_cast<std::ptrdiff_t>(item.slice_index * vols[0].slice_pixels());
      EXPECT_TRUE(std::equal(want.begin(), want.end(), out.masks[0].labels.begin() + off));
    }
    for (const auto& r : out.trace) {
      EXPECT_EQ(r.decision, k);
      EXPECT_EQ(r.candidate_runs, 1);
      EXPECT_EQ(r.decision_flops, 0u);
      EXPECT_EQ(r.executed_flops, bank.flops_table[static_cast<std::size_t>(k - 1)]);
    }
  }
  RoutingOptions skip;
  skip.force_decision = 0;
  const auto none = route_volumes(bank, nullptr, vols, skip, MetricConfig{});
  for (auto l : none.masks[0].labels) EXPECT_EQ(l, 0);
  for (const auto& r : none.trace) EXPECT_EQ(r.candidate_runs + r.executed_flops, 0u);
  skip.force_decision = 5;
  EXPECT_THROW(route_volumes(bank, nullptr, vols, skip, MetricConfig{}), ConfigError);
}

TEST(Routing, DecisionNetRunsAtMostOneCandidate) {
  const auto bank = build_bank(default_roster(), 5, 16, 16);
  const DecisionNet net(DecisionNetSpec{}, 9);
  const auto vols = micro_volumes(2);
  const auto out = route_volumes(bank, &net, vols, RoutingOptions{}, MetricConfig{});
  for (const auto& r : out.trace) {
    EXPECT_LE(r.candidate_runs, 1);
    EXPECT_EQ(r.candidate_runs, r.decision > 0 ? 1 : 0);
    EXPECT_EQ(r.probe_runs, 0);
    EXPECT_EQ(r.decision_flops, flops::decision(net.spec(), 16, 16));
  }
  const DecisionNet small(DecisionNetSpec{{4, 8, 16, 32}, 4, 3}, 9);
  EXPECT_THROW(route_volumes(bank, &small, vols, RoutingOptions{}, MetricConfig{}), ConfigError);
  EXPECT_THROW(route_volumes(bank, nullptr, vols, RoutingOptions{}, MetricConfig{}), ConfigError);
}

TEST(Routing, OracleSkipsAllBackgroundVolumes) {
  const auto bank = build_bank(default_roster(), 5, 16, 16);
  auto vols = micro_volumes(1);
  std::fill(vols[0].labels.begin(), vols[0].labels.end(), 0);
  RoutingOptions o;
  o.oracle_routing = true;
  const auto out = route_volumes(bank, nullptr, vols, o, MetricConfig{});
  for (const auto& r : out.trace) {
    EXPECT_EQ(r.decision, 0);
    EXPECT_EQ(r.executed_flops, 0u);
    EXPECT_EQ(r.candidate_runs + r.probe_runs, 0);
  }
  for (auto l : out.masks[0].labels) EXPECT_EQ(l, 0);
  vols[0].labels.clear();
  EXPECT_THROW(route_volumes(bank, nullptr, vols, o, MetricConfig{}), ConfigError);
}

TEST(Routing, OracleProbesEveryCandidateOnForegroundSlices) {
  const auto bank = build_bank(default_roster(), 5, 16, 16);
  const auto vols = micro_volumes(1);
  RoutingOptions o;
  o.oracle_routing = true;
  const auto out = route_volumes(bank, nullptr, vols, o, MetricConfig{});
  const auto items = iter_slices(vols);
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& r = out.trace[i];
    if (foreground_count(items[i].label) == 0) {
      EXPECT_EQ(r.decision, 0);
      continue;
    }
    EXPECT_GE(r.decision, 1);
    EXPECT_EQ(r.candidate_runs, 1);
    EXPECT_EQ(r.probe_runs, bank.size() - 1);
  }
}

TEST(Evaluate, PerfectPredictionsAndConstantRoute) {
  const auto vols = micro_volumes(2);
  std::vector<Volume> preds;
  RoutingTrace trace;
  const std::vector<flops::Count> F{100, 200, 300, 400};
  for (const auto& v : vols) {
    Volume m = v;
    m.voxels.clear();
    m.channels = 0;
    preds.push_back(m);
    for (int z = 0; z < v.depth; ++z) trace.push_back({v.case_id, z, 3, 7, 300, 1, 0});
  }
  const auto rep = evaluate_predictions(preds, vols, trace, default_regions(4), 4, F);
  EXPECT_DOUBLE_EQ(rep.mean_foreground_dice, 1.0);
  for (const auto& c : rep.cases) {
    for (double d : c.region_dice) EXPECT_DOUBLE_EQ(d, 1.0);
    for (const auto& h : c.region_hd95) {
      EXPECT_TRUE(h.defined);
      EXPECT_EQ(h.value, 0.0);
    }
  }
  EXPECT_DOUBLE_EQ(rep.flops.per_inference.value(), 300.0);
  EXPECT_DOUBLE_EQ(rep.flops.per_slice.value(), 307.0);
  EXPECT_EQ(rep.flops.executed_total, 300u * trace.size());
  const auto j = report_json(rep, 4);
  EXPECT_EQ(j["activation_ratio"].size(), 5u);
  preds.pop_back();
  EXPECT_THROW(evaluate_predictions(preds, vols, trace, default_regions(4), 4, F), DataError);
}

TEST(Commands, MissingInputsAreDataErrors) {
  const auto cfg = micro_config(fresh_dir("missing_inputs"));
  EXPECT_EQ(run_command_safely("train-bank", cfg, {}).exit_code, kExitData);
  EXPECT_EQ(run_command_safely("no-such-command", cfg, {}).exit_code, kExitConfig);
}

TEST(Commands, MicroPipelineIsBitwiseDeterministic) {
  std::map<std::string, std::string> first;
  for (int run = 0; run < 2; ++run) {
    const auto dir = fresh_dir("micro_" + std::to_string(run));
    const auto cfg = micro_config(dir);
    for (const char* cmd : {"generate", "train-bank", "gen-labels", "train-decision", "infer", "evaluate", "ablate"}) {
      const auto res = run_command_safely(cmd, cfg, {});
      ASSERT_EQ(res.exit_code, kExitOk) << cmd << ": " << res.summary.dump();
    }
    RoutingOptions forced;
    forced.force_decision = 4;
    ASSERT_EQ(run_command_safely("infer", cfg, forced).exit_code, kExitOk);
    ASSERT_EQ(run_command_safely("evaluate", cfg, forced).exit_code, kExitOk);
    auto bytes = tree_bytes(dir);
    for (const char* f : {"bank/bank.json", "decision/decision.dwt", "labels/records.csv", "infer/trace.csv",
                          "eval/report.json", "eval-force-4/report.json", "ablate/ablation.json"}) {
      EXPECT_TRUE(bytes.count(f)) << f;
    }
    if (run == 0) {
      first = std::move(bytes);
    } else {
      ASSERT_EQ(bytes.size(), first.size());
      for (const auto& [name, content] : first) EXPECT_TRUE(bytes.at(name) == content) << name;
    }
  }
}
