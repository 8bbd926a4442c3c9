// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <json.hpp>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dynaroute/config.hpp"
#include "dynaroute/data.hpp"
#include "dynaroute/decision_net.hpp"
#include "dynaroute/metrics.hpp"
#include "dynaroute/model_bank.hpp"

namespace dynaroute {

/// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNotConverged = 4;

struct RoutingOptions {
  /// Route every slice to this option (0 skips everything).
  std::optional<int> force_decision;
  /// Ground-truth routing: slices with no foreground skip without running
  /// anything; the rest probe every candidate and take the choice-metric label.
  bool oracle_routing = false;
};

struct CommandResult {
  int exit_code = kExitOk;
  nlohmann::json summary;
};

/// Progress lines from the commands go here; null (the default) silences them.
void set_log_stream(std::ostream* os);

/// Output subdirectory for an inference mode: "infer", "infer-force-K", "infer-oracle"
/// (and the same with "eval").
std::string mode_dir(const std::string& base, const RoutingOptions& opts);

std::vector<Volume> load_split(const std::filesystem::path& out_dir, const std::string& split);

struct InferenceOutput {
  /// Label-only volumes, one per input volume.
  std::vector<Volume> masks;
  RoutingTrace trace;
};

/// One-pass routing over every slice of every volume. `net` may be null when
/// the decision is forced. Oracle routing needs volumes with labels.
InferenceOutput route_volumes(const ModelBank& bank, const DecisionNet* net, const std::vector<Volume>& volumes,
                              const RoutingOptions& opts, const MetricConfig& metric);

void write_trace(const std::filesystem::path& path, const RoutingTrace& trace);
RoutingTrace read_trace(const std::filesystem::path& path);

MetricsReport evaluate_predictions(const std::vector<Volume>& predictions, const std::vector<Volume>& truths,
                                   const RoutingTrace& trace, const std::vector<NamedRegion>& regions,
                                   int class_count, std::span<const flops::Count> bank_flops);

nlohmann::json report_json(const MetricsReport& report, int candidate_count);

/// Per-candidate and oracle statistics over a record table.
struct TableStats {
  /// Mean over slices of S_i, per candidate.
  std::vector<double> candidate_mean_dice;
  /// Mean over slices of max_i S_i.
  double oracle_mean_dice = 0;
};
TableStats table_stats(const std::vector<SliceEvalRecord>& records);

struct AblationCell {
  std::string variant;
  bool softmax_on_S = false;
  bool softmax_on_F = false;
  double alpha = 0;
  /// Over slices with foreground; skipped slices are identical across cells.
  double mean_selected_flops = 0;
  double mean_selected_dice = 0;
  std::vector<Rational> activation;
};
std::vector<AblationCell> ablation_grid(const std::vector<SliceEvalRecord>& records,
                                        const std::vector<double>& alphas, double flops_unit);

CommandResult cmd_generate(const ExperimentConfig& cfg);
CommandResult cmd_train_bank(const ExperimentConfig& cfg);
CommandResult cmd_gen_labels(const ExperimentConfig& cfg);
CommandResult cmd_train_decision(const ExperimentConfig& cfg);
CommandResult cmd_infer(const ExperimentConfig& cfg, const RoutingOptions& opts);
CommandResult cmd_evaluate(const ExperimentConfig& cfg, const RoutingOptions& opts);
CommandResult cmd_ablate(const ExperimentConfig& cfg);

/// Dispatches by command name; throws ConfigError for an unknown one.
CommandResult run_command(const std::string& name, const ExperimentConfig& cfg, const RoutingOptions& opts);

/// Runs a command and maps ConfigError / ShapeError to 2, DataError to 3.
/// The error message lands in summary["error"].
CommandResult run_command_safely(const std::string& name, const ExperimentConfig& cfg, const RoutingOptions& opts);

}  // namespace dynaroute
