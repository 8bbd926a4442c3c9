// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <string>
#include <vector>

#include "dynaroute/choice_metric.hpp"
#include "dynaroute/data.hpp"
#include "dynaroute/metrics.hpp"
#include "dynaroute/specs.hpp"

namespace dynaroute {

struct DataParams {
  int train_volumes = 40;
  int eval_volumes = 10;
  int channels = 4;
  int depth = 16;
  int height = 64;
  int width = 64;
  int class_count = 4;
  int margin = 3;
  int min_lesions = 1;
  int max_lesions = 2;
  double min_radius = 4.0;
  double max_radius_min = 10.0;
  double max_radius_max = 16.0;
  std::vector<double> band_irregularity{0.30, 0.18, 0.08};
  double noise_std = 0.12;
};

struct BankParams {
  /// index, input_channels and class_count are filled from position and data.
  std::vector<CandidateSpec> candidates;
  int epochs = 16;
  /// Empty: small candidates (the first half of the roster) detach at 3/4 of
  /// the epochs, the rest at the end.
  std::vector<int> detach_epochs;
  int batch_size = 8;
  double lr = 1e-2;
  double warmup_fraction = 0.05;
  double poly_power = 0.9;
  double weight_decay = 1e-5;
  int crop = 32;
  bool flips = true;
  double shift_fraction = 0.1;
  int smooth_width = 3;
  int convergence_window = 10;
  double convergence_tolerance = 0.02;
};

struct DecisionParams {
  std::vector<int> widths{4, 8, 16, 32};
  int epochs = 150;
  int batch_size = 32;
  double lr = 1e-2;
  double warmup_fraction = 0.05;
  double poly_power = 0.9;
  double weight_decay = 1e-5;
  /// Empty: skip 0.5, candidate i 1 + 0.1 (i - 1).
  std::vector<double> weights;
  bool balanced = false;
  bool flips = true;
  /// Flips stop after this fraction of the epochs.
  double flip_fraction = 0.5;
};

struct AblateParams {
  std::vector<double> alphas{0.0, 1e-4, 1e-3, 1e-2, 0.5, 1.0};
};

struct ExperimentConfig {
  std::uint64_t seed = 2024;
  std::string out_dir = "run";
  DataParams data;
  BankParams bank;
  MetricConfig metric;
  DecisionParams decision;
  AblateParams ablate;
  /// Empty: default_regions(class_count).
  std::vector<NamedRegion> regions;

  std::vector<CandidateSpec> roster() const;
  std::vector<int> detach_schedule() const;
  std::vector<double> decision_weights() const;
  std::vector<NamedRegion> region_set() const;
  SynthConfig synth(bool eval_split) const;
  DecisionNetSpec decision_spec() const;
};

ExperimentConfig default_config();

/// Fully resolved config; every field is present.
nlohmann::json config_to_json(const ExperimentConfig& cfg);

/// Fields absent from `j` keep their defaults; unknown keys and wrong types
/// raise ConfigError.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Throws ConfigError on any invalid field.
void validate_config(const ExperimentConfig& cfg);

/// FNV-1a 64 of the canonical resolved JSON with out_dir removed, as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

/// Named sub-streams of the master seed.
namespace seeds {
inline constexpr const char* kTrainData = "data/train";
inline constexpr const char* kEvalData = "data/eval";
inline constexpr const char* kBankInit = "bank/init";
inline constexpr const char* kBankTrain = "bank/train";
inline constexpr const char* kDecisionInit = "decision/init";
inline constexpr const char* kDecisionTrain = "decision/train";
}  // namespace seeds

}  // namespace dynaroute
