// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dynaroute/data.hpp"
#include "dynaroute/flops.hpp"

namespace dynaroute {

struct ModelBank;

struct SliceEvalRecord {
  std::string case_id;
  int slice_index = 0;
  std::int64_t pf = 0;
  /// Per-candidate slice Dice in [0, 1].
  std::vector<double> S;
  /// Per-candidate FLOPs, positive.
  std::vector<flops::Count> F;
};

/// label = 0 if pf < 1, else 1 + argmax_i ((1 - alpha) s_i + alpha f_i) with
/// s = softmax(S) or S, f = softmax(1/F') or 1/F', F' = F / flops_unit.
/// Ties go to the lower (cheaper) index.
struct MetricConfig {
  double alpha = 0.001;
  bool softmax_on_S = false;
  bool softmax_on_F = true;
  /// FLOPs are expressed in this unit before inversion.
  double flops_unit = 1e9;
};

struct MetricVariant {
  std::string name;
  bool softmax_on_S;
  bool softmax_on_F;
};

/// "w/ S & F", "w/o F", "w/o S", "w/o S & F".
std::vector<MetricVariant> metric_variants();

void validate_record(const SliceEvalRecord& r);

/// The per-candidate combined scores the label is the argmax of.
std::vector<double> choice_scores(const SliceEvalRecord& r, const MetricConfig& cfg);
int choice_label(const SliceEvalRecord& r, const MetricConfig& cfg);
std::vector<int> oracle_route(const std::vector<SliceEvalRecord>& records, const MetricConfig& cfg);

/// Mean Dice over classes 1..C-1 for one slice, empty-empty classes count 1.
double slice_dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth, int class_count);

struct LabelTable {
  std::vector<SliceEvalRecord> records;
  std::vector<int> labels;
};

/// Runs every candidate on every slice. Throws ConfigError for an untrained bank.
LabelTable build_label_dataset(const ModelBank& bank, const std::vector<SliceItem>& slices,
                               const MetricConfig& cfg);

/// CSV header: case_id,slice,pf,s1..sn,f1..fn,label
void write_label_table(const std::filesystem::path& path, const LabelTable& table);
LabelTable read_label_table(const std::filesystem::path& path);

}  // namespace dynaroute
