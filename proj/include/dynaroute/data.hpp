// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dynaroute/rng.hpp"
#include "dynaroute/tensor.hpp"

namespace dynaroute {

/// Multi-modal volume, voxels stored modality-major then depth, row, column.
/// A volume with zero channels carries labels only (predicted masks).
struct Volume {
  std::string case_id;
  int channels = 0;
  int depth = 0;
  int height = 0;
  int width = 0;
  std::vector<float> voxels;
  std::vector<std::uint8_t> labels;

  bool has_labels() const { return !labels.empty(); }
  std::size_t slice_pixels() const { return static_cast<std::size_t>(height) * width; }
  float voxel(int c, int z, int y, int x) const {
    return voxels[((static_cast<std::size_t>(c) * depth + z) * height + y) * width + x];
  }
  std::uint8_t label(int z, int y, int x) const {
    return labels[(static_cast<std::size_t>(z) * height + y) * width + x];
  }
  /// Throws DataError when sizes disagree with the dimensions.
  void validate() const;
};

struct SynthConfig {
  std::uint64_t seed = 7;
  int volume_count = 40;
  int channels = 4;
  int depth = 16;
  int height = 64;
  int width = 64;
  int class_count = 4;
  /// Leading and trailing all-background slices.
  int margin = 3;
  int min_lesions = 1;
  int max_lesions = 2;
  double min_radius = 4.0;
  double max_radius_min = 10.0;
  double max_radius_max = 16.0;
  /// Boundary harmonic amplitude for the outer, middle and central thirds of
  /// a lesion's extent along depth. Edge slices are the irregular ones.
  std::vector<double> band_irregularity{0.30, 0.18, 0.08};
  double noise_std = 0.12;
  std::string id_prefix = "case";

  void validate() const;
};

/// Deterministic for a given config. Each volume draws from its own stream
/// derived from (seed, index).
std::vector<Volume> synth_generate(const SynthConfig& cfg);

/// Fraction of slices with no foreground and with two or more lesion classes.
struct SliceMix {
  double empty_fraction = 0;
  double multi_class_fraction = 0;
};
SliceMix slice_mix(const std::vector<Volume>& volumes);

void save_dvol(const std::filesystem::path& path, const Volume& volume);
Volume load_dvol(const std::filesystem::path& path);

struct SliceItem {
  std::string case_id;
  int slice_index = 0;
  /// [C, H, W]
  Tensor image;
  /// H * W class ids.
  std::vector<std::uint8_t> label;
  int height = 0;
  int width = 0;
};

/// Cases in input order, slices ascending.
std::vector<SliceItem> iter_slices(const std::vector<Volume>& volumes);

std::int64_t foreground_count(std::span<const std::uint8_t> label_slice);

struct AugmentConfig {
  /// 0 keeps the full extent.
  int crop_height = 0;
  int crop_width = 0;
  bool flips = true;
  /// Shift range as a fraction of each modality's intensity std.
  double shift_fraction = 0.1;
};

struct Augmented {
  Tensor image;
  std::vector<std::uint8_t> label;
};

/// Random crop (shared window), horizontal and vertical flips with p = 0.5
/// each, and a per-modality intensity shift on the image only.
Augmented augment(const Tensor& image, std::span<const std::uint8_t> label,
                  const AugmentConfig& cfg, Rng& rng);

}  // namespace dynaroute
