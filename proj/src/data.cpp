// SPDX-License-Identifier: Apache-2.0
#include "dynaroute/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>

#include "binary_io.hpp"
#include "dynaroute/errors.hpp"
#include "dynaroute/specs.hpp"

namespace dynaroute {

void Volume::validate() const {
  const auto pixels = static_cast<std::size_t>(depth) * height * width;
  if (voxels.size() != static_cast<std::size_t>(channels) * pixels) {
    throw DataError(DataError::Kind::kInvalid, case_id + ": voxel count does not match dimensions");
  }
  if (!labels.empty() && labels.size() != pixels) {
    throw DataError(DataError::Kind::kInvalid, case_id + ": label count does not match dimensions");
  }
}

void SynthConfig::validate() const {
  if (volume_count < 0) throw ConfigError("volume_count must be >= 0");
  if (channels < 1) throw ConfigError("channels must be >= 1");
  if (class_count < 2 || class_count > 255) throw ConfigError("class_count must be in 2..255");
  if (depth < 1) throw ConfigError("depth must be >= 1");
  if (height <= 0 || width <= 0 || height % kDownsampleFactor || width % kDownsampleFactor) {
    throw ConfigError("slice size " + std::to_string(height) + "x" + std::to_string(width) +
                      " must be divisible by " + std::to_string(kDownsampleFactor));
  }
  if (margin < 0 || 2 * margin >= depth) throw ConfigError("margin must satisfy 0 <= margin < depth/2");
  if (min_lesions < 1 || max_lesions < min_lesions) throw ConfigError("bad lesion count range");
  if (!(min_radius > 0) || max_radius_min < min_radius || max_radius_max < max_radius_min) {
    throw ConfigError("bad lesion radius range");
  }
  if (band_irregularity.empty()) throw ConfigError("band_irregularity must not be empty");
  if (noise_std < 0) throw ConfigError("noise_std must be >= 0");
}

namespace {

constexpr int kHarmonics = 4;

struct Lesion {
  double cy, cx;
  double peak_radius;
  int z0, z1;
  std::array<double, kHarmonics> weight;
  std::array<double, kHarmonics> phase;
};

struct Wave {
  double fz, fy, fx, phase, amp;
};

// Radius fraction of the region for lesion class c (outer class 1 is full size).
double class_fraction(int c, int class_count) {
  if (class_count <= 2) return 1.0;
  return std::max(0.2, 1.0 - 0.9 * (c - 1) / (class_count - 1));
}

// Fraction of the lesion's depth half-extent in which class c is present.
double class_extent(int c) { return std::max(0.2, 1.0 - 0.25 * (c - 1)); }

double signature(int modality, int cls, int channels) {
  if (cls == 0) return 0.0;
  double s = 0.2;
  if (modality == (cls - 1) % channels) s += 0.7;
  if (channels > 1 && modality == cls % channels) s += (cls % 2 ? -0.3 : 0.3);
  return s;
}

Volume generate_one(const SynthConfig& cfg, int index) {
  Rng rng(derive_seed(cfg.seed, "synth-volume", static_cast<std::uint64_t>(index)));
  Volume v;
  v.case_id = cfg.id_prefix + "_" + std::string(index < 10 ? "00" : index < 100 ? "0" : "") +
              std::to_string(index);
  v.channels = cfg.channels;
  v.depth = cfg.depth;
  v.height = cfg.height;
  v.width = cfg.width;
  const int D = cfg.depth, H = cfg.height, W = cfg.width;

  std::vector<Wave> waves(5);
  for (auto& w : waves) {
    w.fz = uniform(rng, 0.0, 0.3);
    w.fy = uniform(rng, -0.25, 0.25);
    w.fx = uniform(rng, -0.25, 0.25);
    w.phase = uniform(rng, 0.0, 2 * std::numbers::pi);
    w.amp = uniform(rng, 0.03, 0.08);
  }
  const double head_ry = H * uniform(rng, 0.38, 0.45), head_rx = W * uniform(rng, 0.36, 0.44);
  std::vector<double> gain(cfg.channels), offset(cfg.channels);
  for (int m = 0; m < cfg.channels; ++m) {
    gain[m] = uniform(rng, 0.7, 1.3);
    offset[m] = uniform(rng, -0.1, 0.1);
  }

  const int interior0 = cfg.margin, interior1 = D - cfg.margin - 1;
  const int lesions = cfg.min_lesions + static_cast<int>(uniform_index(
                                            rng, static_cast<std::uint64_t>(cfg.max_lesions - cfg.min_lesions + 1)));
  std::vector<Lesion> ls(lesions);
  for (int i = 0; i < lesions; ++i) {
    auto& l = ls[i];
    l.peak_radius = uniform(rng, cfg.max_radius_min, cfg.max_radius_max) * (i == 0 ? 1.0 : 0.7);
    const double reach = l.peak_radius * 1.3;
    l.cy = uniform(rng, H / 2.0 - head_ry + reach, H / 2.0 + head_ry - reach);
    l.cx = uniform(rng, W / 2.0 - head_rx + reach, W / 2.0 + head_rx - reach);
    if (i == 0) {
      // The primary lesion spans the whole interior so only the margins are empty.
      l.z0 = interior0;
      l.z1 = interior1;
    } else {
      const int span = interior1 - interior0 + 1;
      const int len = std::max(1, span / 2 + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(span / 2 + 1))));
      l.z0 = interior0 + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(span - len + 1)));
      l.z1 = l.z0 + len - 1;
    }
    double norm = 0;
    for (int k = 0; k < kHarmonics; ++k) {
      l.weight[k] = uniform(rng, 0.5, 1.0);
      l.phase[k] = uniform(rng, 0.0, 2 * std::numbers::pi);
      norm += l.weight[k];
    }
    for (auto& w : l.weight) w /= norm;
  }

  const std::size_t hw = static_cast<std::size_t>(H) * W;
  v.labels.assign(static_cast<std::size_t>(D) * hw, 0);
  // Per-slice lesion contrast; edge bands are fainter.
  std::vector<double> contrast(static_cast<std::size_t>(D), 1.0);
  const int bands = static_cast<int>(cfg.band_irregularity.size());
  for (int z = 0; z < D; ++z) {
    auto* lab = v.labels.data() + static_cast<std::size_t>(z) * hw;
    for (const auto& l : ls) {
      if (z < l.z0 || z > l.z1) continue;
      const double zc = 0.5 * (l.z0 + l.z1), half = 0.5 * (l.z1 - l.z0) + 0.5;
      const double t = std::abs(z - zc) / half;
      const double r = std::max(cfg.min_radius, l.peak_radius * std::sqrt(std::max(0.0, 1.0 - t * t)));
      const int band = std::min(bands - 1, static_cast<int>((1.0 - t) * bands));
      const double amp = cfg.band_irregularity[static_cast<std::size_t>(band)];
      if (&l == &ls.front()) contrast[static_cast<std::size_t>(z)] = 0.75 + 0.25 * (1.0 - t);
      for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
          const double dy = y - l.cy, dx = x - l.cx;
          const double rho = std::sqrt(dy * dy + dx * dx);
          if (rho > r * (1 + amp) + 1) continue;
          const double theta = std::atan2(dy, dx);
          double wobble = 0;
          for (int k = 0; k < kHarmonics; ++k) wobble += l.weight[k] * std::cos((k + 2) * theta + l.phase[k]);
          const double boundary = r * (1.0 + amp * wobble);
          for (int c = cfg.class_count - 1; c >= 1; --c) {
            if (t > class_extent(c) && c > 1) continue;
            if (rho <= boundary * class_fraction(c, cfg.class_count)) {
              auto& dst = lab[static_cast<std::size_t>(y) * W + x];
              dst = std::max<std::uint8_t>(dst, static_cast<std::uint8_t>(c));
              break;
            }
          }
        }
      }
    }
  }

  v.voxels.assign(static_cast<std::size_t>(cfg.channels) * D * hw, 0.0f);
  for (int z = 0; z < D; ++z) {
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const double ey = (y - H / 2.0) / head_ry, ex = (x - W / 2.0) / head_rx;
        const bool tissue = ey * ey + ex * ex <= 1.0;
        double anatomy = 0.5;
        for (const auto& w : waves) anatomy += w.amp * std::sin(w.fz * z + w.fy * y + w.fx * x + w.phase);
        const int cls = v.labels[static_cast<std::size_t>(z) * hw + static_cast<std::size_t>(y) * W + x];
        for (int m = 0; m < cfg.channels; ++m) {
          // Box-Muller keeps the noise stream portable.
          const double u1 = std::max(uniform01(rng), 1e-300), u2 = uniform01(rng);
          const double noise = std::sqrt(-2.0 * std::log(u1)) * std::cos(2 * std::numbers::pi * u2);
          double value = cfg.noise_std * noise;
          if (tissue) {
            value += gain[m] * (anatomy + 0.15 * m) + offset[m] +
                     contrast[static_cast<std::size_t>(z)] * signature(m, cls, cfg.channels);
          }
          v.voxels[((static_cast<std::size_t>(m) * D + z) * H + y) * W + x] = static_cast<float>(value);
        }
      }
    }
  }
  return v;
}

}  // namespace

std::vector<Volume> synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<Volume> out;
  out.reserve(static_cast<std::size_t>(cfg.volume_count));
  for (int i = 0; i < cfg.volume_count; ++i) out.push_back(generate_one(cfg, i));
  if (!out.empty()) {
    const auto mix = slice_mix(out);
    // Two-class labelings have no multi-class slices by construction.
    if (mix.empty_fraction < 0.2 || (cfg.class_count > 2 && mix.multi_class_fraction < 0.2)) {
      throw DataError(DataError::Kind::kInvalid,
                      "generated slice mix out of range: empty " + std::to_string(mix.empty_fraction) +
                          ", multi-class " + std::to_string(mix.multi_class_fraction));
    }
  }
  return out;
}

SliceMix slice_mix(const std::vector<Volume>& volumes) {
  std::size_t slices = 0, empty = 0, multi = 0;
  for (const auto& v : volumes) {
    const auto hw = v.slice_pixels();
    for (int z = 0; z < v.depth; ++z) {
      std::array<bool, 256> seen{};
      int classes = 0;
      for (std::size_t i = 0; i < hw; ++i) {
        const auto c = v.labels[static_cast<std::size_t>(z) * hw + i];
        if (c && !seen[c]) {
          seen[c] = true;
          ++classes;
        }
      }
      ++slices;
      empty += classes == 0;
      multi += classes >= 2;
    }
  }
  if (slices == 0) return {};
  return {static_cast<double>(empty) / slices, static_cast<double>(multi) / slices};
}

namespace {
constexpr char kVolMagic[4] = {'D', 'V', 'L', '1'};
constexpr std::uint8_t kHasLabel = 1;
constexpr std::uint64_t kMaxVoxels = std::uint64_t{1} << 34;
}  // namespace

void save_dvol(const std::filesystem::path& path, const Volume& volume) {
  volume.validate();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError(DataError::Kind::kIo, "cannot open " + path.string() + " for writing");
  os.write(kVolMagic, 4);
  detail::write_le<std::uint8_t>(os, volume.has_labels() ? kHasLabel : 0);
  for (int d : {volume.channels, volume.depth, volume.height, volume.width}) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  }
  os.write(reinterpret_cast<const char*>(volume.voxels.data()),
           static_cast<std::streamsize>(volume.voxels.size() * sizeof(float)));
  os.write(reinterpret_cast<const char*>(volume.labels.data()),
           static_cast<std::streamsize>(volume.labels.size()));
  if (!os) throw DataError(DataError::Kind::kIo, "write failed for " + path.string());
}

Volume load_dvol(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError(DataError::Kind::kIo, "cannot open " + path.string());
  char magic[4] = {};
  if (!is.read(magic, 4) || !std::equal(magic, magic + 4, kVolMagic)) {
    throw DataError(DataError::Kind::kBadMagic, path.string() + ": not a DVL1 volume");
  }
  const auto flags = detail::read_le<std::uint8_t>(is, "flags");
  std::uint32_t dims[4];
  for (auto& d : dims) d = detail::read_le<std::uint32_t>(is, "dimensions");
  const std::uint64_t pixels = std::uint64_t{dims[1]} * dims[2] * dims[3];
  if (dims[1] > (1u << 20) || dims[2] > (1u << 20) || dims[3] > (1u << 20) || dims[0] > 4096 ||
      pixels > kMaxVoxels || pixels * dims[0] > kMaxVoxels) {
    throw DataError(DataError::Kind::kDimOverflow, path.string() + ": dimensions overflow");
  }
  Volume v;
  v.case_id = path.stem().string();
  v.channels = static_cast<int>(dims[0]);
  v.depth = static_cast<int>(dims[1]);
  v.height = static_cast<int>(dims[2]);
  v.width = static_cast<int>(dims[3]);
  v.voxels.resize(pixels * dims[0]);
  detail::read_bytes(is, reinterpret_cast<char*>(v.voxels.data()), v.voxels.size() * sizeof(float),
                     "voxel payload");
  if (flags & kHasLabel) {
    v.labels.resize(pixels);
    detail::read_bytes(is, reinterpret_cast<char*>(v.labels.data()), v.labels.size(), "label payload");
  }
  return v;
}

std::vector<SliceItem> iter_slices(const std::vector<Volume>& volumes) {
  std::vector<SliceItem> items;
  for (const auto& v : volumes) {
    const auto hw = v.slice_pixels();
    for (int z = 0; z < v.depth; ++z) {
      SliceItem item;
      item.case_id = v.case_id;
      item.slice_index = z;
      item.height = v.height;
      item.width = v.width;
      std::vector<float> pixels(static_cast<std::size_t>(v.channels) * hw);
      for (int c = 0; c < v.channels; ++c) {
        const auto* src = v.voxels.data() + (static_cast<std::size_t>(c) * v.depth + z) * hw;
        std::copy(src, src + hw, pixels.begin() + static_cast<std::ptrdiff_t>(c * hw));
      }
      item.image = Tensor({v.channels, v.height, v.width}, std::move(pixels));
      if (v.has_labels()) {
        const auto* src = v.labels.data() + static_cast<std::size_t>(z) * hw;
        item.label.assign(src, src + hw);
      }
      items.push_back(std::move(item));
    }
  }
  return items;
}

std::int64_t foreground_count(std::span<const std::uint8_t> label_slice) {
  return std::count_if(label_slice.begin(), label_slice.end(), [](std::uint8_t c) { return c != 0; });
}

Augmented augment(const Tensor& image, std::span<const std::uint8_t> label, const AugmentConfig& cfg,
                  Rng& rng) {
  if (image.rank() != 3) throw ShapeError("augment expects a [C, H, W] slice, got " + shape_str(image.shape()));
  const int C = static_cast<int>(image.dim(0)), H = static_cast<int>(image.dim(1)),
            W = static_cast<int>(image.dim(2));
  if (label.size() != static_cast<std::size_t>(H) * W) throw ShapeError("label size does not match slice");
  const int ch = cfg.crop_height ? cfg.crop_height : H, cw = cfg.crop_width ? cfg.crop_width : W;
  if (ch > H || cw > W || ch <= 0 || cw <= 0) {
    throw ConfigError("crop " + std::to_string(ch) + "x" + std::to_string(cw) + " exceeds slice " +
                      std::to_string(H) + "x" + std::to_string(W));
  }
  const int oy = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(H - ch + 1)));
  const int ox = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(W - cw + 1)));
  const bool flip_h = cfg.flips && coin(rng);
  const bool flip_v = cfg.flips && coin(rng);

  Augmented out{Tensor({C, ch, cw}), std::vector<std::uint8_t>(static_cast<std::size_t>(ch) * cw)};
  const auto src = image.data();
  auto dst = out.image.data();
  for (int c = 0; c < C; ++c) {
    double mean = 0, sq = 0;
    const auto plane = src.subspan(static_cast<std::size_t>(c) * H * W, static_cast<std::size_t>(H) * W);
    for (float v : plane) mean += v;
    mean /= plane.size();
    for (float v : plane) sq += (v - mean) * (v - mean);
    const double sd = std::sqrt(sq / plane.size());
    const double shift = cfg.shift_fraction > 0 ? uniform(rng, -cfg.shift_fraction, cfg.shift_fraction) * sd : 0.0;
    for (int y = 0; y < ch; ++y) {
      const int sy = oy + (flip_v ? ch - 1 - y : y);
      for (int x = 0; x < cw; ++x) {
        const int sx = ox + (flip_h ? cw - 1 - x : x);
        dst[(static_cast<std::size_t>(c) * ch + y) * cw + x] =
            static_cast<float>(plane[static_cast<std::size_t>(sy) * W + sx] + shift);
      }
    }
  }
  for (int y = 0; y < ch; ++y) {
    const int sy = oy + (flip_v ? ch - 1 - y : y);
    for (int x = 0; x < cw; ++x) {
      const int sx = ox + (flip_h ? cw - 1 - x : x);
      out.label[static_cast<std::size_t>(y) * cw + x] = label[static_cast<std::size_t>(sy) * W + sx];
    }
  }
  return out;
}

}  // namespace dynaroute
