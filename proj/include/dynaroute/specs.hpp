// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dynaroute {

enum class Family { kUnet, kAttn };

std::string family_name(Family f);
Family parse_family(const std::string& name);

/// One bank member. `width` applies to unet; attn models reuse the width-4
/// unet encoder/decoder around `depth` attention blocks of size `embed_dim`.
struct CandidateSpec {
  int index = 1;
  Family family = Family::kUnet;
  int width = 4;
  int depth = 1;
  int embed_dim = 192;
  int input_channels = 4;
  int class_count = 4;

  std::string label() const;
  friend bool operator==(const CandidateSpec&, const CandidateSpec&) = default;
};

/// Encoder width of the attention family.
inline constexpr int kAttnBaseWidth = 4;
/// Three pooling stages.
inline constexpr int kDownsampleFactor = 8;

/// unet(4), unet(8), attn(1), attn(4).
std::vector<CandidateSpec> default_roster(int input_channels = 4, int class_count = 4);

struct DecisionNetSpec {
  std::vector<int> widths{4, 8, 16, 32};
  int input_channels = 4;
  /// n + 1 (skip plus one output per candidate).
  int option_count = 5;
  friend bool operator==(const DecisionNetSpec&, const DecisionNetSpec&) = default;
};

}  // namespace dynaroute
