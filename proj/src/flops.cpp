// SPDX-License-Identifier: Apache-2.0
#include "dynaroute/flops.hpp"

#include "dynaroute/errors.hpp"

namespace dynaroute {

std::string family_name(Family f) { return f == Family::kUnet ? "unet" : "attn"; }

Family parse_family(const std::string& name) {
  if (name == "unet") return Family::kUnet;
  if (name == "attn") return Family::kAttn;
  throw ConfigError("unknown candidate family '" + name + "' (expected unet or attn)");
}

std::string CandidateSpec::label() const {
  return family == Family::kUnet ? "unet_w" + std::to_string(width) : "attn_d" + std::to_string(depth);
}

std::vector<CandidateSpec> default_roster(int input_channels, int class_count) {
  std::vector<CandidateSpec> roster(4);
  roster[0] = {1, Family::kUnet, 4, 0, 0, input_channels, class_count};
  roster[1] = {2, Family::kUnet, 8, 0, 0, input_channels, class_count};
  roster[2] = {3, Family::kAttn, kAttnBaseWidth, 1, 192, input_channels, class_count};
  roster[3] = {4, Family::kAttn, kAttnBaseWidth, 4, 192, input_channels, class_count};
  return roster;
}

namespace flops {

Count conv2d(Count cin, Count cout, Count kh, Count kw, Count oh, Count ow) {
  return 2 * oh * ow * cout * kh * kw * cin;
}

Count depthwise_conv2d(Count channels, Count kh, Count kw, Count oh, Count ow) {
  return 2 * oh * ow * channels * kh * kw;
}

Count linear(Count rows, Count in_features, Count out_features) {
  return 2 * rows * in_features * out_features;
}

Count attention_products(Count tokens, Count dim) { return 2 * (2 * tokens * tokens * dim); }

Count transformer_block(Count tokens, Count dim) {
  return linear(tokens, dim, 3 * dim) + attention_products(tokens, dim) + linear(tokens, dim, dim) +
         linear(tokens, dim, 4 * dim) + linear(tokens, 4 * dim, dim);
}

namespace {

Count double_conv(Count cin, Count cout, Count h, Count w) {
  return conv2d(cin, cout, 3, 3, h, w) + conv2d(cout, cout, 3, 3, h, w);
}

}  // namespace

Count candidate(const CandidateSpec& spec, std::int64_t height, std::int64_t width) {
  if (height <= 0 || width <= 0 || height % kDownsampleFactor || width % kDownsampleFactor) {
    throw ShapeError("slice " + std::to_string(height) + "x" + std::to_string(width) +
                     " is not divisible by " + std::to_string(kDownsampleFactor));
  }
  const Count H = height, W = width;
  const Count w = spec.family == Family::kUnet ? spec.width : kAttnBaseWidth;
  const Count c1 = w, c2 = 2 * w, c3 = 4 * w, cb = 8 * w;
  Count total = double_conv(spec.input_channels, c1, H, W) + double_conv(c1, c2, H / 2, W / 2) +
                double_conv(c2, c3, H / 4, W / 4);
  const Count tokens = (H / 8) * (W / 8);
  if (spec.family == Family::kUnet) {
    total += double_conv(c3, cb, H / 8, W / 8);
  } else {
    const Count e = spec.embed_dim;
    total += linear(tokens, c3, e);
    total += static_cast<Count>(spec.depth) * transformer_block(tokens, e);
    total += linear(tokens, e, cb);
  }
  // Decoder: 1x1 reduce at the coarse level, upsample, concat skip, double conv.
  total += conv2d(cb, c3, 1, 1, H / 8, W / 8) + double_conv(2 * c3, c3, H / 4, W / 4);
  total += conv2d(c3, c2, 1, 1, H / 4, W / 4) + double_conv(2 * c2, c2, H / 2, W / 2);
  total += conv2d(c2, c1, 1, 1, H / 2, W / 2) + double_conv(2 * c1, c1, H, W);
  total += conv2d(c1, spec.class_count, 1, 1, H, W);
  return total;
}

Count decision(const DecisionNetSpec& spec, std::int64_t height, std::int64_t width) {
  Count total = 0;
  Count c = spec.input_channels;
  std::int64_t h = height, w = width;
  for (int out : spec.widths) {
    h = stride2_out(h);
    w = stride2_out(w);
    total += depthwise_conv2d(c, 3, 3, h, w) + conv2d(c, out, 1, 1, h, w);
    c = out;
  }
  total += linear(1, c, spec.option_count);
  return total;
}

}  // namespace flops
}  // namespace dynaroute
