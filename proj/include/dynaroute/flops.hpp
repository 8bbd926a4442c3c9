// SPDX-License-Identifier: Apache-2.0
// Analytic cost model. One FLOP convention everywhere: 2 x multiply-accumulate
// for dense conv, depthwise conv, linear layers and the two attention matrix
// products. Bias adds, normalization, pooling and activations cost nothing.
#pragma once

#include <cstdint>

#include "dynaroute/specs.hpp"

namespace dynaroute::flops {

using Count = std::uint64_t;

Count conv2d(Count cin, Count cout, Count kh, Count kw, Count oh, Count ow);
Count depthwise_conv2d(Count channels, Count kh, Count kw, Count oh, Count ow);
Count linear(Count rows, Count in_features, Count out_features);
/// Q K^T plus A V for a single head over `tokens` tokens of width `dim`.
Count attention_products(Count tokens, Count dim);
/// Projections, attention products and the 4x MLP of one transformer block.
Count transformer_block(Count tokens, Count dim);

/// Output side of a 3x3, stride 2, padding 1 convolution.
constexpr std::int64_t stride2_out(std::int64_t n) { return (n - 1) / 2 + 1; }

/// Cost of one forward pass on a single height x width slice. Throws
/// ShapeError if the size is not divisible by the downsampling factor.
Count candidate(const CandidateSpec& spec, std::int64_t height, std::int64_t width);
Count decision(const DecisionNetSpec& spec, std::int64_t height, std::int64_t width);

}  // namespace dynaroute::flops
