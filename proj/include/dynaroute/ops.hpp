// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <string_view>

#include "dynaroute/tensor.hpp"

/// Differentiable primitives. Every function records itself on the active tape
/// when a tape is in scope and at least one input requires a gradient.
///
/// Layout conventions: images are [N, C, H, W]; token sequences are [N, T, E].
namespace dynaroute::ops {

/// Elementwise sum. `b` may equal `a` in shape, or be a vector broadcast along
/// the channel axis (rank-4 `a`) or along the last axis (any other rank).
template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// Elementwise product; `b` may also hold a single value.
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// Multiplication by a constant.
template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor);

/// [..., M, K] x [K, N] -> [..., M, N], or batched [B, M, K] x [B, K, N].
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> transpose_last2(const BasicTensor<T>& a);

struct Conv2dParams {
  int stride = 1;
  int padding = 0;
};

/// x [N, Cin, H, W], weight [Cout, Cin, kh, kw].
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, Conv2dParams p = {});

/// x [N, C, H, W], weight [C, 1, kh, kw].
template <typename T>
BasicTensor<T> depthwise_conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                                Conv2dParams p = {});

/// Non-overlapping max pooling with a square window; H and W must divide.
template <typename T>
BasicTensor<T> maxpool2d(const BasicTensor<T>& x, int window = 2);

template <typename T>
BasicTensor<T> nearest_upsample2x(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);

/// Exact (erf) GELU.
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> softmax_lastdim(const BasicTensor<T>& x);

/// Group normalization over [N, C, ...]; gamma/beta of length C may be
/// undefined for a plain normalization.
template <typename T>
BasicTensor<T> groupnorm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                         const BasicTensor<T>& beta, int groups, T eps = T(1e-5));

/// Layer normalization over the last axis.
template <typename T>
BasicTensor<T> layernorm_lastdim(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                                 const BasicTensor<T>& beta, T eps = T(1e-5));

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);

/// [N, C, H, W] -> [N, C].
template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x);

}  // namespace dynaroute::ops

namespace dynaroute {

enum class OpKind {
  kAdd,
  kMul,
  kMatmul,
  kConv2d,
  kDepthwiseConv2d,
  kMaxPool2d,
  kNearestUpsample2x,
  kRelu,
  kGelu,
  kSoftmaxLastdim,
  kGroupNorm,
  kConcatChannels,
  kReshape,
};

std::optional<OpKind> parse_op_kind(std::string_view name);
std::string_view op_kind_name(OpKind kind);

struct OpAttrs {
  int stride = 1;
  int padding = 0;
  int window = 2;
  int groups = 1;
  double eps = 1e-5;
  Shape shape;
};

/// Uniform entry point over the primitive set. groupnorm takes inputs
/// (x[, gamma, beta]); conv kinds take (x, weight).
template <typename T>
BasicTensor<T> forward_primitive(OpKind kind, std::span<const BasicTensor<T>> inputs,
                                 const OpAttrs& attrs = {});

/// Same as above, looked up by name; unknown names throw UnsupportedOpError.
template <typename T>
BasicTensor<T> forward_primitive(std::string_view kind, std::span<const BasicTensor<T>> inputs,
                                 const OpAttrs& attrs = {});

}  // namespace dynaroute
