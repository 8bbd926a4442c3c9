// SPDX-License-Identifier: Apache-2.0
// Parameterized building blocks shared by the bank candidates and the
// decision network. Layers hold tensor handles; the owning ParamStore keeps
// the same handles under stable names for optimizers and checkpoints.
#pragma once

#include <string>
#include <vector>

#include "dynaroute/ops.hpp"
#include "dynaroute/rng.hpp"
#include "dynaroute/tensor.hpp"

namespace dynaroute {

class ParamStore {
 public:
  /// He-style uniform init, bound sqrt(6 / fan_in).
  Tensor he(const std::string& name, Shape shape, std::int64_t fan_in, Rng& rng);
  Tensor constant(const std::string& name, Shape shape, float value);

  std::vector<NamedParam>& params() noexcept { return params_; }
  const std::vector<NamedParam>& params() const noexcept { return params_; }
  void set_requires_grad(bool flag);
  std::int64_t parameter_count() const;

 private:
  Tensor add(const std::string& name, Tensor t);
  std::vector<NamedParam> params_;
};

struct Conv {
  Tensor weight;
  Tensor bias;  // may be undefined
  ops::Conv2dParams p;

  static Conv make(ParamStore& store, const std::string& name, int cin, int cout, int k, Rng& rng,
                   bool with_bias, int stride = 1);
  Tensor operator()(const Tensor& x) const;
};

struct DepthwiseConv {
  Tensor weight;
  Tensor bias;
  ops::Conv2dParams p;

  static DepthwiseConv make(ParamStore& store, const std::string& name, int channels, Rng& rng,
                            int stride);
  Tensor operator()(const Tensor& x) const;
};

struct GroupNorm {
  Tensor gamma;
  Tensor beta;
  int groups = 1;

  /// groups = min(8, channels)
  static GroupNorm make(ParamStore& store, const std::string& name, int channels);
  Tensor operator()(const Tensor& x) const;
};

/// y = x W + b over the last axis; W is [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;

  static Linear make(ParamStore& store, const std::string& name, int in, int out, Rng& rng);
  Tensor operator()(const Tensor& x) const;
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  static LayerNorm make(ParamStore& store, const std::string& name, int dim);
  Tensor operator()(const Tensor& x) const;
};

/// conv3x3 - GN - ReLU, twice.
struct DoubleConv {
  Conv c1, c2;
  GroupNorm n1, n2;

  static DoubleConv make(ParamStore& store, const std::string& name, int cin, int cout, Rng& rng);
  Tensor operator()(const Tensor& x) const;
};

}  // namespace dynaroute
