// SPDX-License-Identifier: Apache-2.0
#include "dynaroute/layers.hpp"

#include <algorithm>
#include <cmath>

#include "dynaroute/errors.hpp"

namespace dynaroute {

Tensor ParamStore::add(const std::string& name, Tensor t) {
  for (const auto& p : params_) {
    if (p.name == name) throw Error("duplicate parameter name " + name);
  }
  t.set_requires_grad(true);
  params_.push_back({name, t});
  return t;
}

Tensor ParamStore::he(const std::string& name, Shape shape, std::int64_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<float>(uniform(rng, -bound, bound));
  return add(name, Tensor(std::move(shape), std::move(v)));
}

Tensor ParamStore::constant(const std::string& name, Shape shape, float value) {
  std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)), value);
  return add(name, Tensor(std::move(shape), std::move(v)));
}

void ParamStore::set_requires_grad(bool flag) {
  for (auto& p : params_) p.tensor.set_requires_grad(flag);
}

std::int64_t ParamStore::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

Conv Conv::make(ParamStore& store, const std::string& name, int cin, int cout, int k, Rng& rng,
                bool with_bias, int stride) {
  Conv c;
  c.weight = store.he(name + ".weight", {cout, cin, k, k}, static_cast<std::int64_t>(cin) * k * k, rng);
  if (with_bias) c.bias = store.constant(name + ".bias", {cout}, 0.0f);
  c.p = {stride, k / 2};
  return c;
}

Tensor Conv::operator()(const Tensor& x) const {
  auto y = ops::conv2d(x, weight, p);
  return bias.defined() ? ops::add(y, bias) : y;
}

DepthwiseConv DepthwiseConv::make(ParamStore& store, const std::string& name, int channels, Rng& rng,
                                  int stride) {
  DepthwiseConv c;
  c.weight = store.he(name + ".weight", {channels, 1, 3, 3}, 9, rng);
  c.bias = store.constant(name + ".bias", {channels}, 0.0f);
  c.p = {stride, 1};
  return c;
}

Tensor DepthwiseConv::operator()(const Tensor& x) const {
  return ops::add(ops::depthwise_conv2d(x, weight, p), bias);
}

GroupNorm GroupNorm::make(ParamStore& store, const std::string& name, int channels) {
  GroupNorm g;
  g.gamma = store.constant(name + ".gamma", {channels}, 1.0f);
  g.beta = store.constant(name + ".beta", {channels}, 0.0f);
  g.groups = std::min(8, channels);
  return g;
}

Tensor GroupNorm::operator()(const Tensor& x) const { return ops::groupnorm(x, gamma, beta, groups); }

Linear Linear::make(ParamStore& store, const std::string& name, int in, int out, Rng& rng) {
  Linear l;
  l.weight = store.he(name + ".weight", {in, out}, in, rng);
  l.bias = store.constant(name + ".bias", {out}, 0.0f);
  return l;
}

Tensor Linear::operator()(const Tensor& x) const { return ops::add(ops::matmul(x, weight), bias); }

LayerNorm LayerNorm::make(ParamStore& store, const std::string& name, int dim) {
  return {store.constant(name + ".gamma", {dim}, 1.0f), store.constant(name + ".beta", {dim}, 0.0f)};
}

Tensor LayerNorm::operator()(const Tensor& x) const { return ops::layernorm_lastdim(x, gamma, beta); }

DoubleConv DoubleConv::make(ParamStore& store, const std::string& name, int cin, int cout, Rng& rng) {
  DoubleConv d;
  d.c1 = Conv::make(store, name + ".conv1", cin, cout, 3, rng, false);
  d.n1 = GroupNorm::make(store, name + ".norm1", cout);
  d.c2 = Conv::make(store, name + ".conv2", cout, cout, 3, rng, false);
  d.n2 = GroupNorm::make(store, name + ".norm2", cout);
  return d;
}

Tensor DoubleConv::operator()(const Tensor& x) const {
  auto h = ops::relu(n1(c1(x)));
  return ops::relu(n2(c2(h)));
}

}  // namespace dynaroute
