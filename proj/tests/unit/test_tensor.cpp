// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "dynaroute/checkpoint.hpp"
#include "dynaroute/errors.hpp"
#include "dynaroute/ops.hpp"
#include "dynaroute/optim.hpp"
#include "gradcheck_cases.hpp"

using namespace dynaroute;
using test_support::random_tensor;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("dynaroute_test_" + name);
}

}  // namespace

TEST(Tensor, ConstructionChecksValueCount) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  Tensor t({2, 3});
  EXPECT_EQ(t.numel(), 6);
  EXPECT_FALSE(t.has_grad());
  EXPECT_EQ(t.grad().size(), 6u);
}

TEST(Tensor, NonFiniteValuesAreDetectable) {
  Tensor t({3}, {1.0f, 2.0f, 3.0f});
  EXPECT_TRUE(t.all_finite());
  t.data()[1] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_FALSE(t.all_finite());
  t.data()[1] = std::numeric_limits<float>::infinity();
  EXPECT_FALSE(t.all_finite());
}

TEST(Ops, Conv2dSamePaddingShape) {
  Tensor x({1, 2, 8, 8});
  Tensor w({4, 2, 3, 3});
  const auto y = ops::conv2d(x, w, {1, 1});
  EXPECT_EQ(y.shape(), (Shape{1, 4, 8, 8}));
}

TEST(Ops, Conv2dMatchesDirectSum) {
  std::mt19937_64 rng(3);
  auto x = random_tensor<double>({2, 3, 5, 4}, rng, -1, 1, false);
  auto w = random_tensor<double>({2, 3, 3, 3}, rng, -1, 1, false);
  const auto y = ops::conv2d(x, w, {2, 1});
  ASSERT_EQ(y.shape(), (Shape{2, 2, 3, 2}));
  for (int n = 0; n < 2; ++n)
    for (int co = 0; co < 2; ++co)
      for (int oy = 0; oy < 3; ++oy)
        for (int ox = 0; ox < 2; ++ox) {
          double acc = 0;
          for (int ci = 0; ci < 3; ++ci)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
                if (iy < 0 || iy >= 5 || ix < 0 || ix >= 4) continue;
                acc += x.data()[((n * 3 + ci) * 5 + iy) * 4 + ix] *
                       w.data()[((co * 3 + ci) * 3 + ky) * 3 + kx];
              }
          EXPECT_NEAR(y.data()[((n * 2 + co) * 3 + oy) * 2 + ox], acc, 1e-12);
        }
}

TEST(Ops, SoftmaxOfEqualLogitsIsUniform) {
  const auto y = ops::softmax_lastdim(Tensor({4}, {0, 0, 0, 0}));
  for (float v : y.data()) EXPECT_FLOAT_EQ(v, 0.25f);
}

TEST(Ops, ReluClampsNegatives) {
  const auto y = ops::relu(Tensor({2}, {-1.0f, 2.0f}));
  EXPECT_EQ(y.data()[0], 0.0f);
  EXPECT_EQ(y.data()[1], 2.0f);
}

TEST(Ops, ShapeMismatchNamesDimensions) {
  Tensor x({1, 3, 8, 8});
  Tensor w({4, 2, 3, 3});
  try {
    ops::conv2d(x, w);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("3"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("2"), std::string::npos);
  }
  EXPECT_THROW(ops::add(Tensor({2, 3}), Tensor({3, 2})), ShapeError);
  EXPECT_THROW(ops::matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
  EXPECT_THROW(ops::maxpool2d(Tensor({1, 1, 3, 4})), ShapeError);
}

TEST(Ops, ForwardPrimitiveDispatch) {
  const std::vector<Tensor> in{Tensor({2}, {-1.0f, 2.0f})};
  const auto y = forward_primitive<float>("relu", in);
  EXPECT_EQ(y.data()[1], 2.0f);
  EXPECT_THROW(forward_primitive<float>("fft", in), UnsupportedOpError);
  EXPECT_THROW(forward_primitive<float>(OpKind::kAdd, in), ShapeError);
  OpAttrs attrs;
  attrs.shape = {1, 2};
  EXPECT_EQ(forward_primitive<float>(OpKind::kReshape, in, attrs).shape(), (Shape{1, 2}));
}

TEST(Autodiff, LinearFormGradient) {
  Tensor w({2}, {2.0f, 3.0f}, true);
  Tensor x({2}, {1.0f, 1.0f});
  Tape tape;
  {
    TapeScope scope(tape);
    auto loss = ops::sum(ops::mul(w, x));
    backward(loss, tape);
  }
  EXPECT_EQ(w.grad()[0], 1.0f);
  EXPECT_EQ(w.grad()[1], 1.0f);
}

TEST(Autodiff, UnreachableParameterGetsZeroGradient) {
  Tensor used({2}, {1.0f, 2.0f}, true);
  Tensor unused({3}, {1.0f, 2.0f, 3.0f}, true);
  Tape tape;
  TapeScope scope(tape);
  auto loss = ops::sum(used);
  backward(loss, tape);
  for (float g : unused.grad()) EXPECT_EQ(g, 0.0f);
}

TEST(Autodiff, NonScalarLossRejected) {
  Tensor w({2}, {1.0f, 2.0f}, true);
  Tape tape;
  TapeScope scope(tape);
  auto y = ops::relu(w);
  EXPECT_THROW(backward(y, tape), ShapeError);
}

TEST(Autodiff, TapeRecordsOnlyWithGradInputsAndReplaysInReverse) {
  Tensor x({2}, {1.0f, 2.0f});
  Tape tape;
  TapeScope scope(tape);
  ops::relu(x);
  EXPECT_EQ(tape.size(), 0u);
  x.set_requires_grad(true);
  auto h = ops::relu(x);
  auto loss = ops::sum(h);
  EXPECT_EQ(tape.op_names(), (std::vector<std::string>{"relu", "sum"}));
  backward(loss, tape);
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Autodiff, ReverseOrderVisitsEachEntryOnce) {
  Tape tape;
  std::vector<int> visits;
  for (int i = 0; i < 5; ++i) tape.record("probe", [i, &visits] { visits.push_back(i); });
  tape.replay_backward();
  EXPECT_EQ(visits, (std::vector<int>{4, 3, 2, 1, 0}));
  tape.replay_backward();
  EXPECT_EQ(visits.size(), 5u);
}

TEST(GradCheck, Float64PrimitivesMatchFiniteDifferences) {
  std::mt19937_64 rng(20240501);
  for (const auto& c : test_support::primitive_grad_cases<double>()) {
    double worst = 0;
    for (int i = 0; i < 20; ++i) worst = std::max(worst, c.run(rng, 1e-4));
    EXPECT_LT(worst, 1e-5) << c.name;
  }
}

TEST(GradCheck, Float32PrimitivesMatchFiniteDifferences) {
  std::mt19937_64 rng(77);
  for (const auto& c : test_support::primitive_grad_cases<float>()) {
    double worst = 0;
    for (int i = 0; i < 20; ++i) worst = std::max(worst, c.run(rng, 1e-2));
    EXPECT_LT(worst, 1e-3) << c.name;
  }
}

TEST(Invariants, SoftmaxRowsAreDistributions) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_tensor<float>({4, 7}, rng, -20, 20, false);
    const auto y = ops::softmax_lastdim(x);
    for (int r = 0; r < 4; ++r) {
      double total = 0;
      for (int j = 0; j < 7; ++j) {
        const float p = y.data()[r * 7 + j];
        EXPECT_GE(p, 0.0f);
        total += p;
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(Invariants, GroupNormStandardizesEachGroup) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    auto x = random_tensor<float>({2, 8, 5, 5}, rng, -3, 7, false);
    const auto y = ops::groupnorm(x, Tensor(), Tensor(), 4);
    const int len = 2 * 25;
    for (int s = 0; s < 2 * 4; ++s) {
      double m = 0, v = 0;
      for (int j = 0; j < len; ++j) m += y.data()[s * len + j];
      m /= len;
      for (int j = 0; j < len; ++j) v += std::pow(y.data()[s * len + j] - m, 2);
      v /= len;
      EXPECT_LT(std::abs(m), 1e-5);
      EXPECT_NEAR(v, 1.0, 1e-4);
    }
  }
}

TEST(Invariants, ForwardBackwardIsBitwiseDeterministic) {
  auto run = [] {
    std::mt19937_64 rng(99);
    auto x = random_tensor<float>({2, 3, 8, 8}, rng);
    auto w = random_tensor<float>({4, 3, 3, 3}, rng);
    auto g = random_tensor<float>({4}, rng);
    Tape tape;
    TapeScope scope(tape);
    auto h = ops::gelu(ops::groupnorm(ops::conv2d(x, w, {1, 1}), g, Tensor(), 2));
    auto loss = ops::mean(ops::mul(h, h));
    backward(loss, tape);
    std::vector<float> out(w.grad().begin(), w.grad().end());
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    out.push_back(loss.item());
    return out;
  };
  const auto a = run();
  const auto b = run();
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)), 0);
}

TEST(FlopCounter, CountsConvAndMatmul) {
  FlopCounter counter;
  ops::conv2d(Tensor({1, 2, 8, 8}), Tensor({4, 2, 3, 3}), {1, 1});
  EXPECT_EQ(counter.count(), 9216u);
  ops::matmul(Tensor({3, 4}), Tensor({4, 5}));
  EXPECT_EQ(counter.count(), 9216u + 120u);
  ops::relu(Tensor({100}));
  EXPECT_EQ(counter.count(), 9336u);
}

TEST(Schedule, WarmupBoundaryAndPolyEndpoint) {
  LrSchedule s{0.5, 10, 100, 2.0};
  EXPECT_DOUBLE_EQ(s.at(10), 0.5 * std::pow(1.0 - 0.1, 2.0));
  EXPECT_DOUBLE_EQ(s.at(5), 0.5 * 0.5 * std::pow(0.95, 2.0));
  EXPECT_EQ(s.at(100), 0.0);
  EXPECT_EQ(s.at(250), 0.0);
  for (int t = 0; t <= 120; ++t) EXPECT_GE(s.at(t), 0.0);
  LrSchedule bad{0.1, 0, 0, 1.0};
  EXPECT_THROW(bad.at(1), ConfigError);
  EXPECT_THROW(Adam(AdamConfig{bad}), ConfigError);
}

TEST(Adam, SingleStepOnSquare) {
  AdamConfig cfg;
  cfg.schedule = LrSchedule{0.1, 0, 1'000'000'000, 0.9};
  BasicAdam<double> opt(cfg);
  std::vector<BasicNamedParam<double>> params{{"w", Tensor64({1}, {1.0}, true)}};
  Tape tape;
  {
    TapeScope scope(tape);
    auto loss = ops::sum(ops::mul(params[0].tensor, params[0].tensor));
    backward(loss, tape);
  }
  EXPECT_DOUBLE_EQ(params[0].tensor.grad()[0], 2.0);
  opt.step(params);
  EXPECT_NEAR(params[0].tensor.data()[0], 0.9, 1e-6);
}

TEST(Adam, DecoupledDecayShrinksWithZeroGradient) {
  AdamConfig cfg;
  cfg.schedule = LrSchedule{0.1, 0, 1'000'000, 1.0};
  cfg.weight_decay = 0.5;
  Adam opt(cfg);
  std::vector<NamedParam> params{{"w", Tensor({1}, {2.0f}, true)}};
  params[0].tensor.grad()[0] = 0.0f;
  opt.step(params);
  EXPECT_NEAR(params[0].tensor.data()[0], 2.0 - 0.1 * (1.0 - 1e-6) * 0.5 * 2.0, 1e-6);
  EXPECT_EQ(opt.state().at("w").first.size(), 1u);
}

TEST(Checkpoint, BitExactRoundTrip) {
  std::mt19937_64 rng(1);
  std::vector<NamedParam> params{{"enc.conv1.weight", random_tensor<float>({4, 2, 3, 3}, rng)},
                                 {"head.bias", random_tensor<float>({5}, rng)},
                                 {"scalar", Tensor::scalar(3.5f)}};
  params[1].tensor.data()[0] = std::numeric_limits<float>::quiet_NaN();
  const auto path = temp_file("roundtrip.dwt");
  save_checkpoint(path, params);
  const auto loaded = load_checkpoint(path);
  ASSERT_EQ(loaded.size(), params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    EXPECT_EQ(loaded[i].name, params[i].name);
    EXPECT_EQ(loaded[i].tensor.shape(), params[i].tensor.shape());
    EXPECT_EQ(std::memcmp(loaded[i].tensor.data().data(), params[i].tensor.data().data(),
                          params[i].tensor.numel() * sizeof(float)),
              0);
  }
  std::ifstream is(path, std::ios::binary);
  char magic[4];
  is.read(magic, 4);
  EXPECT_EQ(std::string(magic, 4), "DWT1");
}

TEST(Checkpoint, RejectsBadMagicTruncationAndShapeMismatch) {
  const auto path = temp_file("bad.dwt");
  {
    std::ofstream os(path, std::ios::binary);
    os << "XXXX";
  }
  try {
    load_checkpoint(path);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_EQ(e.kind(), DataError::Kind::kBadMagic);
  }
  std::vector<NamedParam> params{{"w", Tensor({3}, {1, 2, 3})}};
  save_checkpoint(path, params);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 1);
  try {
    load_checkpoint(path);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_EQ(e.kind(), DataError::Kind::kTruncated);
  }
  save_checkpoint(path, params);
  std::vector<NamedParam> other{{"w", Tensor({4})}};
  EXPECT_THROW(load_checkpoint_into(path, other), DataError);
}
