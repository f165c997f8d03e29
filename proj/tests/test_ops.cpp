// Copyright 2026 The ser-forge Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#include <gtest/gtest.h>

#include <cmath>

#include "gradient_checks.hpp"

namespace serforge::testing {
namespace {

TEST(Tensor, RejectsZeroDimensions) {
  EXPECT_THROW(Tensor<float>(Shape{0, 3}), DimensionError);
}

TEST(Tensor, PackAndUnpackRoundTrip) {
  Tensor<float> a(Shape{2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  Tensor<float> b(Shape{4, 3}, 7.0f);
  auto batch = SeqBatch<float>::pack({&a, &b});
  EXPECT_EQ(batch.max_len(), 4u);
  EXPECT_EQ(batch.unpack(0), a);
  EXPECT_EQ(batch.unpack(1), b);
  EXPECT_EQ(batch.frame(0, 3)[2], 0.0f);  // padding is zero
}

TEST(Tensor, PackRejectsMixedFeatureDims) {
  Tensor<float> a(Shape{2, 3}), b(Shape{2, 4});
  EXPECT_THROW(SeqBatch<float>::pack({&a, &b}), DimensionError);
}

TEST(Conv1d, IdentityKernelCopiesInput) {
  Rng rng(1);
  Tensor<double> x = random_tensor({9, 1}, rng);
  Tensor<double> w(Shape{1, 1, 3}, std::vector<double>{0, 1, 0});
  Tensor<double> b(Shape{1});
  EXPECT_EQ(ops::conv1d_forward(x, w, b, 1), x);
}

TEST(Conv1d, ZeroInputGivesBias) {
  Rng rng(2);
  Tensor<double> x(Shape{6, 3});
  Tensor<double> w = random_tensor({4, 3, 5}, rng);
  Tensor<double> b(Shape{4}, std::vector<double>{0.5, -1, 2, 3});
  auto y = ops::conv1d_forward(x, w, b, 2);
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y.at(t, c), b[c]);
}

TEST(Conv1d, MatchesDirectSum) {
  // Zero-padded "same" convolution written out longhand.
  Rng rng(3);
  const std::size_t T = 7, cin = 2, cout = 3, k = 3, dil = 2;
  Tensor<double> x = random_tensor({T, cin}, rng);
  Tensor<double> w = random_tensor({cout, cin, k}, rng);
  Tensor<double> b = random_tensor({cout}, rng);
  auto y = ops::conv1d_forward(x, w, b, dil);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t o = 0; o < cout; ++o) {
      double s = b[o];
      for (std::size_t j = 0; j < k; ++j) {
        const long src = static_cast<long>(t) + (static_cast<long>(j) - 1) * static_cast<long>(dil);
        if (src < 0 || src >= static_cast<long>(T)) continue;
        for (std::size_t i = 0; i < cin; ++i) s += w.at(o, i, j) * x.at(static_cast<std::size_t>(src), i);
      }
      EXPECT_NEAR(y.at(t, o), s, 1e-12);
    }
  }
}

TEST(Conv1d, RejectsChannelMismatchNamingAxes) {
  Tensor<double> x(Shape{5, 3});
  Tensor<double> w(Shape{2, 4, 3});
  Tensor<double> b(Shape{2});
  try {
    ops::conv1d_forward(x, w, b, 1);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("4"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("3"), std::string::npos) << e.what();
  }
}

TEST(Conv1d, GradientOnSevenByTwoInput) {
  // 7x2 input, 3x2x3 weight, step 1e-4, relative error < 1e-5.
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    ParameterSet<double> params;
    Conv1d<double> conv(params, "conv", 2, 3, 3, 1, rng);
    auto x = SeqBatch<double>::single(random_tensor({7, 2}, rng));
    const Tensor<double> r = random_tensor({1, 7, 3}, rng);
    const double err = check_module(
        params, x.data.data(), valid_coords(x), [&] { return dot(r, conv.forward(x).data); },
        [&] {
          SeqBatch<double> g = x.like(3);
          g.data = r;
          return to_vector<double>(conv.backward(g).data.data());
        },
        rng, 1000);
    EXPECT_LT(err, 1e-5) << "seed " << seed;
  }
}

TEST(Linear, WorkedExample) {
  Tensor<double> x(Shape{2}, std::vector<double>{1, 2});
  Tensor<double> w(Shape{2, 2}, std::vector<double>{1, 1, 0, 1});
  Tensor<double> b(Shape{2}, std::vector<double>{0, 1});
  auto y = ops::linear_forward(x, w, b);
  EXPECT_DOUBLE_EQ(y[0], 3.0);
  EXPECT_DOUBLE_EQ(y[1], 3.0);
}

TEST(Linear, IdentityWeightCopiesInput) {
  Rng rng(4);
  Tensor<double> x = random_tensor({3, 4}, rng);
  Tensor<double> w(Shape{4, 4});
  for (std::size_t i = 0; i < 4; ++i) w.at(i, i) = 1.0;
  EXPECT_EQ(ops::linear_forward(x, w, Tensor<double>(Shape{4})), x);
}

TEST(Linear, TrailingAxisMismatch) {
  EXPECT_THROW(ops::linear_forward(Tensor<double>(Shape{2, 3}), Tensor<double>(Shape{2, 4}),
                                   Tensor<double>(Shape{2})),
               DimensionError);
}

TEST(Linear, GradientBelowOneInTenThousandth) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) EXPECT_LT(linear_gradient_error(seed), 1e-5);
}

TEST(BatchNorm, ConstantChannelsGiveBetaInTrainMode) {
  Tensor<double> x(Shape{5, 2});
  for (std::size_t t = 0; t < 5; ++t) {
    x.at(t, 0) = 3.0;
    x.at(t, 1) = -1.0;
  }
  Tensor<double> gamma(Shape{2}, 2.0), beta(Shape{2}, std::vector<double>{0.25, -0.5});
  Tensor<double> rm(Shape{2}), rv(Shape{2}, 1.0);
  auto y = ops::batchnorm1d(x, gamma, beta, rm, rv, Mode::kTrain);
  for (std::size_t t = 0; t < 5; ++t) {
    EXPECT_NEAR(y.at(t, 0), 0.25, 1e-12);
    EXPECT_NEAR(y.at(t, 1), -0.5, 1e-12);
  }
}

TEST(BatchNorm, EvalModeWithUnitStatsIsNearIdentity) {
  Rng rng(5);
  Tensor<double> x = random_tensor({6, 3}, rng);
  Tensor<double> gamma(Shape{3}, 1.0), beta(Shape{3}), rm(Shape{3}), rv(Shape{3}, 1.0);
  auto y = ops::batchnorm1d(x, gamma, beta, rm, rv, Mode::kEval);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i], 1e-5);
}

TEST(BatchNorm, RunningStatisticsUpdate) {
  // momentum 0.1; running variance takes the unbiased batch variance.
  Tensor<double> x(Shape{4, 1}, std::vector<double>{1, 2, 3, 6});
  Tensor<double> gamma(Shape{1}, 1.0), beta(Shape{1}), rm(Shape{1}), rv(Shape{1}, 1.0);
  ops::batchnorm1d(x, gamma, beta, rm, rv, Mode::kTrain);
  const double mean = 3.0, unbiased = (4 + 1 + 0 + 9) / 3.0;
  EXPECT_NEAR(rm[0], 0.1 * mean, 1e-12);
  EXPECT_NEAR(rv[0], 0.9 + 0.1 * unbiased, 1e-12);
}

TEST(BatchNorm, ChannelMismatch) {
  Tensor<double> x(Shape{4, 3});
  Tensor<double> g(Shape{2}, 1.0), b(Shape{2}), rm(Shape{2}), rv(Shape{2}, 1.0);
  EXPECT_THROW(ops::batchnorm1d(x, g, b, rm, rv, Mode::kEval), DimensionError);
}

TEST(BatchNorm, PaddingIsIgnored) {
  Rng rng(6);
  auto x = random_batch({5, 2}, 3, rng);
  for (std::size_t t = 2; t < 5; ++t)
    for (std::size_t c = 0; c < 3; ++c) x.frame(1, t)[c] = 1e6;  // garbage in padding
  Tensor<double> g(Shape{3}, 1.0), b(Shape{3}), rm(Shape{3}), rv(Shape{3}, 1.0);
  Tensor<double> rm2 = rm, rv2 = rv;
  auto y = ops::batchnorm1d_forward(x, g, b, rm, rv, Mode::kTrain);
  auto clean = random_batch({5, 2}, 3, rng);
  clean.data = x.data;
  for (std::size_t t = 2; t < 5; ++t)
    for (std::size_t c = 0; c < 3; ++c) clean.frame(1, t)[c] = 0.0;
  auto y2 = ops::batchnorm1d_forward(clean, g, b, rm2, rv2, Mode::kTrain);
  for (std::size_t i = 0; i < y.data.size(); ++i) EXPECT_NEAR(y.data[i], y2.data[i], 1e-12);
  for (std::size_t t = 2; t < 5; ++t) EXPECT_EQ(y.frame(1, t)[0], 0.0);
}

TEST(Activations, SoftmaxOfZerosIsUniform) {
  auto y = ops::softmax(Tensor<double>(Shape{2}), 0);
  EXPECT_DOUBLE_EQ(y[0], 0.5);
  EXPECT_DOUBLE_EQ(y[1], 0.5);
}

TEST(Activations, SoftmaxShiftInvariance) {
  Rng rng(7);
  Tensor<double> x = random_tensor({3, 5}, rng, -4, 4);
  Tensor<double> shifted = x;
  for (auto& v : shifted.data()) v += 17.25;
  auto a = ops::softmax(x, 1), b = ops::softmax(shifted, 1);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
}

TEST(Activations, ReluGradient) {
  Tensor<double> x(Shape{2}, std::vector<double>{2.0, -2.0});
  auto g = ops::relu_backward(ops::relu(x), Tensor<double>(Shape{2}, 1.0));
  EXPECT_EQ(g[0], 1.0);
  EXPECT_EQ(g[1], 0.0);
}

TEST(CrossEntropy, UniformLogitsGiveLnFour) {
  Tensor<double> logits(Shape{3, 4});
  std::vector<int> labels{0, 2, 3};
  EXPECT_NEAR(ops::cross_entropy<double>(logits, labels).loss, std::log(4.0), 1e-12);
  EXPECT_NEAR(ops::cross_entropy<double>(logits, labels).loss, 1.386294, 1e-6);
}

TEST(CrossEntropy, LossVanishesWithMargin) {
  double previous = 1e9;
  for (double margin : {1.0, 5.0, 20.0, 50.0}) {
    Tensor<double> logits(Shape{1, 4});
    logits.at(0, 2) = margin;
    std::vector<int> labels{2};
    const double loss = ops::cross_entropy<double>(logits, labels).loss;
    EXPECT_LT(loss, previous);
    previous = loss;
  }
  EXPECT_LT(previous, 1e-15);
}

TEST(CrossEntropy, OutOfRangeLabelNamesRecord) {
  Tensor<double> logits(Shape{3, 4});
  std::vector<int> labels{0, 4, 1};
  try {
    ops::cross_entropy<double>(logits, labels);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("1"), std::string::npos) << e.what();
  }
}

TEST(CrossEntropy, GradientBelowOneInOneHundredThousand) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) EXPECT_LT(cross_entropy_gradient_error(seed), 1e-5);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  ParameterSet<double> params;
  auto& p = params.add("w", Tensor<double>(Shape{3}, std::vector<double>{1, -2, 3}));
  AdamState<double> state;
  for (int i = 0; i < 5; ++i) adam_step(params, state);
  EXPECT_EQ(p.value, Tensor<double>(Shape{3}, std::vector<double>{1, -2, 3}));
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // m1 = 0.1 g, v1 = 0.001 g^2; bias correction gives m/v^.5 = 1.
  ParameterSet<double> params;
  auto& p = params.add("w", Tensor<double>(Shape{1}));
  p.grad[0] = 1.0;
  AdamState<double> state;
  AdamConfig cfg;
  cfg.lr = 0.1;
  adam_step(params, state, cfg);
  EXPECT_NEAR(p.value[0], -0.1, 1e-6);
}

TEST(Adam, ConvergesOnQuadratic) {
  ParameterSet<double> params;
  auto& w = params.add("w", Tensor<double>(Shape{1}, 2.0));
  AdamState<double> state;
  AdamConfig cfg;
  cfg.lr = 0.1;
  for (int i = 0; i < 100; ++i) {
    w.grad[0] = 2.0 * (w.value[0] - 3.0);
    adam_step(params, state, cfg);
  }
  EXPECT_LT(std::abs(w.value[0] - 3.0), 1e-2);
}

TEST(Adam, MatchesHandWrittenRecurrence) {
  ParameterSet<double> params;
  auto& w = params.add("w", Tensor<double>(Shape{1}));
  AdamState<double> state;
  AdamConfig cfg;
  cfg.lr = 0.1;
  double ref = 0.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 100; ++t) {
    w.grad[0] = 2.0 * (w.value[0] - 3.0);
    adam_step(params, state, cfg);
    const double g = 2.0 * (ref - 3.0);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    ref -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    ASSERT_NEAR(w.value[0], ref, 1e-12) << "step " << t;
  }
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  ParameterSet<double> params;
  params.add("encoder.w", Tensor<double>(Shape{2}));
  params.at("encoder.w").grad[1] = std::numeric_limits<double>::quiet_NaN();
  AdamState<double> state;
  try {
    adam_step(params, state);
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.w"), std::string::npos);
  }
}

TEST(Adam, SkipsFrozenParametersAndBuffers) {
  ParameterSet<double> params;
  auto& a = params.add("a", Tensor<double>(Shape{1}));
  auto& b = params.add("b", Tensor<double>(Shape{1}), ParamKind::kBuffer);
  a.grad[0] = b.grad[0] = 1.0;
  params.set_frozen("a", true);
  AdamState<double> state;
  adam_step(params, state);
  EXPECT_EQ(a.value[0], 0.0);
  EXPECT_EQ(b.value[0], 0.0);
}

TEST(Parameters, LoadStateDictChecksNamesAndShapes) {
  ParameterSet<float> params;
  params.add("x", Tensor<float>(Shape{2}));
  StateDict<float> wrong_shape{{"x", Tensor<float>(Shape{3})}};
  StateDict<float> wrong_name{{"y", Tensor<float>(Shape{2})}};
  EXPECT_THROW(params.load_state_dict(wrong_shape), FormatError);
  EXPECT_THROW(params.load_state_dict(wrong_name), FormatError);
  StateDict<float> good{{"x", Tensor<float>(Shape{2}, 4.0f)}};
  params.load_state_dict(good);
  EXPECT_EQ(params.at("x").value[1], 4.0f);
}

}  // namespace
}  // namespace serforge::testing
