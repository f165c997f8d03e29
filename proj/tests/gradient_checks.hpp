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

#pragma once

// Finite-difference gradient checks for every differentiable layer and for
// the two composed graphs. Each function builds a fresh random problem from
// `seed` and returns the worst relative error it saw.

#include <random>

#include "test_support.hpp"

namespace serforge::testing {

// Probe weights matching y, zero on padded frames.
inline Tensor<double> probe_like(const SeqBatch<double>& y, Rng& rng) {
  Tensor<double> r(y.data.shape());
  std::normal_distribution<double> g(0.0, 1.0);
  for (std::size_t b = 0; b < y.batch(); ++b)
    for (std::size_t t = 0; t < y.lengths[b]; ++t)
      for (std::size_t c = 0; c < y.channels(); ++c)
        r[(b * y.max_len() + t) * y.channels() + c] = g(rng);
  return r;
}

inline std::vector<std::size_t> random_lengths(std::size_t batch, std::size_t lo, std::size_t hi, Rng& rng) {
  std::uniform_int_distribution<std::size_t> u(lo, hi);
  std::vector<std::size_t> out(batch);
  for (auto& l : out) l = u(rng);
  return out;
}

inline double conv1d_gradient_error(std::uint64_t seed) {
  Rng rng(seed);
  ParameterSet<double> params;
  const std::size_t dilation = 1 + seed % 3;
  Conv1d<double> conv(params, "conv", 3, 4, 3, dilation, rng);
  auto x = random_batch(random_lengths(3, 2, 9, rng), 3, rng);
  const auto r = probe_like(conv.forward(x), rng);
  return check_module(
      params, x.data.data(), valid_coords(x), [&] { return dot(r, conv.forward(x).data); },
      [&] {
        SeqBatch<double> g = x.like(4);
        g.data = r;
        return to_vector<double>(conv.backward(g).data.data());
      },
      rng);
}

inline double linear_gradient_error(std::uint64_t seed) {
  Rng rng(seed);
  ParameterSet<double> params;
  Linear<double> lin(params, "fc", 5, 3, rng);
  Tensor<double> x = random_tensor({4, 5}, rng);
  const Tensor<double> r = random_tensor({4, 3}, rng);
  return check_module(
      params, x.data(), all_coords(x.size()), [&] { return dot(r, lin.forward(x)); },
      [&] { return to_vector<double>(lin.backward(r).data()); }, rng);
}

inline double batchnorm_gradient_error(std::uint64_t seed) {
  Rng rng(seed);
  ParameterSet<double> params;
  BatchNorm1d<double> bn(params, "bn", 4);
  // Non-trivial affine parameters.
  params.at("bn.weight").value = random_tensor({4}, rng, 0.5, 1.5);
  params.at("bn.bias").value = random_tensor({4}, rng);
  auto x = random_batch(random_lengths(3, 2, 6, rng), 4, rng);
  const auto r = probe_like(x, rng);
  return check_module(
      params, x.data.data(), valid_coords(x),
      [&] { return dot(r, bn.forward(x, Mode::kTrain).data); },
      [&] {
        SeqBatch<double> g = x.like(4);
        g.data = r;
        return to_vector<double>(bn.backward(g).data.data());
      },
      rng);
}

// relu, tanh, sigmoid and softmax against their own backward functions.
inline double activation_gradient_error(std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> x = random_tensor({3, 5}, rng, -2.0, 2.0);
  // Keep relu inputs away from the kink.
  for (auto& v : x.data())
    if (std::abs(v) < 0.05) v = v < 0 ? -0.05 : 0.05;
  const Tensor<double> r = random_tensor({3, 5}, rng);
  double worst = 0.0;
  const auto coords = all_coords(x.size());
  auto check = [&](auto fwd, auto bwd) {
    const auto y = fwd(x);
    const auto analytic = to_vector<double>(bwd(y, r).data());
    const auto numeric = numeric_gradient(x.data(), coords, [&] { return dot(r, fwd(x)); });
    worst = std::max(worst, relative_error(analytic, numeric));
  };
  check([](const Tensor<double>& t) { return ops::relu(t); },
        [](const Tensor<double>& y, const Tensor<double>& g) { return ops::relu_backward(y, g); });
  check([](const Tensor<double>& t) { return ops::tanh(t); },
        [](const Tensor<double>& y, const Tensor<double>& g) { return ops::tanh_backward(y, g); });
  check([](const Tensor<double>& t) { return ops::sigmoid(t); },
        [](const Tensor<double>& y, const Tensor<double>& g) { return ops::sigmoid_backward(y, g); });
  for (std::size_t axis : {0u, 1u}) {
    check([axis](const Tensor<double>& t) { return ops::softmax(t, axis); },
          [axis](const Tensor<double>& y, const Tensor<double>& g) {
            return ops::softmax_backward(y, g, axis);
          });
  }
  return worst;
}

inline double attentive_pooling_gradient_error(std::uint64_t seed) {
  Rng rng(seed);
  ParameterSet<double> params;
  AttentiveStatsPool<double> pool(params, "pool", 4, 3, rng);
  auto h = random_batch(random_lengths(3, 2, 8, rng), 4, rng);
  const Tensor<double> r = random_tensor({3, 8}, rng);
  return check_module(
      params, h.data.data(), valid_coords(h), [&] { return dot(r, pool.forward(h, Mode::kTrain)); },
      [&] { return to_vector<double>(pool.backward(r).data.data()); }, rng);
}

inline double cross_entropy_gradient_error(std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> logits = random_tensor({5, 4}, rng, -3.0, 3.0);
  std::uniform_int_distribution<int> cls(0, 3);
  std::vector<int> labels(5);
  for (auto& l : labels) l = cls(rng);
  const auto analytic = to_vector<double>(ops::cross_entropy<double>(logits, labels).grad.data());
  const auto numeric = numeric_gradient(logits.data(), all_coords(logits.size()), [&] {
    return ops::cross_entropy<double>(logits, labels).loss;
  });
  return relative_error(analytic, numeric);
}

// Cross-entropy of a whole model against random labels, checked over the
// model parameters and the first input.
inline double model_gradient_error(const ModelGraph& graph, std::uint64_t seed,
                                   std::vector<std::size_t> lengths) {
  Rng rng(seed);
  SerModel<double> model(graph, seed);
  std::vector<SeqBatch<double>> inputs;
  for (const auto& b : graph.branches) inputs.push_back(random_batch(lengths, b.input_dim, rng));
  std::uniform_int_distribution<int> cls(0, static_cast<int>(graph.num_classes) - 1);
  std::vector<int> labels(lengths.size());
  for (auto& l : labels) l = cls(rng);
  auto run = [&] {
    return ops::cross_entropy<double>(model.forward(inputs, Mode::kTrain), labels).loss;
  };
  // The model does not return input gradients; probe parameters only.
  std::vector<double> none;
  return check_module(
      model.params(), none, {}, run,
      [&] {
        auto ce = ops::cross_entropy<double>(model.forward(inputs, Mode::kTrain), labels);
        model.backward(ce.grad);
        return std::vector<double>{};
      },
      rng, 25, 1e-6);
}

inline ModelGraph toy_mean_graph(std::size_t input_dim = 6) {
  ModelGraph g;
  g.branches = {{SourceTag::toy(), input_dim, true}};
  g.fusion = Fusion::kNone;
  g.aggregators = {AggregatorKind::kMean};
  return g;
}

inline EcapaConfig small_ecapa() {
  EcapaConfig c;
  c.channels = 16;
  c.res2_scale = 4;
  c.se_bottleneck = 8;
  c.attention_channels = 8;
  c.embedding_dim = 8;
  return c;
}

inline ModelGraph small_ecapa_graph(std::size_t input_dim = 5) {
  ModelGraph g;
  g.branches = {{SourceTag::file("feat"), input_dim, false}};
  g.fusion = Fusion::kNone;
  g.aggregators = {AggregatorKind::kEcapa};
  g.ecapa = small_ecapa();
  return g;
}

inline double toy_graph_gradient_error(std::uint64_t seed) {
  Rng rng(seed);
  return model_gradient_error(toy_mean_graph(), seed, random_lengths(3, 3, 8, rng));
}

inline double ecapa_graph_gradient_error(std::uint64_t seed) {
  Rng rng(seed);
  return model_gradient_error(small_ecapa_graph(), seed, random_lengths(3, 4, 9, rng));
}

}  // namespace serforge::testing
