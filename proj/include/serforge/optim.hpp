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

#include <cmath>
#include <string>
#include <unordered_map>

#include "serforge/parameters.hpp"

namespace serforge {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  struct Moments {
    Tensor<T> m;
    Tensor<T> v;
  };
  std::unordered_map<std::string, Moments> moments;
  std::size_t step = 0;
};

// One bias-corrected Adam update of every trainable parameter. Buffers and
// frozen parameters are left untouched.
template <typename T>
void adam_step(ParameterSet<T>& params, AdamState<T>& state,
               const AdamConfig& cfg = {}) {
  params.for_each([](const Parameter<T>& p) {
    if (!p.trainable()) return;
    if (!p.grad.all_finite()) {
      throw TrainingError("non-finite gradient in parameter '" + p.name + "'");
    }
  });
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  params.for_each([&](Parameter<T>& p) {
    if (!p.trainable()) return;
    auto [it, inserted] = state.moments.try_emplace(p.name);
    auto& mom = it->second;
    if (inserted) {
      mom.m = Tensor<T>(p.value.shape());
      mom.v = Tensor<T>(p.value.shape());
    } else if (mom.m.shape() != p.value.shape()) {
      throw DimensionError("optimizer state for '" + p.name + "' has shape " +
                           shape_string(mom.m.shape()) + ", parameter has " +
                           shape_string(p.value.shape()));
    }
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = static_cast<double>(p.grad[i]);
      const double m = cfg.beta1 * static_cast<double>(mom.m[i]) + (1.0 - cfg.beta1) * g;
      const double v = cfg.beta2 * static_cast<double>(mom.v[i]) + (1.0 - cfg.beta2) * g * g;
      mom.m[i] = static_cast<T>(m);
      mom.v[i] = static_cast<T>(v);
      const double update = cfg.lr * (m / c1) / (std::sqrt(v / c2) + cfg.eps);
      p.value[i] = static_cast<T>(static_cast<double>(p.value[i]) - update);
    }
  });
}

}  // namespace serforge
