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

#include <array>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "serforge/error.hpp"

namespace serforge {

using WarningSink = std::function<void(const std::string&)>;

namespace detail {
inline void check_pairs(std::span<const int> predictions, std::span<const int> labels) {
  if (labels.empty()) throw DataError("accuracy of an empty prediction set");
  if (predictions.size() != labels.size()) {
    throw DataError(std::to_string(predictions.size()) + " predictions for " +
                    std::to_string(labels.size()) + " labels");
  }
}
}  // namespace detail

// Weighted accuracy: percentage of correct predictions.
inline double wacc(std::span<const int> predictions, std::span<const int> labels) {
  detail::check_pairs(predictions, labels);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i];
  return 100.0 * static_cast<double>(correct) / static_cast<double>(labels.size());
}

// Unweighted accuracy: mean per-class recall over the classes that occur in
// `labels`. With `num_classes` set, classes in [0, num_classes) that never
// occur are excluded from the mean and reported through `warn`.
inline double uacc(std::span<const int> predictions, std::span<const int> labels,
                   int num_classes = 0, const WarningSink& warn = {}) {
  detail::check_pairs(predictions, labels);
  std::map<int, std::pair<std::size_t, std::size_t>> per_class;  // correct, total
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& [correct, total] = per_class[labels[i]];
    ++total;
    correct += predictions[i] == labels[i];
  }
  for (int c = 0; c < num_classes; ++c) {
    if (!per_class.count(c) && warn) {
      warn("class " + std::to_string(c) + " has no labelled examples; excluded from UACC");
    }
  }
  double sum = 0.0;
  for (const auto& [cls, counts] : per_class) {
    sum += static_cast<double>(counts.first) / static_cast<double>(counts.second);
  }
  return 100.0 * sum / static_cast<double>(per_class.size());
}

template <std::size_t N>
struct ConfusionMatrix {
  std::array<std::array<std::size_t, N>, N> counts{};  // [true][predicted]

  static ConfusionMatrix from(std::span<const int> predictions, std::span<const int> labels) {
    detail::check_pairs(predictions, labels);
    ConfusionMatrix m;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0 || labels[i] >= static_cast<int>(N) || predictions[i] < 0 ||
          predictions[i] >= static_cast<int>(N)) {
        throw DataError("class index outside [0," + std::to_string(N) + ") at position " +
                        std::to_string(i));
      }
      ++m.counts[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(predictions[i])];
    }
    return m;
  }

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& row : counts)
      for (auto v : row) n += v;
    return n;
  }
  std::size_t trace() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < N; ++i) n += counts[i][i];
    return n;
  }
  std::size_t row_sum(std::size_t cls) const {
    std::size_t n = 0;
    for (auto v : counts[cls]) n += v;
    return n;
  }
};

}  // namespace serforge
