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
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "serforge/tensor.hpp"

namespace serforge {

using Rng = std::mt19937_64;

enum class ParamKind {
  kWeight,  // trainable, receives gradients
  kBuffer,  // running statistic, saved and averaged but never optimized
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  ParamKind kind = ParamKind::kWeight;
  bool frozen = false;

  bool trainable() const { return kind == ParamKind::kWeight && !frozen; }
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

// Ordered list of named tensors: the in-memory form of a checkpoint.
template <typename T>
using StateDict = std::vector<NamedTensor<T>>;

// Name -> Parameter map iterated in insertion order. Parameter addresses are
// stable for the lifetime of the set, so layers may hold raw pointers.
template <typename T>
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  Parameter<T>& add(const std::string& name, Tensor<T> value,
                    ParamKind kind = ParamKind::kWeight) {
    if (index_.count(name)) {
      throw DataError("duplicate parameter name '" + name + "'");
    }
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->grad = Tensor<T>(value.shape());
    p->value = std::move(value);
    p->kind = kind;
    index_.emplace(name, items_.size());
    items_.push_back(std::move(p));
    return *items_.back();
  }

  Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : items_[it->second].get();
  }
  const Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : items_[it->second].get();
  }
  Parameter<T>& at(const std::string& name) {
    auto* p = find(name);
    if (!p) throw DataError("no parameter named '" + name + "'");
    return *p;
  }

  std::size_t size() const { return items_.size(); }

  template <typename Fn>
  void for_each(Fn&& fn) {
    for (auto& p : items_) fn(*p);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    for (const auto& p : items_) fn(static_cast<const Parameter<T>&>(*p));
  }

  void zero_grad() {
    for (auto& p : items_) p->grad.fill(T{0});
  }

  // Freezes (or unfreezes) every parameter whose name starts with `prefix`.
  void set_frozen(const std::string& prefix, bool frozen) {
    for (auto& p : items_) {
      if (p->name.rfind(prefix, 0) == 0) p->frozen = frozen;
    }
  }

  StateDict<float> state_dict() const {
    StateDict<float> out;
    out.reserve(items_.size());
    for (const auto& p : items_) {
      out.push_back({p->name, p->value.template cast<float>()});
    }
    return out;
  }

  // Loads every tensor in `state`. Names and shapes must match exactly and
  // every parameter must be covered.
  void load_state_dict(const StateDict<float>& state) {
    if (state.size() != items_.size()) {
      throw FormatError("checkpoint has " + std::to_string(state.size()) +
                        " tensors, model expects " +
                        std::to_string(items_.size()));
    }
    for (const auto& entry : state) {
      auto* p = find(entry.name);
      if (!p) {
        throw FormatError("checkpoint tensor '" + entry.name +
                          "' does not exist in the model");
      }
      if (p->value.shape() != entry.value.shape()) {
        throw FormatError("checkpoint tensor '" + entry.name + "' has shape " +
                          shape_string(entry.value.shape()) +
                          ", model expects " + shape_string(p->value.shape()));
      }
      p->value = entry.value.template cast<T>();
    }
  }

  // Loads only the entries of `state` whose names start with `prefix`,
  // optionally rewriting that prefix.
  void load_prefixed(const StateDict<float>& state, const std::string& prefix,
                     const std::string& replacement) {
    for (const auto& entry : state) {
      if (entry.name.rfind(prefix, 0) != 0) continue;
      const std::string name = replacement + entry.name.substr(prefix.size());
      auto& p = at(name);
      if (p.value.shape() != entry.value.shape()) {
        throw FormatError("tensor '" + name + "' has shape " +
                          shape_string(entry.value.shape()) + ", expected " +
                          shape_string(p.value.shape()));
      }
      p.value = entry.value.template cast<T>();
    }
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

// He-uniform initialization: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
template <typename T>
Tensor<T> he_uniform(const Shape& shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> out(shape);
  for (auto& v : out.data()) v = static_cast<T>(dist(rng));
  return out;
}

}  // namespace serforge
