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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "serforge/error.hpp"

namespace serforge {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

// Dense row-major tensor. A default-constructed tensor is "undefined": it
// has rank 0 and no storage. Every defined tensor has strictly positive
// dimensions and product(shape) == size().
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_size(shape_)) {
      throw DimensionError("tensor of shape " + shape_string(shape_) +
                           " needs " + std::to_string(shape_size(shape_)) +
                           " values, got " + std::to_string(data_.size()));
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool defined() const { return !shape_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }
  T& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const T& at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  Tensor reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (shape_[i] == 0) {
        throw DimensionError("tensor shape " + shape_string(shape_) +
                             " has a zero extent on axis " + std::to_string(i));
      }
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

// Throws DimensionError naming `what` unless the tensor has exactly `rank`
// axes.
template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const std::string& what) {
  if (t.rank() != rank) {
    throw DimensionError(what + " must have rank " + std::to_string(rank) +
                         ", got shape " + shape_string(t.shape()));
  }
}

template <typename T>
void require_finite(const Tensor<T>& t, const std::string& layer) {
  if (!t.all_finite()) {
    throw NumericError("non-finite activation in layer '" + layer + "'");
  }
}

// A batch of variable-length frame sequences stored padded as [B, Tmax, C].
// Frames at t >= lengths[b] are padding: every layer reads only valid frames
// and writes zeros into padded positions.
template <typename T>
struct SeqBatch {
  Tensor<T> data;
  std::vector<std::size_t> lengths;

  SeqBatch() = default;
  SeqBatch(std::size_t batch, std::size_t max_len, std::size_t channels,
           std::vector<std::size_t> lens)
      : data(Shape{batch, max_len, channels}), lengths(std::move(lens)) {
    if (lengths.size() != batch) {
      throw DimensionError("batch of " + std::to_string(batch) +
                           " sequences given " +
                           std::to_string(lengths.size()) + " lengths");
    }
    for (auto len : lengths) {
      if (len == 0 || len > max_len) {
        throw DimensionError("sequence length " + std::to_string(len) +
                             " outside [1," + std::to_string(max_len) + "]");
      }
    }
  }

  std::size_t batch() const { return data.dim(0); }
  std::size_t max_len() const { return data.dim(1); }
  std::size_t channels() const { return data.dim(2); }

  T* frame(std::size_t b, std::size_t t) {
    return data.data().data() + (b * max_len() + t) * channels();
  }
  const T* frame(std::size_t b, std::size_t t) const {
    return data.data().data() + (b * max_len() + t) * channels();
  }

  // Same batch geometry, different channel count, zero filled.
  SeqBatch like(std::size_t channels) const {
    return SeqBatch(batch(), max_len(), channels, lengths);
  }

  // Wraps a single [T, C] sequence.
  static SeqBatch single(const Tensor<T>& seq) {
    require_rank(seq, 2, "sequence");
    SeqBatch out(1, seq.dim(0), seq.dim(1), {seq.dim(0)});
    std::copy(seq.data().begin(), seq.data().end(), out.data.data().begin());
    return out;
  }

  // Pads a list of [T_i, C] sequences.
  static SeqBatch pack(const std::vector<const Tensor<T>*>& seqs) {
    if (seqs.empty()) throw DataError("cannot pack an empty batch");
    const std::size_t channels = seqs.front()->dim(1);
    std::size_t max_len = 0;
    std::vector<std::size_t> lens;
    for (const auto* s : seqs) {
      require_rank(*s, 2, "sequence");
      if (s->dim(1) != channels) {
        throw DimensionError("batch mixes feature dims " +
                             std::to_string(channels) + " and " +
                             std::to_string(s->dim(1)));
      }
      lens.push_back(s->dim(0));
      max_len = std::max(max_len, s->dim(0));
    }
    SeqBatch out(seqs.size(), max_len, channels, lens);
    for (std::size_t b = 0; b < seqs.size(); ++b) {
      std::copy(seqs[b]->data().begin(), seqs[b]->data().end(), out.frame(b, 0));
    }
    return out;
  }

  // Extracts the valid frames of item b as [len, C].
  Tensor<T> unpack(std::size_t b) const {
    const std::size_t len = lengths[b];
    Tensor<T> out(Shape{len, channels()});
    std::copy(frame(b, 0), frame(b, 0) + len * channels(), out.data().begin());
    return out;
  }
};

template <typename T>
SeqBatch<T> slice_channels(const SeqBatch<T>& x, std::size_t begin,
                           std::size_t width) {
  if (begin + width > x.channels()) {
    throw DimensionError("channel slice [" + std::to_string(begin) + "," +
                         std::to_string(begin + width) + ") exceeds " +
                         std::to_string(x.channels()) + " channels");
  }
  SeqBatch<T> out = x.like(width);
  for (std::size_t b = 0; b < x.batch(); ++b) {
    for (std::size_t t = 0; t < x.lengths[b]; ++t) {
      std::copy_n(x.frame(b, t) + begin, width, out.frame(b, t));
    }
  }
  return out;
}

// Writes `src` into channels [begin, begin + src.channels()) of `dst`.
template <typename T>
void assign_channels(SeqBatch<T>& dst, const SeqBatch<T>& src,
                     std::size_t begin) {
  for (std::size_t b = 0; b < dst.batch(); ++b) {
    for (std::size_t t = 0; t < dst.lengths[b]; ++t) {
      std::copy_n(src.frame(b, t), src.channels(), dst.frame(b, t) + begin);
    }
  }
}

template <typename T>
SeqBatch<T> concat_channels(const std::vector<const SeqBatch<T>*>& parts) {
  std::size_t total = 0;
  for (const auto* p : parts) total += p->channels();
  SeqBatch<T> out = parts.front()->like(total);
  std::size_t offset = 0;
  for (const auto* p : parts) {
    assign_channels(out, *p, offset);
    offset += p->channels();
  }
  return out;
}

template <typename T>
void add_inplace(SeqBatch<T>& dst, const SeqBatch<T>& src) {
  auto d = dst.data.data();
  auto s = src.data.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

template <typename T>
void add_inplace(Tensor<T>& dst, const Tensor<T>& src) {
  if (dst.shape() != src.shape()) {
    throw DimensionError("cannot add " + shape_string(src.shape()) + " into " +
                         shape_string(dst.shape()));
  }
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace serforge
