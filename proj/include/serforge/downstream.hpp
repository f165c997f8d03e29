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

// Downstream side: aggregators that map frame features to an utterance
// embedding, embedding fusion, and the linear emotion classifier.

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "serforge/ecapa.hpp"
#include "serforge/upstream.hpp"

namespace serforge {

inline constexpr std::size_t kNumEmotions = 4;

struct UtteranceEmbedding {
  std::string utt_id;
  Tensor<float> vector;  // [E]

  std::size_t dim() const { return vector.dim(0); }
};

// Mean over valid frames: [B, T, D] -> [B, D].
template <typename T>
Tensor<T> mean_pool(const SeqBatch<T>& x) {
  Tensor<T> out(Shape{x.batch(), x.channels()});
  for (std::size_t b = 0; b < x.batch(); ++b) {
    for (std::size_t t = 0; t < x.lengths[b]; ++t) {
      const T* f = x.frame(b, t);
      for (std::size_t c = 0; c < x.channels(); ++c) out.at(b, c) += f[c];
    }
    for (std::size_t c = 0; c < x.channels(); ++c)
      out.at(b, c) /= static_cast<T>(x.lengths[b]);
  }
  return out;
}

template <typename T>
SeqBatch<T> mean_pool_backward(const SeqBatch<T>& x, const Tensor<T>& grad_out) {
  SeqBatch<T> g = x.like(x.channels());
  for (std::size_t b = 0; b < x.batch(); ++b) {
    const T inv = T{1} / static_cast<T>(x.lengths[b]);
    for (std::size_t t = 0; t < x.lengths[b]; ++t) {
      T* f = g.frame(b, t);
      for (std::size_t c = 0; c < x.channels(); ++c) f[c] = grad_out.at(b, c) * inv;
    }
  }
  return g;
}

// Single-utterance mean pooling; `mask` (length T, nonzero = valid) selects
// the frames that count.
inline UtteranceEmbedding mean_pool(const FeatureSequence& features,
                                    const std::optional<std::vector<std::uint8_t>>& mask = {}) {
  const std::size_t frames = features.frames(), dims = features.dims();
  if (mask && mask->size() != frames) {
    throw DimensionError("mask length " + std::to_string(mask->size()) +
                         " != frame count " + std::to_string(frames));
  }
  std::vector<double> acc(dims, 0.0);
  std::size_t valid = 0;
  for (std::size_t t = 0; t < frames; ++t) {
    if (mask && !(*mask)[t]) continue;
    ++valid;
    for (std::size_t c = 0; c < dims; ++c) acc[c] += features.data.at(t, c);
  }
  if (valid == 0) {
    throw DataError("utterance '" + features.utt_id + "': every frame is masked");
  }
  Tensor<float> v(Shape{dims});
  for (std::size_t c = 0; c < dims; ++c) v[c] = static_cast<float>(acc[c] / static_cast<double>(valid));
  return {features.utt_id, std::move(v)};
}

inline UtteranceEmbedding late_fuse(const UtteranceEmbedding& a, const UtteranceEmbedding& b) {
  if (a.utt_id != b.utt_id) {
    throw DataError("late fusion of different utterances '" + a.utt_id +
                    "' and '" + b.utt_id + "'");
  }
  std::vector<float> v(a.vector.data().begin(), a.vector.data().end());
  v.insert(v.end(), b.vector.data().begin(), b.vector.data().end());
  const std::size_t n = v.size();
  return {a.utt_id, Tensor<float>(Shape{n}, std::move(v))};
}

// Linear classifier: weight [4, E], bias [4] -> logits [4].
inline Tensor<float> classify(const UtteranceEmbedding& e, const Tensor<float>& weight,
                              const Tensor<float>& bias) {
  return ops::linear_forward(e.vector, weight, bias);
}

inline std::size_t argmax(std::span<const float> logits) {
  return static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) -
                                  logits.begin());
}

enum class AggregatorKind { kMean, kEcapa };

inline std::string to_string(AggregatorKind k) {
  return k == AggregatorKind::kMean ? "mean" : "ecapa";
}

inline AggregatorKind parse_aggregator(const std::string& s) {
  if (s == "mean") return AggregatorKind::kMean;
  if (s == "ecapa") return AggregatorKind::kEcapa;
  throw ConfigError("unknown aggregator '" + s + "' (expected mean or ecapa)");
}

template <typename T>
class Aggregator {
 public:
  virtual ~Aggregator() = default;
  virtual Tensor<T> forward(const SeqBatch<T>& x, Mode mode) = 0;
  virtual SeqBatch<T> backward(const Tensor<T>& grad_out) = 0;
  virtual std::size_t output_dim() const = 0;
};

template <typename T>
class MeanPoolAggregator final : public Aggregator<T> {
 public:
  explicit MeanPoolAggregator(std::size_t dim) : dim_(dim) {}
  Tensor<T> forward(const SeqBatch<T>& x, Mode) override {
    input_ = x;
    return mean_pool(x);
  }
  SeqBatch<T> backward(const Tensor<T>& g) override { return mean_pool_backward(input_, g); }
  std::size_t output_dim() const override { return dim_; }

 private:
  std::size_t dim_;
  SeqBatch<T> input_;
};

template <typename T>
class EcapaAggregator final : public Aggregator<T> {
 public:
  EcapaAggregator(ParameterSet<T>& params, const std::string& prefix,
                  std::size_t input_dim, const EcapaConfig& cfg, Rng& rng)
      : net_(params, prefix, input_dim, cfg, rng) {}
  Tensor<T> forward(const SeqBatch<T>& x, Mode mode) override { return net_.forward(x, mode); }
  SeqBatch<T> backward(const Tensor<T>& g) override { return net_.backward(g); }
  std::size_t output_dim() const override { return net_.embedding_dim(); }
  EcapaTdnn<T>& net() { return net_; }

 private:
  EcapaTdnn<T> net_;
};

// Single-utterance ECAPA forward. `mask` marks valid frames; masked frames
// are dropped, matching a padded batch whose padding sits at those frames.
template <typename T>
UtteranceEmbedding ecapa_forward(const FeatureSequence& features, EcapaTdnn<T>& net,
                                 Mode mode,
                                 const std::optional<std::vector<std::uint8_t>>& mask = {}) {
  Tensor<T> x = features.data.template cast<T>();
  if (mask) {
    if (mask->size() != features.frames()) {
      throw DimensionError("mask length " + std::to_string(mask->size()) +
                           " != frame count " + std::to_string(features.frames()));
    }
    std::vector<T> kept;
    std::size_t n = 0;
    for (std::size_t t = 0; t < features.frames(); ++t) {
      if (!(*mask)[t]) continue;
      ++n;
      kept.insert(kept.end(), x.data().begin() + static_cast<std::ptrdiff_t>(t * x.dim(1)),
                  x.data().begin() + static_cast<std::ptrdiff_t>((t + 1) * x.dim(1)));
    }
    if (n == 0) throw DataError("utterance '" + features.utt_id + "': every frame is masked");
    x = Tensor<T>(Shape{n, features.dims()}, std::move(kept));
  }
  Tensor<T> emb = net.forward(SeqBatch<T>::single(x), mode);
  return {features.utt_id, emb.reshaped({emb.dim(1)}).template cast<float>()};
}

}  // namespace serforge
