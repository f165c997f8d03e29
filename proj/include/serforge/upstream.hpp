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

// Upstream side: sources that turn an utterance into a frame-level feature
// matrix. Three kinds exist: the log-mel filterbank, SERF files produced by
// an external model, and a small trainable convolutional encoder.

#include <cstdlib>
#include <filesystem>
#include <string>
#include <string_view>

#include "serforge/audio.hpp"
#include "serforge/layers.hpp"
#include "serforge/serialization.hpp"

namespace serforge {

struct SourceTag {
  enum class Kind { kFbank, kFile, kToy };

  Kind kind = Kind::kFbank;
  std::string name;  // only for kFile

  static SourceTag fbank() { return {Kind::kFbank, {}}; }
  static SourceTag toy() { return {Kind::kToy, {}}; }
  static SourceTag file(std::string name) { return {Kind::kFile, std::move(name)}; }

  // "fbank" | "toy" | "file:<name>"
  static SourceTag parse(std::string_view text) {
    if (text == "fbank") return fbank();
    if (text == "toy") return toy();
    if (text.rfind("file:", 0) == 0 && text.size() > 5) {
      return file(std::string(text.substr(5)));
    }
    throw ConfigError("unknown upstream source '" + std::string(text) +
                      "' (expected fbank, toy or file:<name>)");
  }

  std::string str() const {
    switch (kind) {
      case Kind::kFbank: return "fbank";
      case Kind::kToy: return "toy";
      case Kind::kFile: return "file:" + name;
    }
    return {};
  }

  friend bool operator==(const SourceTag&, const SourceTag&) = default;
};

struct FeatureSequence {
  std::string utt_id;
  SourceTag source;
  Tensor<float> data;  // [T, D]

  std::size_t frames() const { return data.dim(0); }
  std::size_t dims() const { return data.dim(1); }
};

inline void save_features(const std::filesystem::path& path, const Tensor<float>& m) {
  io::write_file(path, encode_feature_matrix(m));
}

// The utterance id is the filename stem.
inline FeatureSequence load_features(const std::filesystem::path& path,
                                     std::string source_name = "") {
  try {
    FeatureSequence seq;
    seq.utt_id = path.stem().string();
    seq.source = SourceTag::file(source_name.empty() ? "serf" : std::move(source_name));
    seq.data = decode_feature_matrix(io::read_file(path));
    return seq;
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

inline FeatureSequence fbank_upstream(const std::string& utt_id, const Waveform& wave,
                                      const FbankConfig& cfg = {}) {
  return {utt_id, SourceTag::fbank(), log_mel_fbank(wave, cfg)};
}

inline constexpr std::size_t kToyEncoderWidth = 64;

// Two conv1d(kernel 3) -> relu -> batchnorm blocks over filterbank frames.
// Frame rate is preserved; output width is kToyEncoderWidth.
template <typename T>
class ToyEncoder {
 public:
  ToyEncoder(ParameterSet<T>& params, const std::string& prefix,
             std::size_t input_dim, Rng& rng)
      : block1_(params, prefix + ".block1", input_dim, kToyEncoderWidth, 3, 1, rng),
        block2_(params, prefix + ".block2", kToyEncoderWidth, kToyEncoderWidth, 3, 1, rng) {}

  SeqBatch<T> forward(const SeqBatch<T>& fbank, Mode mode) {
    return block2_.forward(block1_.forward(fbank, mode), mode);
  }

  SeqBatch<T> backward(const SeqBatch<T>& grad_out) {
    return block1_.backward(block2_.backward(grad_out));
  }

  std::size_t input_dim() const { return block1_.in_channels(); }
  std::size_t output_dim() const { return kToyEncoderWidth; }

 private:
  TdnnBlock<T> block1_;
  TdnnBlock<T> block2_;
};

template <typename T>
FeatureSequence toy_encode(const std::string& utt_id, const Waveform& wave,
                           ToyEncoder<T>& encoder, Mode mode,
                           const FbankConfig& cfg = {}) {
  const auto fb = log_mel_fbank(wave, cfg).template cast<T>();
  auto out = encoder.forward(SeqBatch<T>::single(fb), mode);
  return {utt_id, SourceTag::toy(), out.unpack(0).template cast<float>()};
}

inline constexpr std::size_t kEarlyFusionTolerance = 2;

inline std::size_t fused_length(std::size_t ta, std::size_t tb, const std::string& utt_id) {
  const std::size_t diff = ta > tb ? ta - tb : tb - ta;
  if (diff > kEarlyFusionTolerance) {
    throw AlignmentError("utterance '" + utt_id + "': frame counts " +
                         std::to_string(ta) + " and " + std::to_string(tb) +
                         " differ by more than " +
                         std::to_string(kEarlyFusionTolerance));
  }
  return std::min(ta, tb);
}

// Frame-wise concatenation after truncating both streams to the shorter one.
inline FeatureSequence early_fuse(const FeatureSequence& a, const FeatureSequence& b) {
  if (a.utt_id != b.utt_id) {
    throw DataError("early fusion of different utterances '" + a.utt_id +
                    "' and '" + b.utt_id + "'");
  }
  const std::size_t t = fused_length(a.frames(), b.frames(), a.utt_id);
  const std::size_t da = a.dims(), db = b.dims();
  Tensor<float> out(Shape{t, da + db});
  for (std::size_t i = 0; i < t; ++i) {
    std::copy_n(a.data.data().data() + i * da, da, out.data().data() + i * (da + db));
    std::copy_n(b.data.data().data() + i * db, db, out.data().data() + i * (da + db) + da);
  }
  return {a.utt_id, SourceTag::file(a.source.str() + "+" + b.source.str()), std::move(out)};
}

// Batched early fusion. Item lengths become min(Ta, Tb).
template <typename T>
SeqBatch<T> early_fuse(const SeqBatch<T>& a, const SeqBatch<T>& b) {
  if (a.batch() != b.batch()) {
    throw DimensionError("early fusion of batches of size " +
                         std::to_string(a.batch()) + " and " + std::to_string(b.batch()));
  }
  std::vector<std::size_t> lens(a.batch());
  std::size_t max_len = 0;
  for (std::size_t i = 0; i < a.batch(); ++i) {
    lens[i] = fused_length(a.lengths[i], b.lengths[i], "batch item " + std::to_string(i));
    max_len = std::max(max_len, lens[i]);
  }
  const std::size_t da = a.channels(), db = b.channels();
  SeqBatch<T> out(a.batch(), max_len, da + db, lens);
  for (std::size_t i = 0; i < a.batch(); ++i)
    for (std::size_t t = 0; t < lens[i]; ++t) {
      std::copy_n(a.frame(i, t), da, out.frame(i, t));
      std::copy_n(b.frame(i, t), db, out.frame(i, t) + da);
    }
  return out;
}

// Routes the gradient of a fused batch back to its two inputs. Truncated
// frames receive zero gradient.
template <typename T>
std::pair<SeqBatch<T>, SeqBatch<T>> early_fuse_backward(const SeqBatch<T>& a,
                                                        const SeqBatch<T>& b,
                                                        const SeqBatch<T>& grad) {
  SeqBatch<T> ga = a.like(a.channels()), gb = b.like(b.channels());
  const std::size_t da = a.channels(), db = b.channels();
  for (std::size_t i = 0; i < grad.batch(); ++i)
    for (std::size_t t = 0; t < grad.lengths[i]; ++t) {
      std::copy_n(grad.frame(i, t), da, ga.frame(i, t));
      std::copy_n(grad.frame(i, t) + da, db, gb.frame(i, t));
    }
  return {std::move(ga), std::move(gb)};
}

}  // namespace serforge
