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

// ModelGraph describes one point of the experiment space: one or two
// upstream branches, a fusion mode, aggregator(s) and a linear classifier.
// SerModel instantiates it with trainable parameters.
//
// Parameter names are prefixed "upstream<i>." for toy-encoder weights and
// "downstream." for aggregators and the classifier, so either side can be
// frozen, saved or averaged on its own.

#include <memory>
#include <string>
#include <vector>

#include "serforge/downstream.hpp"

namespace serforge {

enum class Fusion { kNone, kEarly, kLate };

inline std::string to_string(Fusion f) {
  switch (f) {
    case Fusion::kNone: return "none";
    case Fusion::kEarly: return "early";
    case Fusion::kLate: return "late";
  }
  return {};
}

inline Fusion parse_fusion(const std::string& s) {
  if (s == "none") return Fusion::kNone;
  if (s == "early") return Fusion::kEarly;
  if (s == "late") return Fusion::kLate;
  throw ConfigError("unknown fusion '" + s + "' (expected none, early or late)");
}

struct BranchSpec {
  SourceTag source;
  std::size_t input_dim = 0;  // fbank bins for fbank/toy, D for file sources
  bool fine_tuned = false;    // toy: trained jointly before the downstream
};

inline constexpr const char* kValidGraphShapes =
    "valid shapes are: 1 branch + fusion=none + aggregator mean|ecapa; "
    "2 branches + fusion=early + one ecapa aggregator; "
    "2 branches + fusion=late + two ecapa aggregators";

struct ModelGraph {
  std::vector<BranchSpec> branches;
  Fusion fusion = Fusion::kNone;
  std::vector<AggregatorKind> aggregators;
  EcapaConfig ecapa;
  std::size_t num_classes = kNumEmotions;

  void validate() const {
    std::vector<std::string> errs;
    const std::size_t nb = branches.size(), na = aggregators.size();
    bool shape_ok = false;
    switch (fusion) {
      case Fusion::kNone:
        shape_ok = nb == 1 && na == 1;
        break;
      case Fusion::kEarly:
        shape_ok = nb == 2 && na == 1 && aggregators[0] == AggregatorKind::kEcapa;
        break;
      case Fusion::kLate:
        shape_ok = nb == 2 && na == 2 && aggregators[0] == AggregatorKind::kEcapa &&
                   aggregators[1] == AggregatorKind::kEcapa;
        break;
    }
    if (!shape_ok) {
      std::string got = std::to_string(nb) + " branch(es) + fusion=" + to_string(fusion) +
                        " + aggregators [";
      for (std::size_t i = 0; i < na; ++i) got += (i ? "," : "") + to_string(aggregators[i]);
      errs.push_back("unsupported model graph (" + got + "]); " + kValidGraphShapes);
    }
    for (std::size_t i = 0; i < nb; ++i) {
      const auto& b = branches[i];
      const std::string where = "branches[" + std::to_string(i) + "]";
      if (b.input_dim == 0) errs.push_back(where + ".input_dim must be >= 1");
      if (b.fine_tuned && b.source.kind == SourceTag::Kind::kFbank) {
        errs.push_back(where + ": the fbank upstream has no parameters to fine-tune");
      }
    }
    if (num_classes < 2) errs.push_back("num_classes must be >= 2");
    if (std::find(aggregators.begin(), aggregators.end(), AggregatorKind::kEcapa) !=
        aggregators.end()) {
      try {
        ecapa.validate();
      } catch (const ConfigError& e) {
        errs.insert(errs.end(), e.diagnostics().begin(), e.diagnostics().end());
      }
    }
    if (!errs.empty()) throw ConfigError(errs);
  }

  // Frame-feature width seen by aggregator `i`.
  std::size_t aggregator_input_dim(std::size_t i) const {
    auto width = [&](std::size_t b) {
      return branches[b].source.kind == SourceTag::Kind::kToy ? kToyEncoderWidth
                                                              : branches[b].input_dim;
    };
    if (fusion == Fusion::kEarly) return width(0) + width(1);
    return width(i);
  }
};

inline std::string upstream_prefix(std::size_t branch) {
  return "upstream" + std::to_string(branch) + ".encoder";
}
inline std::string aggregator_prefix(std::size_t i) {
  return "downstream.aggregator" + std::to_string(i);
}
inline constexpr const char* kClassifierPrefix = "downstream.classifier";

template <typename T>
class SerModel {
 public:
  SerModel(ModelGraph graph, std::uint64_t seed) : graph_((graph.validate(), std::move(graph))) {
    Rng rng(seed);
    for (std::size_t i = 0; i < graph_.branches.size(); ++i) {
      const auto& b = graph_.branches[i];
      if (b.source.kind == SourceTag::Kind::kToy) {
        encoders_.push_back(
            std::make_unique<ToyEncoder<T>>(params_, upstream_prefix(i), b.input_dim, rng));
      } else {
        encoders_.push_back(nullptr);
      }
    }
    std::size_t embedding = 0;
    for (std::size_t i = 0; i < graph_.aggregators.size(); ++i) {
      const std::size_t in = graph_.aggregator_input_dim(i);
      if (graph_.aggregators[i] == AggregatorKind::kMean) {
        aggregators_.push_back(std::make_unique<MeanPoolAggregator<T>>(in));
      } else {
        aggregators_.push_back(std::make_unique<EcapaAggregator<T>>(
            params_, aggregator_prefix(i), in, graph_.ecapa, rng));
      }
      embedding += aggregators_.back()->output_dim();
    }
    classifier_ = Linear<T>(params_, kClassifierPrefix, embedding, graph_.num_classes, rng);
    // Branches that are not fine-tuned keep their initial encoder weights.
    for (std::size_t i = 0; i < encoders_.size(); ++i) {
      if (encoders_[i] && !graph_.branches[i].fine_tuned) {
        params_.set_frozen("upstream" + std::to_string(i) + ".", true);
      }
    }
  }

  SerModel(const SerModel&) = delete;
  SerModel& operator=(const SerModel&) = delete;

  // inputs[i] is the batch for branch i; returns logits [B, num_classes].
  Tensor<T> forward(const std::vector<SeqBatch<T>>& inputs, Mode mode) {
    if (inputs.size() != graph_.branches.size()) {
      throw DimensionError("model has " + std::to_string(graph_.branches.size()) +
                           " branches, got " + std::to_string(inputs.size()) + " inputs");
    }
    features_.clear();
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (inputs[i].channels() != graph_.branches[i].input_dim) {
        throw DimensionError("branch " + std::to_string(i) + " expects feature dim " +
                             std::to_string(graph_.branches[i].input_dim) + ", got " +
                             std::to_string(inputs[i].channels()));
      }
      if (encoders_[i]) {
        features_.push_back(encoders_[i]->forward(inputs[i], encoder_trains(i) ? mode : Mode::kEval));
      } else {
        features_.push_back(inputs[i]);
      }
    }
    Tensor<T> embedding;
    switch (graph_.fusion) {
      case Fusion::kNone:
        embedding = aggregators_[0]->forward(features_[0], mode);
        break;
      case Fusion::kEarly:
        embedding = aggregators_[0]->forward(early_fuse(features_[0], features_[1]), mode);
        break;
      case Fusion::kLate: {
        Tensor<T> a = aggregators_[0]->forward(features_[0], mode);
        Tensor<T> b = aggregators_[1]->forward(features_[1], mode);
        embedding = concat_columns(a, b);
        break;
      }
    }
    return classifier_.forward(embedding);
  }

  // Accumulates parameter gradients for the most recent forward call.
  void backward(const Tensor<T>& grad_logits) {
    Tensor<T> g = classifier_.backward(grad_logits);
    std::vector<SeqBatch<T>> grads(features_.size());
    switch (graph_.fusion) {
      case Fusion::kNone:
        grads[0] = aggregators_[0]->backward(g);
        break;
      case Fusion::kEarly: {
        auto [ga, gb] = early_fuse_backward(features_[0], features_[1], aggregators_[0]->backward(g));
        grads[0] = std::move(ga);
        grads[1] = std::move(gb);
        break;
      }
      case Fusion::kLate: {
        const std::size_t ea = aggregators_[0]->output_dim();
        grads[0] = aggregators_[0]->backward(slice_columns(g, 0, ea));
        grads[1] = aggregators_[1]->backward(slice_columns(g, ea, g.dim(1) - ea));
        break;
      }
    }
    for (std::size_t i = 0; i < encoders_.size(); ++i) {
      if (encoders_[i] && encoder_trains(i)) encoders_[i]->backward(grads[i]);
    }
  }

  // Freezing the upstream also pins its batchnorm layers to eval mode.
  void freeze_upstream(bool frozen) {
    upstream_frozen_ = frozen;
    for (std::size_t i = 0; i < encoders_.size(); ++i) {
      if (!encoders_[i]) continue;
      params_.set_frozen("upstream" + std::to_string(i) + ".",
                         frozen || !graph_.branches[i].fine_tuned);
    }
  }
  bool upstream_frozen() const { return upstream_frozen_; }

  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }
  const ModelGraph& graph() const { return graph_; }
  std::size_t embedding_dim() const { return classifier_.in_features(); }

  StateDict<float> state_dict() const { return params_.state_dict(); }

  // Loads a full checkpoint. A tensor shape that disagrees because the
  // checkpoint was trained on different feature widths is reported as a
  // ConfigError naming both widths.
  void load_state_dict(const StateDict<float>& state) {
    check_input_dims(state);
    params_.load_state_dict(state);
  }

  // Names of the tensors whose axis 1 consumes branch input features.
  std::vector<std::pair<std::size_t, std::string>> input_consumers() const {
    std::vector<std::pair<std::size_t, std::string>> out;
    for (std::size_t i = 0; i < graph_.branches.size(); ++i) {
      if (encoders_[i]) {
        out.emplace_back(i, upstream_prefix(i) + ".block1.conv.weight");
      } else if (graph_.fusion == Fusion::kEarly) {
        if (i == 0) out.emplace_back(i, aggregator_prefix(0) + ".stem.conv.weight");
      } else if (graph_.aggregators[i] == AggregatorKind::kEcapa) {
        out.emplace_back(i, aggregator_prefix(i) + ".stem.conv.weight");
      } else {
        out.emplace_back(i, std::string(kClassifierPrefix) + ".weight");
      }
    }
    return out;
  }

 private:
  bool encoder_trains(std::size_t i) const {
    return !upstream_frozen_ && graph_.branches[i].fine_tuned;
  }

  void check_input_dims(const StateDict<float>& state) const {
    for (const auto& [branch, name] : input_consumers()) {
      const auto* p = params_.find(name);
      for (const auto& entry : state) {
        if (entry.name != name || !p) continue;
        if (entry.value.rank() >= 2 && p->value.rank() >= 2 &&
            entry.value.dim(1) != p->value.dim(1)) {
          throw ConfigError("feature dim mismatch on branch " + std::to_string(branch) +
                            ": checkpoint was trained on feature dim " +
                            std::to_string(entry.value.dim(1)) +
                            " but the data provides feature dim " +
                            std::to_string(p->value.dim(1)));
        }
      }
    }
  }

  static Tensor<T> concat_columns(const Tensor<T>& a, const Tensor<T>& b) {
    const std::size_t rows = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    Tensor<T> out(Shape{rows, ca + cb});
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < ca; ++c) out.at(r, c) = a.at(r, c);
      for (std::size_t c = 0; c < cb; ++c) out.at(r, ca + c) = b.at(r, c);
    }
    return out;
  }

  static Tensor<T> slice_columns(const Tensor<T>& a, std::size_t begin, std::size_t width) {
    Tensor<T> out(Shape{a.dim(0), width});
    for (std::size_t r = 0; r < a.dim(0); ++r)
      for (std::size_t c = 0; c < width; ++c) out.at(r, c) = a.at(r, begin + c);
    return out;
  }

  ModelGraph graph_;
  ParameterSet<T> params_;
  std::vector<std::unique_ptr<ToyEncoder<T>>> encoders_;
  std::vector<std::unique_ptr<Aggregator<T>>> aggregators_;
  Linear<T> classifier_;
  std::vector<SeqBatch<T>> features_;
  bool upstream_frozen_ = false;
};

}  // namespace serforge
