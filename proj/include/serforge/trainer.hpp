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

// Joint training, periodic checkpointing, k-best selection by validation
// accuracy and elementwise checkpoint averaging.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "serforge/model.hpp"
#include "serforge/optim.hpp"
#include "serforge/serialization.hpp"

namespace serforge {

// Pipeline stage a data access happens in; recorded by instrumented sources.
enum class Stage { kTrain, kValidate, kSelect, kAverage, kTest };

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::kTrain: return "train";
    case Stage::kValidate: return "validate";
    case Stage::kSelect: return "select";
    case Stage::kAverage: return "average";
    case Stage::kTest: return "test";
  }
  return "?";
}

// Supplies per-branch input matrices and labels by utterance id.
class ExampleSource {
 public:
  virtual ~ExampleSource() = default;
  virtual std::vector<std::shared_ptr<const Tensor<float>>> inputs(const std::string& utt_id) = 0;
  virtual int label(const std::string& utt_id) = 0;
  virtual void enter(Stage) {}
};

struct TrainingSplit {
  std::vector<std::string> train;
  std::vector<std::string> validation;
  ExampleSource* source = nullptr;
};

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 1;  // epochs
  std::size_t k_best = 5;
  bool freeze_upstream = false;

  // `averaging`: whether k_best checkpoints will be averaged afterwards.
  void validate(const std::string& where = "train", bool averaging = true) const {
    std::vector<std::string> errs;
    if (batch_size < 1) errs.push_back(where + ".batch_size must be >= 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) errs.push_back(where + ".lr must be a positive number");
    if (checkpoint_every < 1) errs.push_back(where + ".checkpoint_every must be >= 1");
    if (k_best < 1) errs.push_back(where + ".k_best must be >= 1");
    if (averaging && checkpoint_every >= 1 && epochs / checkpoint_every < k_best) {
      errs.push_back(where + ": " + std::to_string(epochs / checkpoint_every) +
                     " checkpoints would be saved but k_best = " + std::to_string(k_best));
    }
    if (!errs.empty()) throw ConfigError(errs);
  }
};

struct CheckpointRecord {
  std::filesystem::path path;
  std::size_t epoch = 0;
  double val_wacc = 0.0;  // percent
  double val_loss = 0.0;

  friend bool operator==(const CheckpointRecord&, const CheckpointRecord&) = default;
};

inline std::string history_line(const CheckpointRecord& r) {
  std::ostringstream os;
  os << std::setprecision(17) << "{\"epoch\":" << r.epoch << ",\"val_wacc\":" << r.val_wacc
     << ",\"val_loss\":" << r.val_loss << ",\"path\":\"" << r.path.generic_string() << "\"}";
  return os.str();
}

// Copies float inputs into a padded batch of scalar type T.
template <typename T>
SeqBatch<T> pack_inputs(const std::vector<std::shared_ptr<const Tensor<float>>>& seqs) {
  std::size_t max_len = 0;
  std::vector<std::size_t> lens;
  const std::size_t dims = seqs.front()->dim(1);
  for (const auto& s : seqs) {
    if (s->dim(1) != dims) {
      throw DimensionError("batch mixes feature dims " + std::to_string(dims) + " and " +
                           std::to_string(s->dim(1)));
    }
    lens.push_back(s->dim(0));
    max_len = std::max(max_len, s->dim(0));
  }
  SeqBatch<T> out(seqs.size(), max_len, dims, lens);
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    auto src = seqs[b]->data();
    std::transform(src.begin(), src.end(), out.frame(b, 0),
                   [](float v) { return static_cast<T>(v); });
  }
  return out;
}

template <typename T>
std::vector<SeqBatch<T>> gather_batch(ExampleSource& source, const std::vector<std::string>& ids,
                                      std::size_t branches, std::vector<int>* labels) {
  std::vector<std::vector<std::shared_ptr<const Tensor<float>>>> per_branch(branches);
  for (const auto& id : ids) {
    auto in = source.inputs(id);
    if (in.size() != branches) {
      throw DataError("utterance '" + id + "' provides " + std::to_string(in.size()) +
                      " inputs, model has " + std::to_string(branches) + " branches");
    }
    for (std::size_t i = 0; i < branches; ++i) per_branch[i].push_back(std::move(in[i]));
    if (labels) labels->push_back(source.label(id));
  }
  std::vector<SeqBatch<T>> out;
  for (auto& seqs : per_branch) out.push_back(pack_inputs<T>(seqs));
  return out;
}

// Shuffles, buckets by length (branch 0 frame count) and splits into batches
// whose order is shuffled again.
inline std::vector<std::vector<std::string>> make_batches(const std::vector<std::string>& ids,
                                                          const std::vector<std::size_t>& lengths,
                                                          std::size_t batch_size, Rng& rng) {
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t bucket = batch_size * 4;
  for (std::size_t start = 0; start < order.size(); start += bucket) {
    auto first = order.begin() + static_cast<std::ptrdiff_t>(start);
    auto last = order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + bucket));
    std::stable_sort(first, last, [&](std::size_t a, std::size_t b) { return lengths[a] < lengths[b]; });
  }
  std::vector<std::vector<std::string>> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    std::vector<std::string> batch;
    for (std::size_t i = start; i < std::min(order.size(), start + batch_size); ++i) {
      batch.push_back(ids[order[i]]);
    }
    batches.push_back(std::move(batch));
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

struct EvalResult {
  std::vector<int> predictions;
  std::vector<int> labels;
  double loss = 0.0;  // mean cross-entropy

  double accuracy() const {
    if (labels.empty()) return 0.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i];
    return 100.0 * static_cast<double>(correct) / static_cast<double>(labels.size());
  }
};

// Eval-mode predictions over `ids`, in order.
template <typename T>
EvalResult evaluate_model(SerModel<T>& model, ExampleSource& source,
                          const std::vector<std::string>& ids, std::size_t batch_size) {
  EvalResult out;
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < ids.size(); start += batch_size) {
    std::vector<std::string> chunk(ids.begin() + static_cast<std::ptrdiff_t>(start),
                                   ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), start + batch_size)));
    std::vector<int> labels;
    auto batch = gather_batch<T>(source, chunk, model.graph().branches.size(), &labels);
    Tensor<T> logits = model.forward(batch, Mode::kEval);
    const auto ce = ops::cross_entropy<T>(logits, labels);
    loss_sum += static_cast<double>(ce.loss) * static_cast<double>(chunk.size());
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      const T* row = logits.data().data() + r * logits.dim(1);
      out.predictions.push_back(static_cast<int>(std::max_element(row, row + logits.dim(1)) - row));
    }
    out.labels.insert(out.labels.end(), labels.begin(), labels.end());
  }
  out.loss = ids.empty() ? 0.0 : loss_sum / static_cast<double>(ids.size());
  return out;
}

// Trains `model` on split.train, saving a checkpoint (and a history line in
// checkpoint_dir/history.jsonl) every cfg.checkpoint_every epochs. Only the
// train and validation ids are ever requested from the source.
template <typename T>
std::vector<CheckpointRecord> train(SerModel<T>& model, const TrainingSplit& split,
                                    const TrainConfig& cfg,
                                    const std::filesystem::path& checkpoint_dir) {
  if (!split.source) throw ConfigError("training split has no example source");
  if (split.train.empty()) throw ConfigError("empty training set");
  if (cfg.epochs == 0) return {};
  if (split.validation.empty()) throw ConfigError("empty validation set");
  {
    std::set<std::string> train_ids(split.train.begin(), split.train.end());
    for (const auto& id : split.validation) {
      if (train_ids.count(id)) {
        throw ConfigError("utterance '" + id + "' is in both the train and validation sets");
      }
    }
  }
  if (cfg.batch_size < 1 || cfg.checkpoint_every < 1) {
    throw ConfigError("batch_size and checkpoint_every must be >= 1");
  }
  model.freeze_upstream(cfg.freeze_upstream);
  auto& source = *split.source;
  const std::size_t branches = model.graph().branches.size();

  source.enter(Stage::kTrain);
  std::vector<std::size_t> lengths;
  lengths.reserve(split.train.size());
  for (const auto& id : split.train) lengths.push_back(source.inputs(id).front()->dim(0));

  std::filesystem::create_directories(checkpoint_dir);
  std::ofstream history_log(checkpoint_dir / "history.jsonl", std::ios::trunc);

  Rng rng(cfg.seed);
  AdamState<T> adam;
  AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;
  std::vector<CheckpointRecord> history;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    source.enter(Stage::kTrain);
    for (const auto& ids : make_batches(split.train, lengths, cfg.batch_size, rng)) {
      std::vector<int> labels;
      auto batch = gather_batch<T>(source, ids, branches, &labels);
      model.params().zero_grad();
      Tensor<T> logits = model.forward(batch, Mode::kTrain);
      const auto ce = ops::cross_entropy<T>(logits, labels);
      if (!std::isfinite(static_cast<double>(ce.loss))) {
        throw TrainingError("non-finite training loss at epoch " + std::to_string(epoch));
      }
      model.backward(ce.grad);
      adam_step(model.params(), adam, adam_cfg);
    }
    if (epoch % cfg.checkpoint_every != 0) continue;
    source.enter(Stage::kValidate);
    const auto val = evaluate_model(model, source, split.validation, cfg.batch_size);
    if (!std::isfinite(val.loss)) {
      throw TrainingError("non-finite validation loss at epoch " + std::to_string(epoch));
    }
    std::ostringstream name;
    name << "epoch_" << std::setw(4) << std::setfill('0') << epoch << ".serc";
    CheckpointRecord rec{checkpoint_dir / name.str(), epoch, val.accuracy(), val.loss};
    save_checkpoint(rec.path, model.state_dict());
    history_log << history_line(rec) << '\n';
    history.push_back(std::move(rec));
  }
  return history;
}

// Top-k by validation accuracy; ties go to lower validation loss, then to
// the earlier epoch.
inline std::vector<CheckpointRecord> select_best_checkpoints(std::vector<CheckpointRecord> history,
                                                             std::size_t k) {
  if (k == 0) throw ConfigError("k must be >= 1");
  if (history.size() < k) {
    throw ConfigError("cannot select " + std::to_string(k) + " best checkpoints from a history of " +
                      std::to_string(history.size()));
  }
  std::sort(history.begin(), history.end(), [](const CheckpointRecord& a, const CheckpointRecord& b) {
    if (a.val_wacc != b.val_wacc) return a.val_wacc > b.val_wacc;
    if (a.val_loss != b.val_loss) return a.val_loss < b.val_loss;
    return a.epoch < b.epoch;
  });
  history.resize(k);
  return history;
}

// Elementwise mean of every tensor. Per element the K values are summed in
// double in ascending order, so the result does not depend on the order of
// the inputs. Output tensors are sorted by name.
inline StateDict<float> average_state_dicts(const std::vector<StateDict<float>>& states) {
  if (states.empty()) throw ConfigError("nothing to average");
  std::vector<std::vector<const NamedTensor<float>*>> by_state(states.size());
  for (std::size_t s = 0; s < states.size(); ++s) {
    for (const auto& e : states[s]) by_state[s].push_back(&e);
    std::sort(by_state[s].begin(), by_state[s].end(),
              [](const auto* a, const auto* b) { return a->name < b->name; });
  }
  const auto& ref = by_state.front();
  for (std::size_t s = 1; s < states.size(); ++s) {
    const auto& cur = by_state[s];
    std::size_t i = 0;
    for (; i < std::min(ref.size(), cur.size()); ++i) {
      if (ref[i]->name != cur[i]->name) {
        const auto& missing = ref[i]->name < cur[i]->name ? ref[i]->name : cur[i]->name;
        throw FormatError("tensor '" + missing + "' is not present in every checkpoint");
      }
      if (ref[i]->value.shape() != cur[i]->value.shape()) {
        throw FormatError("tensor '" + ref[i]->name + "' has shape " +
                          shape_string(ref[i]->value.shape()) + " in checkpoint 0 but " +
                          shape_string(cur[i]->value.shape()) + " in checkpoint " +
                          std::to_string(s));
      }
    }
    if (ref.size() != cur.size()) {
      const auto& extra = ref.size() > cur.size() ? ref[i]->name : cur[i]->name;
      throw FormatError("tensor '" + extra + "' is not present in every checkpoint");
    }
  }
  StateDict<float> out;
  out.reserve(ref.size());
  std::vector<double> values(states.size());
  const double k = static_cast<double>(states.size());
  for (std::size_t i = 0; i < ref.size(); ++i) {
    Tensor<float> avg(ref[i]->value.shape());
    for (std::size_t e = 0; e < avg.size(); ++e) {
      for (std::size_t s = 0; s < states.size(); ++s) values[s] = by_state[s][i]->value[e];
      std::sort(values.begin(), values.end());
      double sum = 0.0;
      for (double v : values) sum += v;
      avg[e] = static_cast<float>(sum / k);
    }
    out.push_back({ref[i]->name, std::move(avg)});
  }
  return out;
}

inline StateDict<float> average_checkpoints(const std::vector<std::filesystem::path>& paths) {
  std::vector<StateDict<float>> states;
  states.reserve(paths.size());
  for (const auto& p : paths) {
    try {
      states.push_back(load_checkpoint(p));
    } catch (const FormatError& e) {
      throw FormatError(p.string() + ": " + e.what());
    }
  }
  return average_state_dicts(states);
}

struct FinetuneResult {
  std::vector<CheckpointRecord> history;
  std::vector<CheckpointRecord> selected;
  StateDict<float> state;  // loaded into the model on return
};

// train -> select_best_checkpoints(k) -> average_checkpoints. With
// `average` false the single best checkpoint is used instead.
template <typename T>
FinetuneResult finetune_and_average(SerModel<T>& model, const TrainingSplit& split,
                                    const TrainConfig& cfg,
                                    const std::filesystem::path& checkpoint_dir,
                                    bool average = true) {
  FinetuneResult out;
  out.history = train(model, split, cfg, checkpoint_dir);
  if (out.history.empty()) {
    out.state = model.state_dict();
    return out;
  }
  if (split.source) split.source->enter(Stage::kSelect);
  out.selected = select_best_checkpoints(out.history, average ? cfg.k_best : 1);
  if (split.source) split.source->enter(Stage::kAverage);
  std::vector<std::filesystem::path> paths;
  for (const auto& r : out.selected) paths.push_back(r.path);
  out.state = average ? average_checkpoints(paths) : load_checkpoint(paths.front());
  model.load_state_dict(out.state);
  return out;
}

}  // namespace serforge
