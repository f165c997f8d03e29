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

// Declarative experiment configuration and the per-fold pipeline behind one
// result row:
//
//   for each fold (held-out session):
//     1. fine-tune every trainable upstream jointly with mean pooling and a
//        linear classifier, then average its k best checkpoints (or keep
//        the single best when upstream averaging is off);
//     2. freeze the upstream(s) and train the downstream graph, again with
//        k-best averaging or single-best selection;
//     3. evaluate once on the held-out session.
//
// Folds may run in parallel; each writes only under its own directory.

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "serforge/dataset.hpp"
#include "serforge/metrics.hpp"
#include "serforge/trainer.hpp"

namespace serforge {

struct BranchConfig {
  SourceTag source;
  bool fine_tuned = false;
  std::string label;  // display name in reports, e.g. "W2V2"
};

struct AveragingConfig {
  bool upstream = false;
  bool downstream = false;
  std::size_t k = 5;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::string table_set;   // "1.A", "1.B", "2", ...
  int table_number = 0;
  std::string modality = "S";
  std::filesystem::path manifest;
  std::uint64_t seed = 0;
  std::vector<BranchConfig> branches;
  Fusion fusion = Fusion::kNone;
  std::vector<AggregatorKind> aggregators;
  EcapaConfig ecapa;
  AveragingConfig averaging;
  TrainConfig train;
  TrainConfig upstream_train;
  FbankConfig fbank;
  std::filesystem::path output_dir = "runs/experiment";
  std::string source_text;  // canonical JSON, hashed into the run manifest

  bool has_finetuned_toy() const {
    for (const auto& b : branches)
      if (b.fine_tuned && b.source.kind == SourceTag::Kind::kToy) return true;
    return false;
  }

  // Structural checks that do not need the data.
  void validate() const {
    std::vector<std::string> errs;
    ModelGraph g = graph_shape();
    for (auto& b : g.branches) b.input_dim = 1;
    try {
      g.validate();
    } catch (const ConfigError& e) {
      errs.insert(errs.end(), e.diagnostics().begin(), e.diagnostics().end());
    }
    if (manifest.empty()) errs.push_back("manifest: required");
    if (averaging.k < 1) errs.push_back("averaging.k must be >= 1");
    bool any_ft = false;
    for (const auto& b : branches) any_ft = any_ft || b.fine_tuned;
    if (averaging.upstream && !any_ft) {
      errs.push_back("averaging.upstream requires at least one fine_tuned branch");
    }
    auto check_train = [&](const TrainConfig& t, const std::string& where, bool avg) {
      try {
        t.validate(where, avg);
      } catch (const ConfigError& e) {
        errs.insert(errs.end(), e.diagnostics().begin(), e.diagnostics().end());
      }
      if (t.epochs < t.checkpoint_every) {
        errs.push_back(where + ".epochs must be >= checkpoint_every (no checkpoint would be saved)");
      }
    };
    check_train(train, "train", averaging.downstream);
    if (has_finetuned_toy()) check_train(upstream_train, "upstream_train", averaging.upstream);
    try {
      fbank.validate();
    } catch (const ConfigError& e) {
      errs.insert(errs.end(), e.diagnostics().begin(), e.diagnostics().end());
    }
    if (!errs.empty()) throw ConfigError(errs);
  }

  // Model graph with input widths left at zero.
  ModelGraph graph_shape() const {
    ModelGraph g;
    for (const auto& b : branches) g.branches.push_back({b.source, 0, b.fine_tuned});
    g.fusion = fusion;
    g.aggregators = aggregators;
    g.ecapa = ecapa;
    return g;
  }

  std::vector<SourceTag> sources() const {
    std::vector<SourceTag> out;
    for (const auto& b : branches) out.push_back(b.source);
    return out;
  }
};

namespace detail {

using nlohmann::json;

class FieldReader {
 public:
  FieldReader(const json& j, std::string path, std::vector<std::string>& errs)
      : j_(j), path_(std::move(path)), errs_(errs) {}

  std::string where(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  template <typename U>
  void read(const std::string& key, U& out) {
    if (!has(key)) return;
    try {
      out = j_.at(key).get<U>();
    } catch (const json::exception&) {
      errs_.push_back(where(key) + ": wrong type (" + std::string(j_.at(key).type_name()) + ")");
    }
  }

  void reject_unknown() {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) errs_.push_back(where(key) + ": unknown field");
    }
  }

  const json& at(const std::string& key) const { return j_.at(key); }

 private:
  const json& j_;
  std::string path_;
  std::vector<std::string>& errs_;
  std::set<std::string> seen_;
};

inline void read_train(const json& j, const std::string& path, TrainConfig& t,
                       std::vector<std::string>& errs) {
  if (!j.is_object()) {
    errs.push_back(path + ": expected an object");
    return;
  }
  FieldReader r(j, path, errs);
  r.read("epochs", t.epochs);
  r.read("batch_size", t.batch_size);
  r.read("lr", t.lr);
  r.read("checkpoint_every", t.checkpoint_every);
  r.reject_unknown();
}

}  // namespace detail

// Parses a config document. Relative manifest paths resolve against
// `base_dir`. Every problem is collected into one ConfigError.
inline ExperimentConfig parse_experiment_config(const nlohmann::json& j,
                                                const std::filesystem::path& base_dir) {
  using detail::FieldReader;
  std::vector<std::string> errs;
  ExperimentConfig cfg;
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  FieldReader r(j, "", errs);
  r.read("name", cfg.name);
  r.read("seed", cfg.seed);
  std::string manifest;
  r.read("manifest", manifest);
  if (!manifest.empty()) {
    std::filesystem::path p(manifest);
    cfg.manifest = p.is_absolute() ? p : base_dir / p;
  }
  std::string output;
  r.read("output_dir", output);
  if (!output.empty()) cfg.output_dir = output;
  if (r.has("table")) {
    const auto& t = j.at("table");
    if (!t.is_object()) {
      errs.push_back("table: expected an object");
    } else {
      FieldReader tr(t, "table", errs);
      tr.read("set", cfg.table_set);
      tr.read("number", cfg.table_number);
      tr.read("modality", cfg.modality);
      tr.reject_unknown();
    }
  }
  if (!r.has("branches") || !j.at("branches").is_array() || j.at("branches").empty()) {
    errs.push_back("branches: required non-empty array");
  } else {
    const auto& arr = j.at("branches");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string where = "branches[" + std::to_string(i) + "]";
      if (!arr[i].is_object()) {
        errs.push_back(where + ": expected an object");
        continue;
      }
      FieldReader br(arr[i], where, errs);
      BranchConfig b;
      std::string source;
      br.read("source", source);
      try {
        b.source = SourceTag::parse(source);
      } catch (const ConfigError& e) {
        errs.push_back(where + ".source: " + e.what());
      }
      br.read("fine_tuned", b.fine_tuned);
      br.read("label", b.label);
      if (b.label.empty()) b.label = b.source.str();
      br.reject_unknown();
      cfg.branches.push_back(std::move(b));
    }
  }
  std::string fusion = "none";
  r.read("fusion", fusion);
  try {
    cfg.fusion = parse_fusion(fusion);
  } catch (const ConfigError& e) {
    errs.push_back(std::string("fusion: ") + e.what());
  }
  std::vector<std::string> aggs;
  if (r.has("aggregator")) {
    std::string a;
    r.read("aggregator", a);
    const std::size_t copies = cfg.fusion == Fusion::kLate ? cfg.branches.size() : 1;
    aggs.assign(copies, a);
  }
  if (r.has("aggregators")) {
    if (!aggs.empty()) errs.push_back("aggregators: give either 'aggregator' or 'aggregators'");
    r.read("aggregators", aggs);
  }
  if (aggs.empty()) errs.push_back("aggregator: required");
  for (std::size_t i = 0; i < aggs.size(); ++i) {
    try {
      cfg.aggregators.push_back(parse_aggregator(aggs[i]));
    } catch (const ConfigError& e) {
      errs.push_back("aggregators[" + std::to_string(i) + "]: " + e.what());
    }
  }
  if (r.has("ecapa")) {
    const auto& e = j.at("ecapa");
    FieldReader er(e, "ecapa", errs);
    if (!e.is_object()) {
      errs.push_back("ecapa: expected an object");
    } else {
      er.read("channels", cfg.ecapa.channels);
      er.read("kernel_sizes", cfg.ecapa.kernel_sizes);
      er.read("dilations", cfg.ecapa.dilations);
      er.read("res2_scale", cfg.ecapa.res2_scale);
      er.read("se_bottleneck", cfg.ecapa.se_bottleneck);
      er.read("attention_channels", cfg.ecapa.attention_channels);
      er.read("embedding_dim", cfg.ecapa.embedding_dim);
      er.reject_unknown();
    }
  }
  if (r.has("averaging")) {
    const auto& a = j.at("averaging");
    if (!a.is_object()) {
      errs.push_back("averaging: expected an object");
    } else {
      FieldReader ar(a, "averaging", errs);
      ar.read("upstream", cfg.averaging.upstream);
      ar.read("downstream", cfg.averaging.downstream);
      ar.read("k", cfg.averaging.k);
      ar.reject_unknown();
    }
  }
  if (r.has("train")) detail::read_train(j.at("train"), "train", cfg.train, errs);
  cfg.upstream_train = cfg.train;
  if (r.has("upstream_train")) {
    detail::read_train(j.at("upstream_train"), "upstream_train", cfg.upstream_train, errs);
  }
  cfg.train.k_best = cfg.averaging.k;
  cfg.upstream_train.k_best = cfg.averaging.k;
  if (r.has("fbank")) {
    const auto& f = j.at("fbank");
    if (!f.is_object()) {
      errs.push_back("fbank: expected an object");
    } else {
      FieldReader fr(f, "fbank", errs);
      fr.read("n_mels", cfg.fbank.n_mels);
      fr.read("window_ms", cfg.fbank.window_ms);
      fr.read("hop_ms", cfg.fbank.hop_ms);
      fr.read("pre_emphasis", cfg.fbank.pre_emphasis);
      fr.read("fft_size", cfg.fbank.fft_size);
      fr.read("log_floor", cfg.fbank.log_floor);
      fr.reject_unknown();
    }
  }
  r.reject_unknown();
  cfg.source_text = j.dump();
  if (!errs.empty()) throw ConfigError(errs);
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "': " + e.what());
  }
  return parse_experiment_config(j, path.parent_path());
}

struct FoldMetrics {
  int fold = 0;
  double wacc = 0.0;
  double uacc = 0.0;
  std::size_t n_test = 0;
  ConfusionMatrix<kNumEmotions> confusion;
  std::vector<std::size_t> upstream_averaged;  // checkpoints averaged per fine-tuned upstream
  std::size_t downstream_averaged = 0;
};

struct MetricsReport {
  std::string name;
  std::string table_set;
  int table_number = 0;
  std::string modality;
  std::string input_feature;
  bool fine_tuned = false;
  bool upstream_avg = false;
  std::string aggregator;
  std::string classifier = "Linear";
  bool downstream_avg = false;
  std::vector<FoldMetrics> folds;
  double mean_wacc = 0.0;
  double mean_uacc = 0.0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["name"] = name;
    auto yes = [](bool b) { return b ? "yes" : "no"; };
    j["row"] = {{"set", table_set},          {"#", table_number},
                {"modality", modality},      {"input_feature", input_feature},
                {"FT", yes(fine_tuned)},     {"upstream_AVG", yes(upstream_avg)},
                {"AGG", aggregator},         {"classifier", classifier},
                {"downstream_AVG", yes(downstream_avg)},
                {"WACC", mean_wacc},         {"UACC", mean_uacc}};
    j["classes"] = kEmotionNames;
    auto folds_json = nlohmann::ordered_json::array();
    for (const auto& f : folds) {
      nlohmann::ordered_json fj;
      fj["fold"] = f.fold;
      fj["WACC"] = f.wacc;
      fj["UACC"] = f.uacc;
      fj["n_test"] = f.n_test;
      fj["confusion"] = f.confusion.counts;
      fj["upstream_checkpoints_averaged"] = f.upstream_averaged;
      fj["downstream_checkpoints_averaged"] = f.downstream_averaged;
      folds_json.push_back(std::move(fj));
    }
    j["folds"] = folds_json;
    return j;
  }

  std::string to_table() const {
    std::ostringstream os;
    auto yes = [](bool b) { return b ? "yes" : "no"; };
    os << std::fixed << std::setprecision(2);
    os << "Set\t#\tInput modality\tInput feature\tFT\tAVG\tAGG\tClassifier\tAVG\tWACC\tUACC\n";
    os << table_set << '\t' << table_number << '\t' << modality << '\t' << input_feature << '\t'
       << yes(fine_tuned) << '\t' << yes(upstream_avg) << '\t' << aggregator << '\t' << classifier
       << '\t' << yes(downstream_avg) << '\t' << mean_wacc << '\t' << mean_uacc << '\n';
    os << "\nfold\tn_test\tWACC\tUACC\n";
    for (const auto& f : folds) {
      os << f.fold << '\t' << f.n_test << '\t' << f.wacc << '\t' << f.uacc << '\n';
    }
    os << "mean\t\t" << mean_wacc << '\t' << mean_uacc << '\n';
    return os.str();
  }
};

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

using ProgressSink = std::function<void(const std::string&)>;

// Shared state for running one experiment.
class Experiment {
 public:
  explicit Experiment(ExperimentConfig cfg, AccessLog* log = nullptr)
      : cfg_(std::move(cfg)), manifest_(load_manifest(cfg_.manifest)),
        store_(manifest_, cfg_.fbank), plan_(make_folds(manifest_.records, cfg_.seed)), log_(log) {
    graph_ = cfg_.graph_shape();
    for (std::size_t i = 0; i < graph_.branches.size(); ++i) {
      auto& b = graph_.branches[i];
      if (b.source.kind == SourceTag::Kind::kFile) {
        b.input_dim = store_.get(manifest_.records.front().utt_id, b.source)->dim(1);
      } else {
        b.input_dim = cfg_.fbank.n_mels;
      }
    }
    graph_.validate();
  }

  const ExperimentConfig& config() const { return cfg_; }
  const Manifest& manifest() const { return manifest_; }
  const FoldPlan& plan() const { return plan_; }
  const ModelGraph& graph() const { return graph_; }
  FeatureStore& store() { return store_; }

  const Fold& fold(int k) const {
    for (const auto& f : plan_.folds)
      if (f.index == k) return f;
    throw ConfigError("fold must be in 1..5, got " + std::to_string(k));
  }

  std::filesystem::path fold_dir(const std::filesystem::path& out, int k) const {
    return out / ("fold_" + std::to_string(k));
  }

  struct TrainedFold {
    StateDict<float> state;
    std::vector<std::size_t> upstream_averaged;
    std::size_t downstream_averaged = 0;
  };

  // Steps 1 and 2 for fold k. Never touches the fold's test ids.
  TrainedFold train_fold(int k, const std::filesystem::path& out, const ProgressSink& progress = {}) {
    const Fold& f = fold(k);
    const auto dir = fold_dir(out, k);
    const std::uint64_t seed = fold_seed(cfg_.seed, k);
    TrainedFold result;

    std::vector<StateDict<float>> encoders(graph_.branches.size());
    for (std::size_t i = 0; i < graph_.branches.size(); ++i) {
      const auto& b = graph_.branches[i];
      if (b.source.kind != SourceTag::Kind::kToy || !b.fine_tuned) continue;
      ModelGraph g;
      g.branches = {b};
      g.fusion = Fusion::kNone;
      g.aggregators = {AggregatorKind::kMean};
      SerModel<float> model(g, mix_seed(seed, 100 + i));
      FoldSource src(store_, {b.source}, k, log_);
      src.open(f.train);
      src.open(f.validation);
      TrainConfig tc = cfg_.upstream_train;
      tc.seed = mix_seed(seed, 200 + i);
      if (progress) progress("fold " + std::to_string(k) + ": fine-tuning upstream " + std::to_string(i));
      auto ft = finetune_and_average(model, {f.train, f.validation, &src}, tc,
                                     dir / ("upstream" + std::to_string(i)), cfg_.averaging.upstream);
      encoders[i] = std::move(ft.state);
      result.upstream_averaged.push_back(cfg_.averaging.upstream ? ft.selected.size() : 0);
    }

    SerModel<float> model(graph_, mix_seed(seed, 300));
    for (std::size_t i = 0; i < encoders.size(); ++i) {
      if (encoders[i].empty()) continue;
      model.params().load_prefixed(encoders[i], "upstream0.", "upstream" + std::to_string(i) + ".");
    }
    FoldSource src(store_, cfg_.sources(), k, log_);
    src.open(f.train);
    src.open(f.validation);
    TrainConfig tc = cfg_.train;
    tc.seed = mix_seed(seed, 400);
    tc.freeze_upstream = true;
    if (progress) progress("fold " + std::to_string(k) + ": training downstream");
    auto ds = finetune_and_average(model, {f.train, f.validation, &src}, tc, dir / "downstream",
                                   cfg_.averaging.downstream);
    result.downstream_averaged = cfg_.averaging.downstream ? ds.selected.size() : 0;
    result.state = std::move(ds.state);
    save_checkpoint(dir / "final.serc", result.state);
    return result;
  }

  // Step 3: one pass over the held-out session with the given weights.
  FoldMetrics test_fold(int k, const StateDict<float>& state) {
    const Fold& f = fold(k);
    SerModel<float> model(graph_, 0);
    model.load_state_dict(state);
    FoldSource src(store_, cfg_.sources(), k, log_);
    src.open(f.test);
    src.enter(Stage::kTest);
    const auto eval = evaluate_model(model, src, f.test, std::max<std::size_t>(1, cfg_.train.batch_size));
    FoldMetrics m;
    m.fold = k;
    m.n_test = f.test.size();
    m.wacc = wacc(eval.predictions, eval.labels);
    m.uacc = uacc(eval.predictions, eval.labels);
    m.confusion = ConfusionMatrix<kNumEmotions>::from(eval.predictions, eval.labels);
    return m;
  }

  MetricsReport report_skeleton() const {
    MetricsReport r;
    r.name = cfg_.name;
    r.table_set = cfg_.table_set;
    r.table_number = cfg_.table_number;
    r.modality = cfg_.modality;
    const char* sep = cfg_.fusion == Fusion::kEarly ? " + " : " & ";
    for (std::size_t i = 0; i < cfg_.branches.size(); ++i) {
      if (i) r.input_feature += sep;
      r.input_feature += cfg_.branches[i].label;
    }
    for (const auto& b : cfg_.branches) r.fine_tuned = r.fine_tuned || b.fine_tuned;
    r.upstream_avg = cfg_.averaging.upstream;
    r.downstream_avg = cfg_.averaging.downstream;
    r.aggregator = cfg_.aggregators.front() == AggregatorKind::kMean ? "Mean" : "ECAPA";
    return r;
  }

  // Full pipeline over all five folds, `threads` folds at a time.
  MetricsReport run(const std::filesystem::path& out, std::size_t threads = 1,
                    const ProgressSink& progress = {}) {
    std::vector<FoldMetrics> folds(plan_.folds.size());
    std::vector<std::exception_ptr> errors(plan_.folds.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i; (i = next++) < plan_.folds.size();) {
        try {
          const int k = plan_.folds[i].index;
          auto trained = train_fold(k, out, progress);
          folds[i] = test_fold(k, trained.state);
          folds[i].upstream_averaged = trained.upstream_averaged;
          folds[i].downstream_averaged = trained.downstream_averaged;
          if (progress) {
            std::ostringstream os;
            os << std::fixed << std::setprecision(2) << "fold " << k << ": WACC " << folds[i].wacc
               << " UACC " << folds[i].uacc;
            progress(os.str());
          }
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    };
    threads = std::clamp<std::size_t>(threads, 1, plan_.folds.size());
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);

    MetricsReport report = report_skeleton();
    report.folds = std::move(folds);
    for (const auto& f : report.folds) {
      report.mean_wacc += f.wacc / static_cast<double>(report.folds.size());
      report.mean_uacc += f.uacc / static_cast<double>(report.folds.size());
    }
    return report;
  }

  // Config hash, seeds and input checksums for replaying a run.
  nlohmann::ordered_json run_manifest() const {
    nlohmann::ordered_json j;
    j["config_hash"] = hex64(fnv1a64(cfg_.source_text.data(), cfg_.source_text.size()));
    j["config"] = nlohmann::ordered_json::parse(cfg_.source_text);
    j["seed"] = cfg_.seed;
    auto seeds = nlohmann::ordered_json::array();
    for (const auto& f : plan_.folds) seeds.push_back(fold_seed(cfg_.seed, f.index));
    j["fold_seeds"] = seeds;
    nlohmann::ordered_json files;
    auto add = [&](const std::filesystem::path& p) {
      files[p.generic_string()] = hex64(fnv1a64(io::read_file(p)));
    };
    add(cfg_.manifest);
    for (const auto& r : manifest_.records) {
      for (const auto& b : cfg_.branches) {
        if (b.source.kind == SourceTag::Kind::kFile) {
          add(r.features.at(b.source.name));
        } else {
          add(r.audio);
        }
      }
    }
    j["inputs"] = files;
    return j;
  }

 private:
  ExperimentConfig cfg_;
  Manifest manifest_;
  FeatureStore store_;
  FoldPlan plan_;
  ModelGraph graph_;
  AccessLog* log_;
};

inline void write_report(const std::filesystem::path& out, const MetricsReport& report) {
  std::filesystem::create_directories(out);
  std::ofstream(out / "report.json") << report.to_json().dump(2) << '\n';
  std::ofstream(out / "report.tsv") << report.to_table();
}

// Runs the whole experiment and writes report.json, report.tsv and
// run_manifest.json under `out`.
inline MetricsReport run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out,
                                    std::size_t threads = 1, AccessLog* log = nullptr,
                                    const ProgressSink& progress = {}) {
  Experiment exp(cfg, log);
  std::filesystem::create_directories(out);
  auto report = exp.run(out, threads, progress);
  write_report(out, report);
  std::ofstream(out / "run_manifest.json") << exp.run_manifest().dump(2) << '\n';
  return report;
}

}  // namespace serforge
