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

// Dataset manifest, leave-one-session-out fold plan, and an instrumented
// feature store that logs every access by fold and pipeline stage.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "serforge/audio.hpp"
#include "serforge/trainer.hpp"
#include "serforge/upstream.hpp"

namespace serforge {

inline constexpr int kNumSessions = 5;

// Class indices used everywhere: 0 angry, 1 happy, 2 neutral, 3 sad.
inline constexpr std::array<const char*, kNumEmotions> kEmotionNames{"angry", "happy",
                                                                     "neutral", "sad"};

// Maps a raw IEMOCAP label (full word or 3-letter code, any case) to a class
// index. "excited" is merged into happy; every other label is not used.
inline std::optional<int> canonical_label(std::string raw) {
  std::transform(raw.begin(), raw.end(), raw.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (raw == "angry" || raw == "ang") return 0;
  if (raw == "happy" || raw == "hap" || raw == "excited" || raw == "exc") return 1;
  if (raw == "neutral" || raw == "neu") return 2;
  if (raw == "sad") return 3;
  return std::nullopt;
}

struct UtteranceRecord {
  std::string utt_id;
  int session = 0;
  std::string speaker;
  int label = 0;            // canonical class index
  std::string raw_label;
  std::filesystem::path audio;
  std::optional<std::string> transcript;
  std::map<std::string, std::filesystem::path> features;  // source name -> SERF path
};

struct Manifest {
  std::filesystem::path path;
  std::vector<UtteranceRecord> records;
  std::size_t excluded = 0;
  std::map<std::string, std::size_t> excluded_by_label;

  std::array<std::size_t, kNumEmotions> class_counts() const {
    std::array<std::size_t, kNumEmotions> n{};
    for (const auto& r : records) ++n[static_cast<std::size_t>(r.label)];
    return n;
  }
};

// One JSON object per line:
//   {"utt_id": ..., "session": 1..5, "speaker": ..., "label": ...,
//    "audio": ..., "transcript": ..., "features": {"<source>": path}}
// "features.<source>" top-level keys are accepted too. Relative paths are
// resolved against the manifest's directory. Blank lines and lines starting
// with '#' are skipped.
inline Manifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir) {
  using nlohmann::json;
  Manifest m;
  std::set<std::string> ids;
  std::map<std::string, int> speaker_session;
  std::map<int, std::set<std::string>> session_speakers;
  auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  };
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const std::string where = "manifest line " + std::to_string(lineno);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw FormatError(where + ": " + e.what());
    }
    if (!j.is_object()) throw FormatError(where + ": expected a JSON object");
    auto str_field = [&](const char* key) -> std::string {
      if (!j.contains(key) || !j[key].is_string()) {
        throw FormatError(where + ": field '" + key + "' missing or not a string");
      }
      return j[key].get<std::string>();
    };
    UtteranceRecord r;
    r.utt_id = str_field("utt_id");
    if (!j.contains("session") || !j["session"].is_number_integer()) {
      throw FormatError(where + ": field 'session' missing or not an integer");
    }
    r.session = j["session"].get<int>();
    r.speaker = str_field("speaker");
    r.raw_label = str_field("label");
    if (j.contains("audio")) r.audio = resolve(str_field("audio"));
    if (j.contains("transcript") && j["transcript"].is_string()) {
      r.transcript = j["transcript"].get<std::string>();
    }
    if (j.contains("features")) {
      if (!j["features"].is_object()) throw FormatError(where + ": 'features' must be an object");
      for (const auto& [name, value] : j["features"].items()) {
        if (!value.is_string()) throw FormatError(where + ": features." + name + " must be a string");
        r.features[name] = resolve(value.get<std::string>());
      }
    }
    for (const auto& [key, value] : j.items()) {
      if (key.rfind("features.", 0) == 0) {
        if (!value.is_string()) throw FormatError(where + ": " + key + " must be a string");
        r.features[key.substr(9)] = resolve(value.get<std::string>());
      }
    }
    if (r.session < 1 || r.session > kNumSessions) {
      throw DataError(where + ": session " + std::to_string(r.session) + " outside 1..5");
    }
    const auto label = canonical_label(r.raw_label);
    if (!label) {
      ++m.excluded;
      ++m.excluded_by_label[r.raw_label];
      continue;
    }
    r.label = *label;
    if (!ids.insert(r.utt_id).second) {
      throw DataError(where + ": duplicate utt_id '" + r.utt_id + "'");
    }
    auto [it, fresh] = speaker_session.emplace(r.speaker, r.session);
    if (!fresh && it->second != r.session) {
      throw DataError(where + ": speaker '" + r.speaker + "' appears in sessions " +
                      std::to_string(it->second) + " and " + std::to_string(r.session));
    }
    auto& speakers = session_speakers[r.session];
    speakers.insert(r.speaker);
    if (speakers.size() > 2) {
      throw DataError(where + ": session " + std::to_string(r.session) +
                      " has more than two speakers");
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest '" + path.string() + "'");
  Manifest m = parse_manifest(in, path.parent_path());
  m.path = path;
  return m;
}

inline std::string manifest_line(const UtteranceRecord& r, const std::filesystem::path& base_dir) {
  nlohmann::ordered_json j;
  auto rel = [&](const std::filesystem::path& p) {
    return p.is_absolute() ? std::filesystem::relative(p, base_dir).generic_string()
                           : p.generic_string();
  };
  j["utt_id"] = r.utt_id;
  j["session"] = r.session;
  j["speaker"] = r.speaker;
  j["label"] = r.raw_label;
  if (!r.audio.empty()) j["audio"] = rel(r.audio);
  if (r.transcript) j["transcript"] = *r.transcript;
  if (!r.features.empty()) {
    nlohmann::ordered_json f = nlohmann::ordered_json::object();
    for (const auto& [name, p] : r.features) f[name] = rel(p);
    j["features"] = f;
  }
  return j.dump();
}

struct Fold {
  int index = 0;  // 1..5, the held-out session
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;
};

struct FoldPlan {
  std::uint64_t seed = 0;
  std::vector<Fold> folds;
};

inline std::uint64_t fold_seed(std::uint64_t seed, int fold) {
  return seed + static_cast<std::uint64_t>(fold);
}

// Leave-one-session-out: fold k tests on session k; the remaining
// utterances are shuffled (seed + k) and split round(0.8 n) / rest.
inline FoldPlan make_folds(const std::vector<UtteranceRecord>& records, std::uint64_t seed) {
  std::array<std::size_t, kNumSessions + 1> per_session{};
  for (const auto& r : records) {
    if (r.session < 1 || r.session > kNumSessions) {
      throw DataError("utterance '" + r.utt_id + "' has session " + std::to_string(r.session));
    }
    ++per_session[static_cast<std::size_t>(r.session)];
  }
  for (int s = 1; s <= kNumSessions; ++s) {
    if (per_session[static_cast<std::size_t>(s)] == 0) {
      throw DataError("session " + std::to_string(s) + " has zero utterances");
    }
  }
  std::vector<const UtteranceRecord*> sorted;
  for (const auto& r : records) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(),
            [](const auto* a, const auto* b) { return a->utt_id < b->utt_id; });

  FoldPlan plan;
  plan.seed = seed;
  for (int k = 1; k <= kNumSessions; ++k) {
    Fold fold;
    fold.index = k;
    std::vector<std::string> rest;
    for (const auto* r : sorted) {
      (r->session == k ? fold.test : rest).push_back(r->utt_id);
    }
    Rng rng(fold_seed(seed, k));
    std::shuffle(rest.begin(), rest.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(rest.size())));
    fold.train.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_train));
    fold.validation.assign(rest.begin() + static_cast<std::ptrdiff_t>(n_train), rest.end());
    plan.folds.push_back(std::move(fold));
  }
  return plan;
}

// Returns every violated partition invariant (empty when the plan is sound).
inline std::vector<std::string> check_fold_plan(const FoldPlan& plan,
                                                const std::vector<UtteranceRecord>& records) {
  std::vector<std::string> problems;
  std::map<std::string, const UtteranceRecord*> by_id;
  for (const auto& r : records) by_id[r.utt_id] = &r;
  std::map<std::string, int> test_count;
  if (plan.folds.size() != kNumSessions) {
    problems.push_back("plan has " + std::to_string(plan.folds.size()) + " folds");
  }
  for (const auto& f : plan.folds) {
    const std::string tag = "fold " + std::to_string(f.index) + ": ";
    std::map<std::string, int> seen;
    for (const auto* part : {&f.train, &f.validation, &f.test})
      for (const auto& id : *part) ++seen[id];
    for (const auto& [id, n] : seen) {
      if (n > 1) problems.push_back(tag + "'" + id + "' is in more than one subset");
      if (!by_id.count(id)) problems.push_back(tag + "unknown utterance '" + id + "'");
    }
    if (seen.size() != by_id.size()) {
      problems.push_back(tag + "subsets cover " + std::to_string(seen.size()) + " of " +
                         std::to_string(by_id.size()) + " utterances");
    }
    std::set<std::string> test_speakers;
    for (const auto& id : f.test) {
      ++test_count[id];
      auto it = by_id.find(id);
      if (it == by_id.end()) continue;
      test_speakers.insert(it->second->speaker);
      if (it->second->session != f.index) {
        problems.push_back(tag + "test utterance '" + id + "' is from session " +
                           std::to_string(it->second->session));
      }
    }
    std::size_t expected_test = 0;
    for (const auto& r : records) expected_test += r.session == f.index;
    if (f.test.size() != expected_test) {
      problems.push_back(tag + "test set is not exactly session " + std::to_string(f.index));
    }
    for (const auto* part : {&f.train, &f.validation})
      for (const auto& id : *part) {
        auto it = by_id.find(id);
        if (it != by_id.end() && test_speakers.count(it->second->speaker)) {
          problems.push_back(tag + "speaker '" + it->second->speaker +
                             "' is in both test and train/validation");
        }
      }
    const std::size_t n = f.train.size() + f.validation.size();
    const auto want = static_cast<long long>(std::llround(0.8 * static_cast<double>(n)));
    if (std::llabs(static_cast<long long>(f.train.size()) - want) > 1) {
      problems.push_back(tag + "train size " + std::to_string(f.train.size()) +
                         " is not round(0.8 * " + std::to_string(n) + ")");
    }
  }
  for (const auto& [id, rec] : by_id) {
    if (test_count[id] != 1) {
      problems.push_back("'" + id + "' is tested in " + std::to_string(test_count[id]) + " folds");
    }
  }
  return problems;
}

struct AccessEvent {
  int fold = 0;
  Stage stage = Stage::kTrain;
  std::string utt_id;
  std::string what;  // "inputs" or "label"
};

class AccessLog {
 public:
  void record(AccessEvent e) {
    std::lock_guard lock(mu_);
    events_.push_back(std::move(e));
  }
  std::vector<AccessEvent> events() const {
    std::lock_guard lock(mu_);
    return events_;
  }
  void clear() {
    std::lock_guard lock(mu_);
    events_.clear();
  }

 private:
  mutable std::mutex mu_;
  std::vector<AccessEvent> events_;
};

// Reads (and caches) the raw input matrix of an utterance for a source: the
// filterbank for fbank and toy sources, the SERF file for file:<name>.
class FeatureStore {
 public:
  FeatureStore(const Manifest& manifest, FbankConfig fbank = {}) : fbank_(fbank) {
    for (const auto& r : manifest.records) records_.emplace(r.utt_id, r);
  }

  const UtteranceRecord& record(const std::string& utt_id) const {
    auto it = records_.find(utt_id);
    if (it == records_.end()) throw DataError("unknown utterance '" + utt_id + "'");
    return it->second;
  }

  std::shared_ptr<const Tensor<float>> get(const std::string& utt_id, const SourceTag& source) {
    const std::string key = (source.kind == SourceTag::Kind::kFile ? source.str() : "fbank") +
                            "\n" + utt_id;
    {
      std::lock_guard lock(mu_);
      auto it = cache_.find(key);
      if (it != cache_.end()) return it->second;
    }
    const auto& r = record(utt_id);
    Tensor<float> m;
    if (source.kind == SourceTag::Kind::kFile) {
      auto f = r.features.find(source.name);
      if (f == r.features.end()) {
        throw DataError("utterance '" + utt_id + "' has no features." + source.name + " entry");
      }
      m = load_features(f->second, source.name).data;
    } else {
      if (r.audio.empty()) throw DataError("utterance '" + utt_id + "' has no audio path");
      m = log_mel_fbank(read_wav(r.audio), fbank_);
    }
    auto ptr = std::make_shared<const Tensor<float>>(std::move(m));
    std::lock_guard lock(mu_);
    return cache_.emplace(key, std::move(ptr)).first->second;
  }

  const FbankConfig& fbank_config() const { return fbank_; }

 private:
  FbankConfig fbank_;
  std::map<std::string, UtteranceRecord> records_;
  std::mutex mu_;
  std::map<std::string, std::shared_ptr<const Tensor<float>>> cache_;
};

// ExampleSource over one fold. Only ids that have been opened are served;
// the test ids are opened explicitly for the final evaluation. Every access
// is logged with the current stage.
class FoldSource final : public ExampleSource {
 public:
  FoldSource(FeatureStore& store, std::vector<SourceTag> branches, int fold, AccessLog* log)
      : store_(store), branches_(std::move(branches)), fold_(fold), log_(log) {}

  void open(const std::vector<std::string>& ids) { allowed_.insert(ids.begin(), ids.end()); }

  std::vector<std::shared_ptr<const Tensor<float>>> inputs(const std::string& utt_id) override {
    check(utt_id, "inputs");
    std::vector<std::shared_ptr<const Tensor<float>>> out;
    for (const auto& b : branches_) out.push_back(store_.get(utt_id, b));
    return out;
  }

  int label(const std::string& utt_id) override {
    check(utt_id, "label");
    return store_.record(utt_id).label;
  }

  void enter(Stage stage) override { stage_ = stage; }
  Stage stage() const { return stage_; }

 private:
  void check(const std::string& utt_id, const char* what) {
    if (log_) log_->record({fold_, stage_, utt_id, what});
    if (!allowed_.count(utt_id)) {
      throw DataError("fold " + std::to_string(fold_) + ": utterance '" + utt_id +
                      "' is not available during stage " + to_string(stage_));
    }
  }

  FeatureStore& store_;
  std::vector<SourceTag> branches_;
  int fold_;
  AccessLog* log_;
  Stage stage_ = Stage::kTrain;
  std::set<std::string> allowed_;
};

}  // namespace serforge
