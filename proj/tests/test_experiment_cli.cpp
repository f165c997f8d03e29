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


#include <gtest/gtest.h>

#include "experiment_fixtures.hpp"
#include "property_checks.hpp"

namespace serforge::testing {
namespace {

class ExperimentTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new TempDir("experiment");
    manifest_ = synthetic_corpus(root_->path() / "corpus", 2);
  }
  static void TearDownTestSuite() { delete root_; }

  static std::filesystem::path dir(const std::string& name) { return root_->path() / name; }

  static inline TempDir* root_ = nullptr;
  static inline std::filesystem::path manifest_;
};

bool contains(const std::string& s, const std::string& part) { return s.find(part) != std::string::npos; }

TEST_F(ExperimentTest, UnknownFieldIsConfigErrorExit2) {
  auto j = quick_file_config();
  j["learning_rate"] = 0.1;
  const auto path = write_config(dir("cfg/unknown.json"), j, manifest_, dir("out"));
  const auto r = cli({"validate", path.string()});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_TRUE(contains(r.err, "learning_rate")) << r.err;
}

TEST_F(ExperimentTest, WrongTypeIsConfigError) {
  auto j = quick_file_config();
  j["train"]["epochs"] = "many";
  const auto path = write_config(dir("cfg/type.json"), j, manifest_, dir("out"));
  const auto r = cli({"run", "--config", path.string(), "--quiet"});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_TRUE(contains(r.err, "train.epochs")) << r.err;
}

TEST_F(ExperimentTest, InvalidGraphListsValidShapes) {
  auto j = quick_file_config();
  j["fusion"] = "early";
  const auto path = write_config(dir("cfg/graph.json"), j, manifest_, dir("out"));
  const auto r = cli({"validate", path.string()});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_TRUE(contains(r.err, "valid shapes are")) << r.err;
}

TEST_F(ExperimentTest, ExtractWritesThenSkips) {
  const auto full = load_manifest(manifest_);
  // Paths in the manifest stay relative to the corpus directory.
  const auto m = (manifest_.parent_path() / "three.jsonl").string();
  {
    std::ofstream f(m);
    for (std::size_t i = 0; i < 3; ++i) f << manifest_line(full.records[i], manifest_.parent_path()) << '\n';
  }
  const auto first = cli({"extract", "--manifest", m, "--out", dir("fbank").string()});
  EXPECT_EQ(first.code, kExitOk) << first.err;
  EXPECT_TRUE(contains(first.out, "written 3, skipped 0")) << first.out;
  for (std::size_t i = 0; i < 3; ++i)
    EXPECT_EQ(load_features(dir("fbank") / (full.records[i].utt_id + ".serf")).dims(), FbankConfig{}.n_mels);
  const auto second = cli({"extract", "--manifest", m, "--out", dir("fbank").string()});
  EXPECT_TRUE(contains(second.out, "written 0, skipped 3")) << second.out;
}

TEST_F(ExperimentTest, ExtractMissingWavNamesUtterance) {
  std::ofstream(dir("missing.jsonl")) << R"({"utt_id":"Ses01F_gone","session":1,"speaker":"Ses01F","label":"sad","audio":"nowhere.wav"})"
                                      << '\n';
  const auto r = cli({"extract", "--manifest", dir("missing.jsonl").string(), "--out", dir("fbank2").string()});
  EXPECT_EQ(r.code, kExitRuntime);
  EXPECT_TRUE(contains(r.err, "Ses01F_gone")) << r.err;
}

TEST_F(ExperimentTest, AverageCommandMatchesLibrary) {
  Rng rng(3);
  std::vector<std::string> args{"average"};
  std::vector<std::filesystem::path> paths;
  for (int i = 0; i < 3; ++i) {
    paths.push_back(dir("ckpt" + std::to_string(i) + ".serc"));
    save_checkpoint(paths.back(), random_classifier_state(12, rng));
    args.push_back(paths.back().string());
  }
  args.insert(args.end(), {"--out", dir("avg.serc").string()});
  const auto r = cli(args);
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto got = load_checkpoint(dir("avg.serc"));
  const auto want = average_checkpoints(paths);
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    EXPECT_EQ(got[i].name, want[i].name);
    EXPECT_TRUE(got[i].value == want[i].value);
  }
}

TEST_F(ExperimentTest, EvaluateWithWrongFeatureDimNamesBoth) {
  ModelGraph g;
  g.branches = {{SourceTag::file("w2v2"), 16, false}};
  g.aggregators = {AggregatorKind::kMean};
  SerModel<float> other(g, 1);
  save_checkpoint(dir("dim16.serc"), other.state_dict());
  const auto path = write_config(dir("cfg/eval.json"), quick_file_config(), manifest_, dir("eval_out"));
  const auto r = cli({"evaluate", "--config", path.string(), "--fold", "1", "--checkpoint",
                      dir("dim16.serc").string(), "--quiet"});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_TRUE(contains(r.err, "feature dim 16")) << r.err;
  EXPECT_TRUE(contains(r.err, "feature dim 32")) << r.err;
}

TEST_F(ExperimentTest, RunWritesFiveFoldReportAndIsDeterministic) {
  const auto path = write_config(dir("cfg/run.json"), quick_file_config(), manifest_, dir("run_a"));
  const auto a = cli({"run", "--config", path.string(), "--quiet", "--threads", "1"});
  ASSERT_EQ(a.code, kExitOk) << a.err;
  const auto b = cli({"run", "--config", path.string(), "--quiet", "--threads", "2", "--out", dir("run_b").string()});
  ASSERT_EQ(b.code, kExitOk) << b.err;
  const auto report = read_json(dir("run_a") / "report.json");
  ASSERT_EQ(report["folds"].size(), 5u);
  std::size_t tested = 0;
  for (const auto& f : report["folds"]) tested += f["n_test"].get<std::size_t>();
  EXPECT_EQ(tested, load_manifest(manifest_).records.size());
  for (const char* key : {"set", "#", "modality", "input_feature", "FT", "upstream_AVG", "AGG", "classifier",
                          "downstream_AVG", "WACC", "UACC"})
    EXPECT_TRUE(report["row"].contains(key)) << key;
  EXPECT_EQ(read_text(dir("run_a") / "report.json"), read_text(dir("run_b") / "report.json"));
  EXPECT_TRUE(std::filesystem::exists(dir("run_a") / "run_manifest.json"));
}

TEST_F(ExperimentTest, AveragingUsesFiveCheckpointsPerComponent) {
  nlohmann::json j = quick_file_config();
  j["branches"] = {{{"source", "toy"}, {"fine_tuned", true}, {"label", "toy"}}};
  j["averaging"] = {{"upstream", true}, {"downstream", true}, {"k", 5}};
  j["upstream_train"] = {{"epochs", 5}, {"batch_size", 8}, {"lr", 0.003}};
  j["train"] = {{"epochs", 6}, {"batch_size", 8}, {"lr", 0.003}};
  const auto cfg = load_experiment_config(write_config(dir("cfg/avg.json"), j, manifest_, dir("avg_out")));
  Experiment exp(cfg);
  const auto trained = exp.train_fold(2, dir("avg_out"));
  ASSERT_EQ(trained.upstream_averaged.size(), 1u);
  EXPECT_EQ(trained.upstream_averaged[0], 5u);
  EXPECT_EQ(trained.downstream_averaged, 5u);
}

TEST_F(ExperimentTest, TestIdsOnlyReadDuringTesting) {
  AccessLog log;
  const auto cfg = load_experiment_config(write_config(dir("cfg/log.json"), quick_file_config(), manifest_, dir("log_out")));
  Experiment exp(cfg, &log);
  run_experiment(cfg, dir("log_out"), 1, &log);
  const auto events = log.events();
  EXPECT_EQ(early_test_reads(events, exp.plan()), 0u);
  std::size_t test_reads = 0;
  for (const auto& e : events) test_reads += e.stage == Stage::kTest;
  EXPECT_GT(test_reads, 0u);
}

}  // namespace
}  // namespace serforge::testing
