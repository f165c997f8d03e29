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

// The ser_forge command line. run_cli() is the whole program; main() only
// forwards to it so tests can drive every subcommand in-process.
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration error.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "serforge/experiment.hpp"
#include "serforge/synth.hpp"

namespace serforge {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;

// Folds to run at once: the requested count (0 = hardware threads), capped
// by SER_FORGE_THREADS when set.
inline std::size_t resolve_threads(std::size_t requested) {
  std::size_t n = requested ? requested : std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("SER_FORGE_THREADS")) {
    try {
      const long cap = std::stol(env);
      if (cap >= 1) n = std::min<std::size_t>(n, static_cast<std::size_t>(cap));
    } catch (const std::exception&) {
      throw ConfigError(std::string("SER_FORGE_THREADS: not a number: '") + env + "'");
    }
  }
  return std::max<std::size_t>(1, n);
}

struct ExtractSummary {
  std::size_t written = 0;
  std::size_t skipped = 0;
  std::vector<std::string> failed;  // "utt_id: reason"
};

// One SERF file of log-mel features per utterance, named by utt_id. A file
// whose bytes already match is left alone.
inline ExtractSummary extract_fbank(const Manifest& manifest, const FbankConfig& fbank,
                                    const std::filesystem::path& out) {
  std::filesystem::create_directories(out);
  ExtractSummary s;
  for (const auto& r : manifest.records) {
    try {
      const auto bytes = encode_feature_matrix(log_mel_fbank(read_wav(r.audio), fbank));
      const auto path = out / (r.utt_id + ".serf");
      if (std::filesystem::exists(path) && fnv1a64(io::read_file(path)) == fnv1a64(bytes) &&
          std::filesystem::file_size(path) == bytes.size()) {
        ++s.skipped;
        continue;
      }
      io::write_file(path, bytes);
      ++s.written;
    } catch (const Error& e) {
      s.failed.push_back(r.utt_id + ": " + e.what());
    }
  }
  return s;
}

namespace detail {

inline std::filesystem::path output_dir(const ExperimentConfig& cfg, const std::string& flag) {
  return flag.empty() ? cfg.output_dir : std::filesystem::path(flag);
}

inline std::vector<int> fold_list(int fold) {
  if (fold == 0) return {1, 2, 3, 4, 5};
  if (fold < 1 || fold > kNumSessions) throw ConfigError("--fold must be in 1..5");
  return {fold};
}

}  // namespace detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"ser_forge: speech emotion recognition experiments"};
  app.require_subcommand(1);

  std::string config_path, out_flag, manifest_path, checkpoint_path;
  int fold = 0;
  std::size_t threads = 0;
  bool quiet = false;
  FbankConfig fbank;
  SynthConfig synth_cfg;
  std::vector<std::string> checkpoints;

  auto* synth = app.add_subcommand("synth-data", "write the synthetic 4-class corpus");
  synth->add_option("--out", out_flag, "output directory")->required();
  synth->add_option("--per-speaker", synth_cfg.utts_per_speaker_per_class,
                    "utterances per speaker and class");
  synth->add_option("--seed", synth_cfg.seed, "generator seed");

  auto* extract = app.add_subcommand("extract", "compute log-mel filterbank SERF files");
  extract->add_option("--manifest", manifest_path, "manifest (JSON lines)")->required();
  extract->add_option("--out", out_flag, "output directory")->required();
  extract->add_option("--n-mels", fbank.n_mels, "mel bands");

  auto* validate = app.add_subcommand("validate", "check experiment configs without running them");
  std::vector<std::string> configs;
  validate->add_option("configs", configs, "config files")->required();

  auto* train = app.add_subcommand("train", "train (and average) per fold; no test evaluation");
  auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint on a fold's test session");
  auto* run = app.add_subcommand("run", "full pipeline: train, select, average, test, report");
  for (auto* sub : {train, evaluate, run}) {
    sub->add_option("--config", config_path, "experiment config (JSON)")->required();
    sub->add_option("--out", out_flag, "output directory (overrides the config)");
    sub->add_flag("--quiet", quiet, "no progress lines");
  }
  train->add_option("--fold", fold, "single fold 1..5 (default: all)");
  evaluate->add_option("--fold", fold, "fold 1..5")->required();
  evaluate->add_option("--checkpoint", checkpoint_path, "SERC checkpoint")->required();
  for (auto* sub : {train, run}) sub->add_option("--threads", threads, "parallel folds");

  auto* average = app.add_subcommand("average", "elementwise mean of SERC checkpoints");
  average->add_option("checkpoints", checkpoints, "input checkpoints")->required();
  average->add_option("--out", out_flag, "output checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }

  const ProgressSink progress = [&](const std::string& line) {
    if (!quiet) err << line << std::endl;
  };

  try {
    if (*synth) {
      const auto path = generate_synthetic_corpus(out_flag, synth_cfg);
      out << "wrote " << path.string() << '\n';
    } else if (*extract) {
      fbank.validate();
      const auto manifest = load_manifest(manifest_path);
      const auto s = extract_fbank(manifest, fbank, out_flag);
      out << "written " << s.written << ", skipped " << s.skipped << ", failed " << s.failed.size()
          << '\n';
      for (const auto& f : s.failed) err << "error: " << f << '\n';
      return s.failed.empty() ? kExitOk : kExitRuntime;
    } else if (*validate) {
      int status = kExitOk;
      for (const auto& c : configs) {
        try {
          load_experiment_config(c);
          out << c << ": ok\n";
        } catch (const ConfigError& e) {
          for (const auto& d : e.diagnostics()) err << c << ": " << d << '\n';
          status = kExitConfig;
        }
      }
      return status;
    } else if (*average) {
      std::vector<std::filesystem::path> paths(checkpoints.begin(), checkpoints.end());
      save_checkpoint(out_flag, average_checkpoints(paths));
      out << "averaged " << paths.size() << " checkpoints into " << out_flag << '\n';
    } else {
      const auto cfg = load_experiment_config(config_path);
      const auto dir = detail::output_dir(cfg, out_flag);
      if (*run) {
        const auto report = run_experiment(cfg, dir, resolve_threads(threads), nullptr, progress);
        out << report.to_table();
      } else if (*train) {
        Experiment exp(cfg);
        const auto folds = detail::fold_list(fold);
        const std::size_t n = std::min(resolve_threads(threads), folds.size());
        std::vector<std::exception_ptr> errors(folds.size());
        std::atomic<std::size_t> next{0};
        auto worker = [&] {
          for (std::size_t i; (i = next++) < folds.size();) {
            try {
              exp.train_fold(folds[i], dir, progress);
            } catch (...) {
              errors[i] = std::current_exception();
            }
          }
        };
        std::vector<std::thread> pool;
        for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
        worker();
        for (auto& t : pool) t.join();
        for (auto& e : errors)
          if (e) std::rethrow_exception(e);
        std::ofstream(dir / "run_manifest.json") << exp.run_manifest().dump(2) << '\n';
        for (int k : folds) out << (exp.fold_dir(dir, k) / "final.serc").string() << '\n';
      } else if (*evaluate) {
        Experiment exp(cfg);
        const auto m = exp.test_fold(detail::fold_list(fold).front(), load_checkpoint(checkpoint_path));
        MetricsReport report = exp.report_skeleton();
        report.folds = {m};
        report.mean_wacc = m.wacc;
        report.mean_uacc = m.uacc;
        out << report.to_json().dump(2) << '\n';
      }
    }
  } catch (const ConfigError& e) {
    for (const auto& d : e.diagnostics()) err << "config error: " << d << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace serforge
