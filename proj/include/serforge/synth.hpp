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

// Synthetic stand-in for the emotion corpus: five sessions with two speakers
// each, one modulated tone family per class. Besides the WAV files it writes
// stand-in SERF features for the w2v2, hubert and bert sources so configs
// that name external features run without any pretrained model.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "serforge/audio.hpp"
#include "serforge/dataset.hpp"
#include "serforge/upstream.hpp"

namespace serforge {

struct SynthConfig {
  std::size_t utts_per_speaker_per_class = 5;  // 5 sessions x 2 speakers -> 50 per class
  double min_duration = 0.5;
  double max_duration = 1.0;
  std::uint64_t seed = 7;
  bool stand_in_features = true;
  std::size_t audio_feature_dim = 32;  // w2v2 / hubert stand-ins, 50 frames per second
  std::size_t text_feature_dim = 16;   // bert stand-in, one frame per token
};

namespace synth {

struct ToneSpec {
  double carrier_hz;
  double amplitude;
  double am_hz;     // amplitude modulation rate
  double am_depth;
  double fm_hz;     // frequency modulation rate
  double fm_dev_hz;
};

// angry: loud, high, fast tremolo. happy: mid, vibrato. neutral: steady.
// sad: quiet, low, slow swell.
inline constexpr std::array<ToneSpec, kNumEmotions> kTones{{
    {900.0, 0.60, 12.0, 0.8, 0.0, 0.0},
    {600.0, 0.45, 0.0, 0.0, 5.0, 80.0},
    {350.0, 0.30, 0.0, 0.0, 0.0, 0.0},
    {180.0, 0.15, 2.0, 0.6, 0.0, 0.0},
}};

inline const std::array<std::vector<std::string>, kNumEmotions>& vocabulary() {
  static const std::array<std::vector<std::string>, kNumEmotions> words{{
      {"stop", "now", "enough", "never", "why", "hate"},
      {"great", "love", "yes", "wonderful", "fun", "wow"},
      {"the", "meeting", "is", "at", "noon", "okay"},
      {"miss", "alone", "sorry", "lost", "tired", "gone"},
  }};
  return words;
}

inline Waveform tone(int cls, double duration, double pitch_scale, Rng& rng) {
  const ToneSpec& s = kTones[static_cast<std::size_t>(cls)];
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> noise(0.0, 0.01);
  const double phi0 = phase(rng), am_phi = phase(rng), fm_phi = phase(rng);
  const auto n = static_cast<std::size_t>(std::llround(duration * kSampleRate));
  Waveform w;
  w.samples.resize(n);
  double phi = phi0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / kSampleRate;
    const double f = pitch_scale *
                     (s.carrier_hz + s.fm_dev_hz * std::sin(2.0 * std::numbers::pi * s.fm_hz * t + fm_phi));
    phi += 2.0 * std::numbers::pi * f / kSampleRate;
    const double env = 1.0 - s.am_depth * 0.5 * (1.0 + std::sin(2.0 * std::numbers::pi * s.am_hz * t + am_phi));
    const double v = s.amplitude * env * (std::sin(phi) + 0.3 * std::sin(2.0 * phi)) + noise(rng);
    w.samples[i] = static_cast<float>(std::clamp(v, -1.0, 1.0));
  }
  return w;
}

// Frames of a stand-in source: a class direction plus a speaker offset plus
// unit noise.
inline Tensor<float> stand_in(std::size_t frames, const std::vector<float>& class_dir,
                              const std::vector<float>& speaker_dir, Rng& rng) {
  const std::size_t d = class_dir.size();
  Tensor<float> m({frames, d});
  std::normal_distribution<float> noise(0.0f, 1.0f);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t j = 0; j < d; ++j) m.at(t, j) = class_dir[j] + speaker_dir[j] + noise(rng);
  return m;
}

inline std::vector<float> random_direction(std::size_t d, float scale, Rng& rng) {
  std::normal_distribution<float> g(0.0f, scale);
  std::vector<float> v(d);
  for (auto& x : v) x = g(rng);
  return v;
}

}  // namespace synth

// Writes wav/, features/<source>/ and manifest.jsonl under `out`. Returns
// the manifest path. Output is a pure function of the config.
inline std::filesystem::path generate_synthetic_corpus(const std::filesystem::path& out,
                                                       const SynthConfig& cfg = {}) {
  namespace fs = std::filesystem;
  if (cfg.utts_per_speaker_per_class < 1) throw ConfigError("utts_per_speaker_per_class must be >= 1");
  if (!(cfg.min_duration >= 0.1) || cfg.max_duration < cfg.min_duration) {
    throw ConfigError("synthetic durations must satisfy 0.1 <= min <= max");
  }
  fs::create_directories(out / "wav");
  const std::array<const char*, 3> sources{"w2v2", "hubert", "bert"};
  if (cfg.stand_in_features)
    for (const char* s : sources) fs::create_directories(out / "features" / s);

  Rng rng(cfg.seed);
  // Fixed per-source class and speaker directions.
  std::array<std::array<std::vector<float>, kNumEmotions>, 3> class_dirs;
  for (std::size_t s = 0; s < sources.size(); ++s) {
    const std::size_t d = s == 2 ? cfg.text_feature_dim : cfg.audio_feature_dim;
    for (auto& v : class_dirs[s]) v = synth::random_direction(d, 0.5f, rng);
  }

  std::ofstream manifest(out / "manifest.jsonl");
  std::uniform_real_distribution<double> dur(cfg.min_duration, cfg.max_duration);
  std::uniform_int_distribution<std::size_t> word_pick(0, 5);
  std::uniform_int_distribution<int> word_count(2, 6);
  const char* const short_names[] = {"ang", "hap", "neu", "sad"};
  for (int session = 1; session <= kNumSessions; ++session) {
    for (const char gender : {'F', 'M'}) {
      const std::string speaker = "Ses0" + std::to_string(session) + gender;
      const double pitch = gender == 'F' ? 1.0 + 0.015 * session : 1.0 - 0.015 * session;
      std::array<std::vector<float>, 3> speaker_dirs;
      for (std::size_t s = 0; s < sources.size(); ++s) {
        speaker_dirs[s] = synth::random_direction(class_dirs[s][0].size(), 0.2f, rng);
      }
      for (int cls = 0; cls < static_cast<int>(kNumEmotions); ++cls) {
        for (std::size_t u = 0; u < cfg.utts_per_speaker_per_class; ++u) {
          UtteranceRecord r;
          char idx[8];
          std::snprintf(idx, sizeof idx, "%03zu", u);
          r.utt_id = speaker + "_" + short_names[cls] + "_" + idx;
          r.session = session;
          r.speaker = speaker;
          // Every other happy utterance carries the raw "excited" label.
          r.raw_label = cls == 1 && u % 2 == 1 ? "excited" : kEmotionNames[static_cast<std::size_t>(cls)];
          const double seconds = dur(rng);
          const Waveform wave = synth::tone(cls, seconds, pitch, rng);
          r.audio = fs::path("wav") / (r.utt_id + ".wav");
          write_wav(out / r.audio, wave);
          std::string text;
          const int words = word_count(rng);
          for (int w = 0; w < words; ++w) {
            if (w) text += ' ';
            text += synth::vocabulary()[static_cast<std::size_t>(cls)][word_pick(rng)];
          }
          r.transcript = text;
          if (cfg.stand_in_features) {
            for (std::size_t s = 0; s < sources.size(); ++s) {
              const std::size_t frames =
                  s == 2 ? static_cast<std::size_t>(words)
                         : std::max<std::size_t>(1, static_cast<std::size_t>(seconds * 50.0));
              const fs::path rel = fs::path("features") / sources[s] / (r.utt_id + ".serf");
              save_features(out / rel,
                            synth::stand_in(frames, class_dirs[s][static_cast<std::size_t>(cls)],
                                            speaker_dirs[s], rng));
              r.features[sources[s]] = rel;
            }
          }
          manifest << manifest_line(r, out) << '\n';
        }
      }
    }
  }
  return out / "manifest.jsonl";
}

}  // namespace serforge
