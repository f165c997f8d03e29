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
#include <complex>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "serforge/serialization.hpp"
#include "serforge/tensor.hpp"

namespace serforge {

inline constexpr int kSampleRate = 16000;

struct Waveform {
  std::vector<float> samples;  // mono, in [-1, 1]
  int sample_rate = kSampleRate;

  double duration() const {
    return static_cast<double>(samples.size()) / sample_rate;
  }
};

// Reads a RIFF/WAVE file holding 16-bit PCM, 16 kHz, mono. Anything else is a
// FormatError naming the offending header field.
inline Waveform decode_wav(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("RIFF");
  r.get<std::uint32_t>("header");
  r.expect_magic("WAVE");
  bool have_fmt = false;
  Waveform wave;
  while (r.remaining() >= 8) {
    char id[4];
    r.get_bytes(id, 4, "chunk id");
    const auto size = r.get<std::uint32_t>("chunk size");
    const std::string chunk(id, 4);
    if (chunk == "fmt ") {
      const auto at = r.pos();
      r.need(16, "fmt");
      const auto format = r.get<std::uint16_t>("fmt");
      const auto channels = r.get<std::uint16_t>("fmt");
      const auto rate = r.get<std::uint32_t>("fmt");
      r.get<std::uint32_t>("fmt");  // byte rate
      r.get<std::uint16_t>("fmt");  // block align
      const auto bits = r.get<std::uint16_t>("fmt");
      if (format != 1) {
        throw FormatError("unsupported WAV encoding: audio_format=" +
                              std::to_string(format) + " (need 1 = PCM)", at);
      }
      if (channels != 1) {
        throw FormatError("unsupported WAV layout: channels=" +
                              std::to_string(channels) + " (need mono)", at + 2);
      }
      if (rate != static_cast<std::uint32_t>(kSampleRate)) {
        throw FormatError("unsupported WAV sample rate: sample_rate=" +
                              std::to_string(rate) + " (need 16000)", at + 4);
      }
      if (bits != 16) {
        throw FormatError("unsupported WAV encoding: bits_per_sample=" +
                              std::to_string(bits) + " (need 16)", at + 14);
      }
      r.need(size - 16 + (size & 1), "fmt");
      for (std::uint32_t i = 16; i < size + (size & 1); ++i) r.get<std::uint8_t>("fmt");
      have_fmt = true;
    } else if (chunk == "data") {
      if (!have_fmt) throw FormatError("data chunk before fmt chunk", r.pos());
      r.need(size, "data");
      wave.samples.resize(size / 2);
      for (auto& s : wave.samples) {
        s = static_cast<float>(r.get<std::int16_t>("data")) / 32768.0f;
      }
      if (size & 1) r.get<std::uint8_t>("data");
      return wave;
    } else {
      r.need(size + (size & 1), "chunk");
      for (std::uint32_t i = 0; i < size + (size & 1); ++i) r.get<std::uint8_t>("chunk");
    }
  }
  throw FormatError("no data chunk", r.pos());
}

inline Waveform read_wav(const std::filesystem::path& path) {
  try {
    return decode_wav(io::read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline std::vector<std::uint8_t> encode_wav(const std::vector<std::int16_t>& pcm,
                                            int sample_rate = kSampleRate,
                                            int channels = 1) {
  io::ByteWriter w;
  const auto data_bytes = static_cast<std::uint32_t>(pcm.size() * 2);
  w.put_bytes("RIFF", 4);
  w.put<std::uint32_t>(36 + data_bytes);
  w.put_bytes("WAVE", 4);
  w.put_bytes("fmt ", 4);
  w.put<std::uint32_t>(16);
  w.put<std::uint16_t>(1);
  w.put<std::uint16_t>(static_cast<std::uint16_t>(channels));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(sample_rate));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(sample_rate * channels * 2));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(channels * 2));
  w.put<std::uint16_t>(16);
  w.put_bytes("data", 4);
  w.put<std::uint32_t>(data_bytes);
  w.put_bytes(pcm.data(), pcm.size() * 2);
  return std::move(w.bytes());
}

// Quantizes [-1, 1] samples to 16-bit PCM with clipping.
inline std::vector<std::int16_t> to_pcm16(const std::vector<float>& samples) {
  std::vector<std::int16_t> pcm(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double v = std::clamp(static_cast<double>(samples[i]) * 32768.0, -32768.0, 32767.0);
    pcm[i] = static_cast<std::int16_t>(std::lround(v));
  }
  return pcm;
}

inline void write_wav(const std::filesystem::path& path, const Waveform& wave) {
  io::write_file(path, encode_wav(to_pcm16(wave.samples), wave.sample_rate));
}

struct FbankConfig {
  double window_ms = 25.0;
  double hop_ms = 10.0;
  std::size_t n_mels = 40;
  double pre_emphasis = 0.97;
  std::size_t fft_size = 512;
  double log_floor = 1e-10;
  double low_hz = 0.0;
  double high_hz = 8000.0;

  std::size_t window_samples() const {
    return static_cast<std::size_t>(std::lround(window_ms * kSampleRate / 1000.0));
  }
  std::size_t hop_samples() const {
    return static_cast<std::size_t>(std::lround(hop_ms * kSampleRate / 1000.0));
  }

  void validate() const {
    std::vector<std::string> errs;
    if (!(hop_ms > 0.0)) errs.push_back("fbank.hop_ms must be > 0");
    if (!(window_ms > hop_ms)) errs.push_back("fbank.window_ms must exceed hop_ms");
    if (n_mels < 1) errs.push_back("fbank.n_mels must be >= 1");
    if (fft_size < window_samples()) {
      errs.push_back("fbank.fft_size " + std::to_string(fft_size) +
                     " is smaller than the window (" +
                     std::to_string(window_samples()) + " samples)");
    }
    if (fft_size == 0 || (fft_size & (fft_size - 1)) != 0) {
      errs.push_back("fbank.fft_size must be a power of two");
    }
    if (!(log_floor > 0.0)) errs.push_back("fbank.log_floor must be > 0");
    if (!(high_hz > low_hz) || high_hz > kSampleRate / 2.0) {
      errs.push_back("fbank band must satisfy 0 <= low_hz < high_hz <= 8000");
    }
    if (!errs.empty()) throw ConfigError(errs);
  }
};

inline std::size_t fbank_frame_count(std::size_t num_samples, const FbankConfig& cfg) {
  const std::size_t win = cfg.window_samples();
  if (num_samples < win) return 0;
  return 1 + (num_samples - win) / cfg.hop_samples();
}

namespace dsp {

// In-place iterative radix-2 FFT; size must be a power of two.
inline void fft(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double angle = -2.0 * std::numbers::pi / static_cast<double>(len);
    const std::complex<double> step(std::cos(angle), std::sin(angle));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const auto u = a[i + k];
        const auto v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= step;
      }
    }
  }
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Triangular filters on the HTK mel scale, [n_mels, fft_size/2 + 1]. The
// triangles are linear in mel.
inline std::vector<std::vector<double>> mel_filterbank(const FbankConfig& cfg) {
  const std::size_t bins = cfg.fft_size / 2 + 1;
  const double lo = hz_to_mel(cfg.low_hz), hi = hz_to_mel(cfg.high_hz);
  const double spacing = (hi - lo) / static_cast<double>(cfg.n_mels + 1);
  std::vector<std::vector<double>> banks(cfg.n_mels, std::vector<double>(bins, 0.0));
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    const double left = lo + spacing * static_cast<double>(m);
    const double center = left + spacing;
    const double right = center + spacing;
    for (std::size_t k = 0; k < bins; ++k) {
      const double hz = static_cast<double>(k) * kSampleRate / static_cast<double>(cfg.fft_size);
      const double mel = hz_to_mel(hz);
      if (mel > left && mel <= center) {
        banks[m][k] = (mel - left) / (center - left);
      } else if (mel > center && mel < right) {
        banks[m][k] = (right - mel) / (right - center);
      }
    }
  }
  return banks;
}

}  // namespace dsp

// pre-emphasis -> framing -> Hamming -> |FFT|^2 -> mel -> ln(max(e, floor)).
// Output is [T, n_mels] with T = 1 + (N - window) / hop.
inline Tensor<float> log_mel_fbank(const Waveform& wave, const FbankConfig& cfg = {}) {
  cfg.validate();
  if (wave.sample_rate != kSampleRate) {
    throw DataError("waveform sample_rate=" + std::to_string(wave.sample_rate) +
                    ", need 16000");
  }
  const std::size_t win = cfg.window_samples(), hop = cfg.hop_samples();
  const std::size_t n = wave.samples.size();
  if (n < win) {
    throw DataError("waveform has " + std::to_string(n) +
                    " samples, shorter than one " + std::to_string(win) +
                    "-sample analysis window");
  }
  const std::size_t frames = fbank_frame_count(n, cfg);

  std::vector<double> emphasized(n);
  emphasized[0] = wave.samples[0];
  for (std::size_t i = 1; i < n; ++i) {
    emphasized[i] = static_cast<double>(wave.samples[i]) -
                    cfg.pre_emphasis * static_cast<double>(wave.samples[i - 1]);
  }
  std::vector<double> window(win);
  for (std::size_t i = 0; i < win; ++i) {
    window[i] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                       static_cast<double>(win - 1));
  }
  const auto banks = dsp::mel_filterbank(cfg);
  const std::size_t bins = cfg.fft_size / 2 + 1;

  Tensor<float> out(Shape{frames, cfg.n_mels});
  std::vector<std::complex<double>> buf(cfg.fft_size);
  std::vector<double> power(bins);
  for (std::size_t f = 0; f < frames; ++f) {
    std::fill(buf.begin(), buf.end(), std::complex<double>{});
    for (std::size_t i = 0; i < win; ++i) buf[i] = emphasized[f * hop + i] * window[i];
    dsp::fft(buf);
    for (std::size_t k = 0; k < bins; ++k) power[k] = std::norm(buf[k]);
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
      double e = 0.0;
      for (std::size_t k = 0; k < bins; ++k) e += banks[m][k] * power[k];
      out.at(f, m) = static_cast<float>(std::log(std::max(e, cfg.log_floor)));
    }
  }
  return out;
}

}  // namespace serforge
