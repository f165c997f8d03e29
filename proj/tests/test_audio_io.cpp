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

#include <cmath>
#include <complex>
#include <numbers>

#include "test_support.hpp"

namespace serforge::testing {
namespace {

std::vector<std::uint8_t> wav_bytes(int channels, int rate, std::size_t samples = 100) {
  return encode_wav(std::vector<std::int16_t>(samples * static_cast<std::size_t>(channels), 0), rate,
                    channels);
}

Waveform sine(double hz, std::size_t n, double amplitude = 0.5) {
  Waveform w;
  w.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    w.samples[i] = static_cast<float>(amplitude * std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(i) / 16000.0));
  }
  return w;
}

// Reference filterbank written independently of the library: naive DFT,
// filters evaluated directly from the mel formula.
std::vector<std::vector<double>> reference_fbank(const std::vector<float>& x, std::size_t n_mels) {
  const std::size_t win = 400, hop = 160, nfft = 512, bins = 257;
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] - (i ? 0.97 * x[i - 1] : 0.0);
  auto mel = [](double f) { return 1127.0 * std::log(1.0 + f / 700.0); };
  const double top = mel(8000.0);
  std::vector<std::vector<double>> out;
  for (std::size_t start = 0; start + win <= x.size(); start += hop) {
    std::vector<double> frame(nfft, 0.0);
    for (std::size_t i = 0; i < win; ++i) {
      frame[i] = y[start + i] * (0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * i / (win - 1.0)));
    }
    std::vector<double> power(bins);
    for (std::size_t k = 0; k < bins; ++k) {
      std::complex<double> acc;
      for (std::size_t n = 0; n < nfft; ++n) {
        acc += frame[n] * std::polar(1.0, -2.0 * std::numbers::pi * double(k) * double(n) / double(nfft));
      }
      power[k] = std::norm(acc);
    }
    std::vector<double> row(n_mels);
    for (std::size_t m = 0; m < n_mels; ++m) {
      const double l = top * m / (n_mels + 1.0), c = top * (m + 1.0) / (n_mels + 1.0),
                   r = top * (m + 2.0) / (n_mels + 1.0);
      double e = 0.0;
      for (std::size_t k = 0; k < bins; ++k) {
        const double f = mel(k * 16000.0 / nfft);
        double w = 0.0;
        if (f > l && f <= c) w = (f - l) / (c - l);
        else if (f > c && f < r) w = (r - f) / (r - c);
        e += w * power[k];
      }
      row[m] = std::log(std::max(e, 1e-10));
    }
    out.push_back(row);
  }
  return out;
}

TEST(Wav, OneSecondMonoFile) {
  auto w = decode_wav(wav_bytes(1, 16000, 16000));
  EXPECT_EQ(w.samples.size(), 16000u);
  EXPECT_EQ(w.sample_rate, 16000);
}

TEST(Wav, StereoIsRejectedNamingChannels) {
  try {
    decode_wav(wav_bytes(2, 16000));
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("channels=2"), std::string::npos) << e.what();
  }
}

TEST(Wav, WrongRateIsRejectedNamingRate) {
  try {
    decode_wav(wav_bytes(1, 44100));
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("sample_rate=44100"), std::string::npos) << e.what();
  }
}

TEST(Wav, NonPcmIsRejected) {
  auto bytes = wav_bytes(1, 16000);
  bytes[20] = 3;  // audio_format = IEEE float
  try {
    decode_wav(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("audio_format=3"), std::string::npos) << e.what();
  }
}

TEST(Wav, FullScaleSquareWaveScaling) {
  std::vector<std::int16_t> pcm(800);
  for (std::size_t i = 0; i < pcm.size(); ++i) pcm[i] = (i / 40) % 2 ? 32767 : -32767;
  auto w = decode_wav(encode_wav(pcm));
  float peak = 0.0f;
  for (float s : w.samples) peak = std::max(peak, std::abs(s));
  EXPECT_EQ(peak, 32767.0f / 32768.0f);
}

TEST(Wav, TruncatedDataChunk) {
  auto bytes = wav_bytes(1, 16000, 50);
  bytes.resize(bytes.size() - 10);
  EXPECT_THROW(decode_wav(bytes), FormatError);
}

TEST(Fbank, FrameCountFormula) {
  FbankConfig cfg;
  EXPECT_EQ(fbank_frame_count(16000, cfg), 98u);
  EXPECT_EQ(log_mel_fbank(sine(440, 16000), cfg).dim(0), 98u);
  EXPECT_EQ(log_mel_fbank(sine(440, 400), cfg).dim(0), 1u);
}

TEST(Fbank, ShorterThanWindowIsDataError) {
  EXPECT_THROW(log_mel_fbank(sine(440, 399)), DataError);
}

TEST(Fbank, ZeroInputGivesLogFloorEverywhere) {
  Waveform w;
  w.samples.assign(4000, 0.0f);
  auto m = log_mel_fbank(w);
  for (float v : m.data()) EXPECT_EQ(v, static_cast<float>(std::log(1e-10)));
}

TEST(Fbank, ToneArgmaxIsStableAcrossFrames) {
  auto m = log_mel_fbank(sine(1000, 16000));
  auto argmax_row = [&](std::size_t t) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < m.dim(1); ++c)
      if (m.at(t, c) > m.at(t, best)) best = c;
    return best;
  };
  const std::size_t first = argmax_row(0);
  for (std::size_t t = 1; t < m.dim(0); ++t) EXPECT_EQ(argmax_row(t), first) << "frame " << t;
  // The same bin according to the reference implementation.
  const auto ref = reference_fbank(sine(1000, 16000).samples, 40);
  std::size_t ref_best = 0;
  for (std::size_t c = 1; c < 40; ++c)
    if (ref[0][c] > ref[0][ref_best]) ref_best = c;
  EXPECT_EQ(first, ref_best);
}

TEST(Fbank, MatchesNaiveDftReference) {
  Rng rng(11);
  std::normal_distribution<double> g(0.0, 0.2);
  Waveform w;
  w.samples.resize(2400);
  for (auto& s : w.samples) s = static_cast<float>(g(rng));
  auto m = log_mel_fbank(w);
  const auto ref = reference_fbank(w.samples, 40);
  ASSERT_EQ(ref.size(), m.dim(0));
  for (std::size_t t = 0; t < ref.size(); ++t)
    for (std::size_t c = 0; c < 40; ++c) EXPECT_NEAR(m.at(t, c), ref[t][c], 1e-4) << t << "," << c;
}

TEST(Fbank, DoublingAmplitudeAddsLnFour) {
  auto quiet = log_mel_fbank(sine(700, 4000, 0.2));
  auto loud = log_mel_fbank(sine(700, 4000, 0.4));
  for (std::size_t i = 0; i < quiet.size(); ++i) {
    if (quiet[i] < -15.0f) continue;  // near the floor
    EXPECT_NEAR(loud[i] - quiet[i], std::log(4.0), 1e-3);
  }
}

TEST(Fbank, ShiftByOneHopShiftsOneFrame) {
  Waveform w = sine(523, 3200);
  Waveform shifted;
  shifted.samples.assign(160, 0.0f);
  shifted.samples.insert(shifted.samples.end(), w.samples.begin(), w.samples.end());
  auto a = log_mel_fbank(w), b = log_mel_fbank(shifted);
  ASSERT_EQ(b.dim(0), a.dim(0) + 1);
  for (std::size_t t = 0; t < a.dim(0); ++t)
    for (std::size_t c = 0; c < a.dim(1); ++c) EXPECT_EQ(b.at(t + 1, c), a.at(t, c));
}

TEST(Fbank, ConfigValidation) {
  FbankConfig cfg;
  cfg.fft_size = 256;  // smaller than a 400-sample window
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.hop_ms = 30;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Serf, RoundTripIsBitExact) {
  Tensor<float> m(Shape{3, 2}, std::vector<float>{0, 1, 2, 3, 4, 5});
  EXPECT_EQ(decode_feature_matrix(encode_feature_matrix(m)), m);
  Rng rng(12);
  auto r = random_tensor({17, 9}, rng, -1e6, 1e6).cast<float>();
  EXPECT_EQ(decode_feature_matrix(encode_feature_matrix(r)), r);
}

TEST(Serf, ByteLayout) {
  Tensor<float> m(Shape{1, 1}, std::vector<float>{1.0f});
  const std::vector<std::uint8_t> expected{'S', 'E', 'R', 'F', 1, 0, 0, 0, 1, 0, 0, 0,
                                           1, 0, 0, 0, 0x00, 0x00, 0x80, 0x3f};
  EXPECT_EQ(encode_feature_matrix(m), expected);
}

TEST(Serf, BadMagicAtOffsetZero) {
  auto bytes = encode_feature_matrix(Tensor<float>(Shape{2, 2}));
  bytes[0] = 'X';
  try {
    decode_feature_matrix(bytes);
    FAIL();
  } catch (const FormatError& e) {
    ASSERT_TRUE(e.offset().has_value());
    EXPECT_EQ(*e.offset(), 0u);
  }
}

TEST(Serf, TruncatedPayload) {
  auto bytes = encode_feature_matrix(Tensor<float>(Shape{3, 2}));
  bytes.resize(bytes.size() - 8);
  try {
    decode_feature_matrix(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("expected 24 data bytes, found 16"), std::string::npos)
        << e.what();
  }
}

TEST(Serf, BadVersionAndEmptyMatrix) {
  auto bytes = encode_feature_matrix(Tensor<float>(Shape{1, 2}));
  bytes[4] = 2;
  EXPECT_THROW(decode_feature_matrix(bytes), FormatError);
  auto empty = encode_feature_matrix(Tensor<float>(Shape{1, 2}));
  empty[8] = 0;  // T = 0
  empty.resize(16);
  EXPECT_THROW(decode_feature_matrix(empty), DataError);
}

TEST(Serf, UtteranceIdIsFileStem) {
  TempDir dir("serf");
  save_features(dir / "Ses01F_x_001.serf", Tensor<float>(Shape{2, 3}, 1.5f));
  auto seq = load_features(dir / "Ses01F_x_001.serf", "w2v2");
  EXPECT_EQ(seq.utt_id, "Ses01F_x_001");
  EXPECT_EQ(seq.frames(), 2u);
  EXPECT_EQ(seq.dims(), 3u);
}

TEST(Serc, RoundTripIsBitExact) {
  Rng rng(13);
  StateDict<float> state{{"a.weight", random_tensor({3, 4, 5}, rng).cast<float>()},
                         {"a.bias", random_tensor({3}, rng).cast<float>()}};
  auto back = decode_checkpoint(encode_checkpoint(state));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].name, "a.weight");
  EXPECT_EQ(back[0].value, state[0].value);
  EXPECT_EQ(back[1].value, state[1].value);
}

TEST(Serc, TruncationAndMagicErrors) {
  StateDict<float> state{{"w", Tensor<float>(Shape{4}, 2.0f)}};
  auto bytes = encode_checkpoint(state);
  auto cut = bytes;
  cut.resize(cut.size() - 3);
  EXPECT_THROW(decode_checkpoint(cut), FormatError);
  bytes[1] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
}

TEST(Serc, ModelStateRoundTrip) {
  SerModel<float> model(ModelGraph{{{SourceTag::toy(), 8, true}}, Fusion::kNone, {AggregatorKind::kMean}, {}, 4}, 5);
  auto state = model.state_dict();
  SerModel<float> other(ModelGraph{{{SourceTag::toy(), 8, true}}, Fusion::kNone, {AggregatorKind::kMean}, {}, 4}, 6);
  other.load_state_dict(decode_checkpoint(encode_checkpoint(state)));
  auto back = other.state_dict();
  ASSERT_EQ(back.size(), state.size());
  for (std::size_t i = 0; i < state.size(); ++i) EXPECT_EQ(back[i].value, state[i].value);
  // Running statistics travel with the weights.
  bool has_buffer = false;
  for (const auto& e : state) has_buffer = has_buffer || e.name.find("running_var") != std::string::npos;
  EXPECT_TRUE(has_buffer);
}

}  // namespace
}  // namespace serforge::testing
