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

// ECAPA-TDNN utterance aggregator:
//
//   stem TDNN (k5) -> 3 x SE-Res2Block (k3, dilation 2/3/4)
//   -> concat block outputs -> 1x1 TDNN (multi-layer aggregation)
//   -> channel-dependent attentive statistics pooling -> linear embedding
//
// Every stage honours the padding of its SeqBatch input, so a padded batch
// produces the same embeddings as running each utterance alone (in eval
// mode; train-mode batchnorm statistics are shared across the batch).

#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "serforge/layers.hpp"

namespace serforge {

struct EcapaConfig {
  std::size_t channels = 512;
  std::array<std::size_t, 4> kernel_sizes{5, 3, 3, 3};
  std::array<std::size_t, 4> dilations{1, 2, 3, 4};
  std::size_t res2_scale = 8;
  std::size_t se_bottleneck = 128;
  std::size_t attention_channels = 128;
  std::size_t embedding_dim = 192;

  void validate() const {
    std::vector<std::string> errs;
    if (channels < 1) errs.push_back("ecapa.channels must be >= 1");
    if (res2_scale < 2) errs.push_back("ecapa.res2_scale must be >= 2");
    else if (channels % res2_scale != 0) {
      errs.push_back("ecapa.channels (" + std::to_string(channels) +
                     ") must be divisible by ecapa.res2_scale (" +
                     std::to_string(res2_scale) + ")");
    }
    for (std::size_t i = 0; i < 4; ++i) {
      if (kernel_sizes[i] % 2 == 0) {
        errs.push_back("ecapa.kernel_sizes[" + std::to_string(i) + "] must be odd");
      }
      if (dilations[i] < 1) {
        errs.push_back("ecapa.dilations[" + std::to_string(i) + "] must be >= 1");
      }
    }
    if (se_bottleneck < 1) errs.push_back("ecapa.se_bottleneck must be >= 1");
    if (attention_channels < 1) errs.push_back("ecapa.attention_channels must be >= 1");
    if (embedding_dim < 1) errs.push_back("ecapa.embedding_dim must be >= 1");
    if (!errs.empty()) throw ConfigError(errs);
  }
};

// Multi-scale residual convolution: channels split into `scale` groups; group
// 0 passes through, group i >= 1 is convolved after adding the previous
// group's output.
template <typename T>
class Res2Block {
 public:
  Res2Block(ParameterSet<T>& params, const std::string& prefix,
            std::size_t channels, std::size_t scale, std::size_t kernel,
            std::size_t dilation, Rng& rng)
      : scale_(scale), width_(channels / scale) {
    for (std::size_t i = 1; i < scale; ++i) {
      blocks_.emplace_back(params, prefix + ".conv" + std::to_string(i), width_,
                           width_, kernel, dilation, rng);
    }
  }

  SeqBatch<T> forward(const SeqBatch<T>& x, Mode mode) {
    SeqBatch<T> out = x.like(x.channels());
    SeqBatch<T> prev;
    assign_channels(out, slice_channels(x, 0, width_), 0);
    for (std::size_t i = 1; i < scale_; ++i) {
      SeqBatch<T> in = slice_channels(x, i * width_, width_);
      if (i >= 2) add_inplace(in, prev);
      prev = blocks_[i - 1].forward(in, mode);
      assign_channels(out, prev, i * width_);
    }
    return out;
  }

  SeqBatch<T> backward(const SeqBatch<T>& grad_out) {
    SeqBatch<T> grad_in = grad_out.like(grad_out.channels());
    assign_channels(grad_in, slice_channels(grad_out, 0, width_), 0);
    SeqBatch<T> carry;
    for (std::size_t i = scale_ - 1; i >= 1; --i) {
      SeqBatch<T> g = slice_channels(grad_out, i * width_, width_);
      if (i + 1 < scale_) add_inplace(g, carry);
      carry = blocks_[i - 1].backward(g);
      assign_channels(grad_in, carry, i * width_);
    }
    return grad_in;
  }

 private:
  std::size_t scale_;
  std::size_t width_;
  std::vector<TdnnBlock<T>> blocks_;
};

// Squeeze-excitation: per-utterance channel gates from the time mean.
template <typename T>
class SqueezeExcite {
 public:
  SqueezeExcite(ParameterSet<T>& params, const std::string& prefix,
                std::size_t channels, std::size_t bottleneck, Rng& rng)
      : squeeze_(params, prefix + ".fc1", channels, bottleneck, rng),
        excite_(params, prefix + ".fc2", bottleneck, channels, rng) {}

  SeqBatch<T> forward(const SeqBatch<T>& x) {
    const std::size_t batch = x.batch(), channels = x.channels();
    Tensor<T> mean(Shape{batch, channels});
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t < x.lengths[b]; ++t) {
        const T* f = x.frame(b, t);
        for (std::size_t c = 0; c < channels; ++c) mean.at(b, c) += f[c];
      }
      for (std::size_t c = 0; c < channels; ++c)
        mean.at(b, c) /= static_cast<T>(x.lengths[b]);
    }
    hidden_ = ops::relu(squeeze_.forward(mean));
    gates_ = ops::sigmoid(excite_.forward(hidden_));
    input_ = x;
    SeqBatch<T> out = x.like(channels);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < x.lengths[b]; ++t) {
        const T* f = x.frame(b, t);
        T* y = out.frame(b, t);
        for (std::size_t c = 0; c < channels; ++c) y[c] = f[c] * gates_.at(b, c);
      }
    return out;
  }

  SeqBatch<T> backward(const SeqBatch<T>& grad_out) {
    const std::size_t batch = input_.batch(), channels = input_.channels();
    Tensor<T> grad_gates(Shape{batch, channels});
    SeqBatch<T> grad_in = input_.like(channels);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < input_.lengths[b]; ++t) {
        const T* f = input_.frame(b, t);
        const T* gy = grad_out.frame(b, t);
        T* gx = grad_in.frame(b, t);
        for (std::size_t c = 0; c < channels; ++c) {
          grad_gates.at(b, c) += gy[c] * f[c];
          gx[c] = gy[c] * gates_.at(b, c);
        }
      }
    Tensor<T> g = excite_.backward(ops::sigmoid_backward(gates_, grad_gates));
    Tensor<T> grad_mean = squeeze_.backward(ops::relu_backward(hidden_, g));
    for (std::size_t b = 0; b < batch; ++b) {
      const T inv = T{1} / static_cast<T>(input_.lengths[b]);
      for (std::size_t t = 0; t < input_.lengths[b]; ++t) {
        T* gx = grad_in.frame(b, t);
        for (std::size_t c = 0; c < channels; ++c) gx[c] += grad_mean.at(b, c) * inv;
      }
    }
    return grad_in;
  }

 private:
  Linear<T> squeeze_;
  Linear<T> excite_;
  SeqBatch<T> input_;
  Tensor<T> hidden_;
  Tensor<T> gates_;
};

// 1x1 TDNN -> Res2 -> 1x1 TDNN -> SE, plus identity shortcut.
template <typename T>
class SERes2Block {
 public:
  SERes2Block(ParameterSet<T>& params, const std::string& prefix,
              const EcapaConfig& cfg, std::size_t kernel, std::size_t dilation,
              Rng& rng)
      : tdnn1_(params, prefix + ".tdnn1", cfg.channels, cfg.channels, 1, 1, rng),
        res2_(params, prefix + ".res2", cfg.channels, cfg.res2_scale, kernel,
              dilation, rng),
        tdnn2_(params, prefix + ".tdnn2", cfg.channels, cfg.channels, 1, 1, rng),
        se_(params, prefix + ".se", cfg.channels, cfg.se_bottleneck, rng) {}

  SeqBatch<T> forward(const SeqBatch<T>& x, Mode mode) {
    SeqBatch<T> h = se_.forward(tdnn2_.forward(res2_.forward(tdnn1_.forward(x, mode), mode), mode));
    add_inplace(h, x);
    return h;
  }

  SeqBatch<T> backward(const SeqBatch<T>& grad_out) {
    SeqBatch<T> g = tdnn1_.backward(res2_.backward(tdnn2_.backward(se_.backward(grad_out))));
    add_inplace(g, grad_out);
    return g;
  }

 private:
  TdnnBlock<T> tdnn1_;
  Res2Block<T> res2_;
  TdnnBlock<T> tdnn2_;
  SqueezeExcite<T> se_;
};

// Channel-dependent attentive statistics pooling with global context.
// Attention logits see [h, mean(h), std(h)]; the softmax runs over valid
// frames only (padded frames behave as -inf logits). Output is [mu, sigma].
template <typename T>
class AttentiveStatsPool {
 public:
  // sigma = sqrt(max(var, floor)); keeps d(sigma)/d(var) bounded.
  static constexpr double kVarianceFloor = 1e-12;

  AttentiveStatsPool(ParameterSet<T>& params, const std::string& prefix,
                     std::size_t channels, std::size_t attention_channels,
                     Rng& rng)
      : tdnn_(params, prefix + ".tdnn", 3 * channels, attention_channels, 1, 1, rng),
        conv_(params, prefix + ".conv", attention_channels, channels, 1, 1, rng) {}

  // h: [B, T, C] -> [B, 2C]
  Tensor<T> forward(const SeqBatch<T>& h, Mode mode) {
    const std::size_t batch = h.batch(), channels = h.channels();
    input_ = h;
    uniform_ = weights_like(h);
    for (std::size_t b = 0; b < batch; ++b) {
      const T w = T{1} / static_cast<T>(h.lengths[b]);
      for (std::size_t t = 0; t < h.lengths[b]; ++t) {
        T* u = uniform_.frame(b, t);
        for (std::size_t c = 0; c < channels; ++c) u[c] = w;
      }
    }
    global_ = weighted_stats(h, uniform_);

    SeqBatch<T> context = h.like(3 * channels);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < h.lengths[b]; ++t) {
        T* f = context.frame(b, t);
        std::copy_n(h.frame(b, t), channels, f);
        for (std::size_t c = 0; c < channels; ++c) {
          f[channels + c] = global_.mean.at(b, c);
          f[2 * channels + c] = global_.std.at(b, c);
        }
      }
    SeqBatch<T> a = tdnn_.forward(context, mode);
    a.data = ops::tanh(a.data);
    squashed_ = a.data;
    SeqBatch<T> logits = conv_.forward(a);

    alpha_ = h.like(channels);
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t len = h.lengths[b];
      for (std::size_t c = 0; c < channels; ++c) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t t = 0; t < len; ++t) mx = std::max(mx, logits.frame(b, t)[c]);
        T sum{0};
        for (std::size_t t = 0; t < len; ++t) {
          const T e = std::exp(logits.frame(b, t)[c] - mx);
          alpha_.frame(b, t)[c] = e;
          sum += e;
        }
        for (std::size_t t = 0; t < len; ++t) alpha_.frame(b, t)[c] /= sum;
      }
    }
    attended_ = weighted_stats(h, alpha_);

    Tensor<T> out(Shape{batch, 2 * channels});
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < channels; ++c) {
        out.at(b, c) = attended_.mean.at(b, c);
        out.at(b, channels + c) = attended_.std.at(b, c);
      }
    return out;
  }

  SeqBatch<T> backward(const Tensor<T>& grad_out) {
    const std::size_t batch = input_.batch(), channels = input_.channels();
    Tensor<T> g_mean(Shape{batch, channels}), g_std(Shape{batch, channels});
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < channels; ++c) {
        g_mean.at(b, c) = grad_out.at(b, c);
        g_std.at(b, c) = grad_out.at(b, channels + c);
      }
    SeqBatch<T> grad_h = input_.like(channels);
    SeqBatch<T> grad_alpha = input_.like(channels);
    stats_backward(input_, alpha_, attended_, g_mean, g_std, grad_h, &grad_alpha);

    // Softmax over time, per channel.
    SeqBatch<T> grad_logits = input_.like(channels);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < channels; ++c) {
        T dot{0};
        for (std::size_t t = 0; t < input_.lengths[b]; ++t)
          dot += alpha_.frame(b, t)[c] * grad_alpha.frame(b, t)[c];
        for (std::size_t t = 0; t < input_.lengths[b]; ++t)
          grad_logits.frame(b, t)[c] =
              alpha_.frame(b, t)[c] * (grad_alpha.frame(b, t)[c] - dot);
      }
    SeqBatch<T> g = conv_.backward(grad_logits);
    g.data = ops::tanh_backward(squashed_, g.data);
    SeqBatch<T> grad_context = tdnn_.backward(g);

    Tensor<T> g_gmean(Shape{batch, channels}), g_gstd(Shape{batch, channels});
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < input_.lengths[b]; ++t) {
        const T* f = grad_context.frame(b, t);
        T* gh = grad_h.frame(b, t);
        for (std::size_t c = 0; c < channels; ++c) {
          gh[c] += f[c];
          g_gmean.at(b, c) += f[channels + c];
          g_gstd.at(b, c) += f[2 * channels + c];
        }
      }
    stats_backward(input_, uniform_, global_, g_gmean, g_gstd, grad_h, nullptr);
    return grad_h;
  }

  // Attention weights of the last forward call, [B, T, C].
  const SeqBatch<T>& attention() const { return alpha_; }

 private:
  struct Stats {
    Tensor<T> mean;  // [B, C]
    Tensor<T> var;   // [B, C], unclamped
    Tensor<T> std;   // [B, C]
  };

  static SeqBatch<T> weights_like(const SeqBatch<T>& h) { return h.like(h.channels()); }

  // Weighted mean and centered second moment with weights summing to one
  // over the valid frames. Accumulates in double.
  static Stats weighted_stats(const SeqBatch<T>& h, const SeqBatch<T>& w) {
    const std::size_t batch = h.batch(), channels = h.channels();
    Stats s{Tensor<T>(Shape{batch, channels}), Tensor<T>(Shape{batch, channels}),
            Tensor<T>(Shape{batch, channels})};
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < channels; ++c) {
        double mu = 0.0;
        for (std::size_t t = 0; t < h.lengths[b]; ++t)
          mu += static_cast<double>(w.frame(b, t)[c]) * static_cast<double>(h.frame(b, t)[c]);
        double var = 0.0;
        for (std::size_t t = 0; t < h.lengths[b]; ++t) {
          const double d = static_cast<double>(h.frame(b, t)[c]) - mu;
          var += static_cast<double>(w.frame(b, t)[c]) * d * d;
        }
        s.mean.at(b, c) = static_cast<T>(mu);
        s.var.at(b, c) = static_cast<T>(var);
        s.std.at(b, c) = static_cast<T>(std::sqrt(std::max(var, kVarianceFloor)));
      }
    return s;
  }

  // Accumulates d/dh into grad_h and, when requested, writes d/dw.
  static void stats_backward(const SeqBatch<T>& h, const SeqBatch<T>& w,
                             const Stats& s, const Tensor<T>& g_mean,
                             const Tensor<T>& g_std, SeqBatch<T>& grad_h,
                             SeqBatch<T>* grad_w) {
    for (std::size_t b = 0; b < h.batch(); ++b)
      for (std::size_t c = 0; c < h.channels(); ++c) {
        const T mu = s.mean.at(b, c);
        const T g_var = static_cast<double>(s.var.at(b, c)) > kVarianceFloor
                            ? g_std.at(b, c) * T{0.5} / s.std.at(b, c)
                            : T{0};
        const T gm = g_mean.at(b, c);
        for (std::size_t t = 0; t < h.lengths[b]; ++t) {
          const T d = h.frame(b, t)[c] - mu;
          const T wt = w.frame(b, t)[c];
          grad_h.frame(b, t)[c] += wt * (gm + T{2} * g_var * d);
          if (grad_w) grad_w->frame(b, t)[c] = gm * h.frame(b, t)[c] + g_var * d * d;
        }
      }
  }

  TdnnBlock<T> tdnn_;
  Conv1d<T> conv_;
  SeqBatch<T> input_;
  SeqBatch<T> uniform_;
  SeqBatch<T> alpha_;
  Tensor<T> squashed_;
  Stats global_;
  Stats attended_;
};

template <typename T>
class EcapaTdnn {
 public:
  EcapaTdnn(ParameterSet<T>& params, const std::string& prefix,
            std::size_t input_dim, const EcapaConfig& cfg, Rng& rng)
      : cfg_((cfg.validate(), cfg)),
        stem_(params, prefix + ".stem", input_dim, cfg.channels,
              cfg.kernel_sizes[0], cfg.dilations[0], rng),
        mfa_(params, prefix + ".mfa", 3 * cfg.channels, 3 * cfg.channels, 1, 1, rng),
        pool_(params, prefix + ".pool", 3 * cfg.channels, cfg.attention_channels, rng),
        fc_(params, prefix + ".fc", 6 * cfg.channels, cfg.embedding_dim, rng) {
    blocks_.reserve(3);
    for (std::size_t i = 1; i < 4; ++i) {
      blocks_.emplace_back(params, prefix + ".block" + std::to_string(i), cfg,
                           cfg.kernel_sizes[i], cfg.dilations[i], rng);
    }
  }

  // x: [B, T, D] -> embeddings [B, embedding_dim]
  Tensor<T> forward(const SeqBatch<T>& x, Mode mode) {
    SeqBatch<T> h = stem_.forward(x, mode);
    require_finite(h.data, "ecapa.stem");
    std::vector<SeqBatch<T>> outs;
    outs.reserve(3);
    for (std::size_t i = 0; i < 3; ++i) {
      h = blocks_[i].forward(h, mode);
      require_finite(h.data, "ecapa.block" + std::to_string(i + 1));
      outs.push_back(h);
    }
    SeqBatch<T> agg = mfa_.forward(concat_channels<T>({&outs[0], &outs[1], &outs[2]}), mode);
    require_finite(agg.data, "ecapa.mfa");
    pooled_ = pool_.forward(agg, mode);
    require_finite(pooled_, "ecapa.pool");
    Tensor<T> emb = fc_.forward(pooled_);
    require_finite(emb, "ecapa.fc");
    return emb;
  }

  SeqBatch<T> backward(const Tensor<T>& grad_emb) {
    const std::size_t c = cfg_.channels;
    SeqBatch<T> g_cat = mfa_.backward(pool_.backward(fc_.backward(grad_emb)));
    SeqBatch<T> g = slice_channels(g_cat, 2 * c, c);
    for (std::size_t i = 3; i-- > 0;) {
      g = blocks_[i].backward(g);
      if (i > 0) add_inplace(g, slice_channels(g_cat, (i - 1) * c, c));
    }
    return stem_.backward(g);
  }

  const EcapaConfig& config() const { return cfg_; }
  std::size_t embedding_dim() const { return cfg_.embedding_dim; }

  // [mu, sigma] of the last forward call, [B, 6C].
  const Tensor<T>& pooled_stats() const { return pooled_; }
  const SeqBatch<T>& attention() const { return pool_.attention(); }

 private:
  EcapaConfig cfg_;
  TdnnBlock<T> stem_;
  std::vector<SERes2Block<T>> blocks_;
  TdnnBlock<T> mfa_;
  AttentiveStatsPool<T> pool_;
  Linear<T> fc_;
  Tensor<T> pooled_;
};

}  // namespace serforge
