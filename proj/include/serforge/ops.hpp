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

// Dense kernels with explicit backward passes. Every sequence kernel works
// on padded SeqBatch values, reads only valid frames and leaves padding at
// zero, so batched and per-utterance results agree.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "serforge/tensor.hpp"

namespace serforge {

enum class Mode { kTrain, kEval };

namespace ops {

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// ---------------------------------------------------------------------------
// conv1d: stride 1, "same" zero padding, odd kernel, dilation >= 1.
// weight [Cout, Cin, K], bias [Cout].

namespace detail {

template <typename T>
void check_conv_args(std::size_t in_channels, const Tensor<T>& weight,
                     const Tensor<T>& bias, std::size_t dilation) {
  require_rank(weight, 3, "conv1d weight");
  require_rank(bias, 1, "conv1d bias");
  if (weight.dim(1) != in_channels) {
    throw DimensionError("conv1d input channels (axis 2 of input) = " +
                         std::to_string(in_channels) +
                         " but weight axis 1 = " + std::to_string(weight.dim(1)));
  }
  if (bias.dim(0) != weight.dim(0)) {
    throw DimensionError("conv1d bias axis 0 = " + std::to_string(bias.dim(0)) +
                         " but weight axis 0 = " + std::to_string(weight.dim(0)));
  }
  if (weight.dim(2) % 2 == 0) {
    throw DimensionError("conv1d kernel size (weight axis 2) must be odd, got " +
                         std::to_string(weight.dim(2)));
  }
  if (dilation == 0) throw DimensionError("conv1d dilation must be >= 1");
}

// [Cout, Cin, K] -> [K, Cout, Cin] so the inner loops run over Cin.
template <typename T>
std::vector<T> kernel_major(const Tensor<T>& weight) {
  const std::size_t cout = weight.dim(0), cin = weight.dim(1), k = weight.dim(2);
  std::vector<T> out(weight.size());
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t j = 0; j < k; ++j)
        out[(j * cout + o) * cin + c] = weight[(o * cin + c) * k + j];
  return out;
}

}  // namespace detail

template <typename T>
SeqBatch<T> conv1d_forward(const SeqBatch<T>& input, const Tensor<T>& weight,
                           const Tensor<T>& bias, std::size_t dilation) {
  detail::check_conv_args(input.channels(), weight, bias, dilation);
  const std::size_t cout = weight.dim(0), cin = weight.dim(1), k = weight.dim(2);
  const auto wk = detail::kernel_major(weight);
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k / 2);
  SeqBatch<T> out = input.like(cout);
  for (std::size_t b = 0; b < input.batch(); ++b) {
    const auto len = static_cast<std::ptrdiff_t>(input.lengths[b]);
    for (std::ptrdiff_t t = 0; t < len; ++t) {
      T* y = out.frame(b, static_cast<std::size_t>(t));
      for (std::size_t o = 0; o < cout; ++o) y[o] = bias[o];
      for (std::size_t j = 0; j < k; ++j) {
        const std::ptrdiff_t src =
            t + (static_cast<std::ptrdiff_t>(j) - half) *
                    static_cast<std::ptrdiff_t>(dilation);
        if (src < 0 || src >= len) continue;
        const T* x = input.frame(b, static_cast<std::size_t>(src));
        const T* w = wk.data() + j * cout * cin;
        for (std::size_t o = 0; o < cout; ++o) {
          const T* wo = w + o * cin;
          T acc{0};
          for (std::size_t c = 0; c < cin; ++c) acc += wo[c] * x[c];
          y[o] += acc;
        }
      }
    }
  }
  return out;
}

// Returns d(loss)/d(input); accumulates into grad_weight and grad_bias.
template <typename T>
SeqBatch<T> conv1d_backward(const SeqBatch<T>& input, const Tensor<T>& weight,
                            std::size_t dilation, const SeqBatch<T>& grad_out,
                            Tensor<T>& grad_weight, Tensor<T>& grad_bias) {
  const std::size_t cout = weight.dim(0), cin = weight.dim(1), k = weight.dim(2);
  const auto wk = detail::kernel_major(weight);
  std::vector<T> gwk(wk.size(), T{0});
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k / 2);
  SeqBatch<T> grad_in = input.like(cin);
  for (std::size_t b = 0; b < input.batch(); ++b) {
    const auto len = static_cast<std::ptrdiff_t>(input.lengths[b]);
    for (std::ptrdiff_t t = 0; t < len; ++t) {
      const T* gy = grad_out.frame(b, static_cast<std::size_t>(t));
      for (std::size_t o = 0; o < cout; ++o) grad_bias[o] += gy[o];
      for (std::size_t j = 0; j < k; ++j) {
        const std::ptrdiff_t src =
            t + (static_cast<std::ptrdiff_t>(j) - half) *
                    static_cast<std::ptrdiff_t>(dilation);
        if (src < 0 || src >= len) continue;
        const T* x = input.frame(b, static_cast<std::size_t>(src));
        T* gx = grad_in.frame(b, static_cast<std::size_t>(src));
        const T* w = wk.data() + j * cout * cin;
        T* gw = gwk.data() + j * cout * cin;
        for (std::size_t o = 0; o < cout; ++o) {
          const T g = gy[o];
          if (g == T{0}) continue;
          const T* wo = w + o * cin;
          T* gwo = gw + o * cin;
          for (std::size_t c = 0; c < cin; ++c) {
            gwo[c] += g * x[c];
            gx[c] += g * wo[c];
          }
        }
      }
    }
  }
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t j = 0; j < k; ++j)
        grad_weight[(o * cin + c) * k + j] += gwk[(j * cout + o) * cin + c];
  return grad_in;
}

// Single-sequence form: input [T, Cin] -> [T, Cout].
template <typename T>
Tensor<T> conv1d_forward(const Tensor<T>& input, const Tensor<T>& weight,
                         const Tensor<T>& bias, std::size_t dilation) {
  require_rank(input, 2, "conv1d input");
  return conv1d_forward(SeqBatch<T>::single(input), weight, bias, dilation)
      .unpack(0);
}

// ---------------------------------------------------------------------------
// linear: affine map along the trailing axis. weight [Dout, Din].

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& input, const Tensor<T>& weight,
                         const Tensor<T>& bias) {
  require_rank(weight, 2, "linear weight");
  require_rank(bias, 1, "linear bias");
  if (!input.defined()) throw DimensionError("linear input is undefined");
  const std::size_t din = weight.dim(1), dout = weight.dim(0);
  if (input.shape().back() != din) {
    throw DimensionError("linear input trailing axis = " +
                         std::to_string(input.shape().back()) +
                         " but weight expects " + std::to_string(din));
  }
  if (bias.dim(0) != dout) {
    throw DimensionError("linear bias axis 0 = " + std::to_string(bias.dim(0)) +
                         " but weight axis 0 = " + std::to_string(dout));
  }
  Shape shape = input.shape();
  shape.back() = dout;
  Tensor<T> out(shape);
  const std::size_t rows = input.size() / din;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = input.data().data() + r * din;
    T* y = out.data().data() + r * dout;
    for (std::size_t o = 0; o < dout; ++o) {
      const T* w = weight.data().data() + o * din;
      T acc = bias[o];
      for (std::size_t c = 0; c < din; ++c) acc += w[c] * x[c];
      y[o] = acc;
    }
  }
  return out;
}

template <typename T>
Tensor<T> linear_backward(const Tensor<T>& input, const Tensor<T>& weight,
                          const Tensor<T>& grad_out, Tensor<T>& grad_weight,
                          Tensor<T>& grad_bias) {
  const std::size_t din = weight.dim(1), dout = weight.dim(0);
  const std::size_t rows = input.size() / din;
  Tensor<T> grad_in(input.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = input.data().data() + r * din;
    const T* gy = grad_out.data().data() + r * dout;
    T* gx = grad_in.data().data() + r * din;
    for (std::size_t o = 0; o < dout; ++o) {
      const T g = gy[o];
      grad_bias[o] += g;
      const T* w = weight.data().data() + o * din;
      T* gw = grad_weight.data().data() + o * din;
      for (std::size_t c = 0; c < din; ++c) {
        gw[c] += g * x[c];
        gx[c] += g * w[c];
      }
    }
  }
  return grad_in;
}

// ---------------------------------------------------------------------------
// batchnorm1d: per-channel statistics over every valid frame of the batch.

template <typename T>
struct BatchNormCache {
  SeqBatch<T> normalized;      // xhat
  std::vector<T> inv_std;      // per channel
  std::size_t count = 0;       // valid frames that produced the statistics
  Mode mode = Mode::kEval;
};

template <typename T>
SeqBatch<T> batchnorm1d_forward(const SeqBatch<T>& input, const Tensor<T>& gamma,
                                const Tensor<T>& beta, Tensor<T>& running_mean,
                                Tensor<T>& running_var, Mode mode,
                                BatchNormCache<T>* cache = nullptr) {
  const std::size_t channels = input.channels();
  for (const Tensor<T>* t : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &running_mean, &running_var}) {
    if (t->rank() != 1 || t->dim(0) != channels) {
      throw DimensionError("batchnorm1d expects " + std::to_string(channels) +
                           " channels, parameter has shape " +
                           shape_string(t->shape()));
    }
  }
  std::vector<T> mean(channels, T{0}), var(channels, T{0});
  std::size_t count = 0;
  for (std::size_t b = 0; b < input.batch(); ++b) count += input.lengths[b];
  if (mode == Mode::kTrain) {
    for (std::size_t b = 0; b < input.batch(); ++b)
      for (std::size_t t = 0; t < input.lengths[b]; ++t) {
        const T* x = input.frame(b, t);
        for (std::size_t c = 0; c < channels; ++c) mean[c] += x[c];
      }
    for (auto& m : mean) m /= static_cast<T>(count);
    for (std::size_t b = 0; b < input.batch(); ++b)
      for (std::size_t t = 0; t < input.lengths[b]; ++t) {
        const T* x = input.frame(b, t);
        for (std::size_t c = 0; c < channels; ++c) {
          const T d = x[c] - mean[c];
          var[c] += d * d;
        }
      }
    for (auto& v : var) v /= static_cast<T>(count);
    const T m = static_cast<T>(kBatchNormMomentum);
    const T unbias = count > 1 ? static_cast<T>(count) / static_cast<T>(count - 1)
                               : T{1};
    for (std::size_t c = 0; c < channels; ++c) {
      running_mean[c] = (T{1} - m) * running_mean[c] + m * mean[c];
      running_var[c] = (T{1} - m) * running_var[c] + m * var[c] * unbias;
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = running_mean[c];
      var[c] = running_var[c];
    }
  }
  std::vector<T> inv_std(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    inv_std[c] = T{1} / std::sqrt(var[c] + static_cast<T>(kBatchNormEps));
  }
  SeqBatch<T> out = input.like(channels);
  SeqBatch<T> xhat;
  if (cache) xhat = input.like(channels);
  for (std::size_t b = 0; b < input.batch(); ++b)
    for (std::size_t t = 0; t < input.lengths[b]; ++t) {
      const T* x = input.frame(b, t);
      T* y = out.frame(b, t);
      T* h = cache ? xhat.frame(b, t) : nullptr;
      for (std::size_t c = 0; c < channels; ++c) {
        const T n = (x[c] - mean[c]) * inv_std[c];
        y[c] = gamma[c] * n + beta[c];
        if (h) h[c] = n;
      }
    }
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->count = count;
    cache->mode = mode;
  }
  return out;
}

template <typename T>
SeqBatch<T> batchnorm1d_backward(const BatchNormCache<T>& cache,
                                 const Tensor<T>& gamma,
                                 const SeqBatch<T>& grad_out,
                                 Tensor<T>& grad_gamma, Tensor<T>& grad_beta) {
  const auto& xhat = cache.normalized;
  const std::size_t channels = xhat.channels();
  std::vector<T> sum_g(channels, T{0}), sum_gx(channels, T{0});
  for (std::size_t b = 0; b < xhat.batch(); ++b)
    for (std::size_t t = 0; t < xhat.lengths[b]; ++t) {
      const T* gy = grad_out.frame(b, t);
      const T* h = xhat.frame(b, t);
      for (std::size_t c = 0; c < channels; ++c) {
        sum_g[c] += gy[c];
        sum_gx[c] += gy[c] * h[c];
      }
    }
  for (std::size_t c = 0; c < channels; ++c) {
    grad_beta[c] += sum_g[c];
    grad_gamma[c] += sum_gx[c];
  }
  SeqBatch<T> grad_in = xhat.like(channels);
  const T n = static_cast<T>(cache.count);
  for (std::size_t b = 0; b < xhat.batch(); ++b)
    for (std::size_t t = 0; t < xhat.lengths[b]; ++t) {
      const T* gy = grad_out.frame(b, t);
      const T* h = xhat.frame(b, t);
      T* gx = grad_in.frame(b, t);
      for (std::size_t c = 0; c < channels; ++c) {
        const T scale = gamma[c] * cache.inv_std[c];
        if (cache.mode == Mode::kTrain) {
          gx[c] = scale * (gy[c] - sum_g[c] / n - h[c] * sum_gx[c] / n);
        } else {
          gx[c] = scale * gy[c];
        }
      }
    }
  return grad_in;
}

// Single-sequence form over [T, C].
template <typename T>
Tensor<T> batchnorm1d(const Tensor<T>& input, const Tensor<T>& gamma,
                      const Tensor<T>& beta, Tensor<T>& running_mean,
                      Tensor<T>& running_var, Mode mode) {
  require_rank(input, 2, "batchnorm1d input");
  return batchnorm1d_forward(SeqBatch<T>::single(input), gamma, beta,
                             running_mean, running_var, mode)
      .unpack(0);
}

// ---------------------------------------------------------------------------
// Elementwise activations. relu and tanh map 0 to 0, so they keep padding
// intact when applied to SeqBatch storage.

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& v : y.data()) v = v > T{0} ? v : T{0};
  return y;
}

// Gradient given the forward output (or input; both share the sign).
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& y, const Tensor<T>& grad_out) {
  Tensor<T> g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!(y[i] > T{0})) g[i] = T{0};
  return g;
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& v : y.data()) v = std::tanh(v);
  return y;
}

template <typename T>
Tensor<T> tanh_backward(const Tensor<T>& y, const Tensor<T>& grad_out) {
  Tensor<T> g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) g[i] *= T{1} - y[i] * y[i];
  return g;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& v : y.data()) v = T{1} / (T{1} + std::exp(-v));
  return y;
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& grad_out) {
  Tensor<T> g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) g[i] *= y[i] * (T{1} - y[i]);
  return g;
}

namespace detail {

// Splits a shape around `axis` into (outer, extent, inner) strides.
inline void axis_layout(const Shape& shape, std::size_t axis, std::size_t& outer,
                        std::size_t& extent, std::size_t& inner) {
  if (axis >= shape.size()) {
    throw DimensionError("softmax axis " + std::to_string(axis) +
                         " does not exist in shape " + shape_string(shape));
  }
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  extent = shape[axis];
}

}  // namespace detail

// Softmax along `axis`, max-subtracted.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  std::size_t outer, extent, inner;
  detail::axis_layout(x.shape(), axis, outer, extent, inner);
  Tensor<T> y(x.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * extent * inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < extent; ++e) mx = std::max(mx, x[base + e * inner]);
      T sum{0};
      for (std::size_t e = 0; e < extent; ++e) {
        const T v = std::exp(x[base + e * inner] - mx);
        y[base + e * inner] = v;
        sum += v;
      }
      for (std::size_t e = 0; e < extent; ++e) y[base + e * inner] /= sum;
    }
  return y;
}

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& y, const Tensor<T>& grad_out,
                           std::size_t axis) {
  std::size_t outer, extent, inner;
  detail::axis_layout(y.shape(), axis, outer, extent, inner);
  Tensor<T> g(y.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * extent * inner + i;
      T dot{0};
      for (std::size_t e = 0; e < extent; ++e)
        dot += y[base + e * inner] * grad_out[base + e * inner];
      for (std::size_t e = 0; e < extent; ++e) {
        const std::size_t idx = base + e * inner;
        g[idx] = y[idx] * (grad_out[idx] - dot);
      }
    }
  return g;
}

// ---------------------------------------------------------------------------
// Mean cross-entropy of logits [N, C] against integer labels.

template <typename T>
struct CrossEntropyResult {
  T loss{0};
  Tensor<T> grad;  // d(loss)/d(logits)
};

template <typename T>
CrossEntropyResult<T> cross_entropy(const Tensor<T>& logits,
                                    std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy logits");
  const std::size_t n = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != n) {
    throw DimensionError("cross_entropy got " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(n) + " rows");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw DataError("record " + std::to_string(i) + " has label " +
                      std::to_string(labels[i]) + " outside [0," +
                      std::to_string(classes) + ")");
    }
  }
  CrossEntropyResult<T> out;
  out.grad = softmax(logits, 1);
  const T inv_n = T{1} / static_cast<T>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.data().data() + i * classes;
    const T mx = *std::max_element(row, row + classes);
    T sum{0};
    for (std::size_t c = 0; c < classes; ++c) sum += std::exp(row[c] - mx);
    const T log_z = mx + std::log(sum);
    out.loss += (log_z - row[labels[i]]) * inv_n;
    for (std::size_t c = 0; c < classes; ++c) out.grad.at(i, c) *= inv_n;
    out.grad.at(i, static_cast<std::size_t>(labels[i])) -= inv_n;
  }
  return out;
}

}  // namespace ops
}  // namespace serforge
