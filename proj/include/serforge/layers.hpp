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

// Stateful layer wrappers: each holds pointers to its parameters inside a
// model-owned ParameterSet and caches what its backward pass needs from the
// most recent forward call.

#include <string>

#include "serforge/ops.hpp"
#include "serforge/parameters.hpp"

namespace serforge {

template <typename T>
class Conv1d {
 public:
  Conv1d() = default;
  Conv1d(ParameterSet<T>& params, const std::string& name, std::size_t in,
         std::size_t out, std::size_t kernel, std::size_t dilation, Rng& rng)
      : dilation_(dilation) {
    weight_ = &params.add(name + ".weight",
                          he_uniform<T>({out, in, kernel}, in * kernel, rng));
    bias_ = &params.add(name + ".bias", Tensor<T>(Shape{out}));
  }

  SeqBatch<T> forward(const SeqBatch<T>& x) {
    input_ = x;
    return ops::conv1d_forward(x, weight_->value, bias_->value, dilation_);
  }

  SeqBatch<T> backward(const SeqBatch<T>& grad_out) {
    return ops::conv1d_backward(input_, weight_->value, dilation_, grad_out,
                                weight_->grad, bias_->grad);
  }

  std::size_t in_channels() const { return weight_->value.dim(1); }
  std::size_t out_channels() const { return weight_->value.dim(0); }

 private:
  Parameter<T>* weight_ = nullptr;
  Parameter<T>* bias_ = nullptr;
  std::size_t dilation_ = 1;
  SeqBatch<T> input_;
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(ParameterSet<T>& params, const std::string& name, std::size_t in,
         std::size_t out, Rng& rng) {
    weight_ = &params.add(name + ".weight", he_uniform<T>({out, in}, in, rng));
    bias_ = &params.add(name + ".bias", Tensor<T>(Shape{out}));
  }

  Tensor<T> forward(const Tensor<T>& x) {
    input_ = x;
    return ops::linear_forward(x, weight_->value, bias_->value);
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    return ops::linear_backward(input_, weight_->value, grad_out, weight_->grad,
                                bias_->grad);
  }

  std::size_t in_features() const { return weight_->value.dim(1); }
  std::size_t out_features() const { return weight_->value.dim(0); }

 private:
  Parameter<T>* weight_ = nullptr;
  Parameter<T>* bias_ = nullptr;
  Tensor<T> input_;
};

template <typename T>
class BatchNorm1d {
 public:
  BatchNorm1d() = default;
  BatchNorm1d(ParameterSet<T>& params, const std::string& name,
              std::size_t channels) {
    gamma_ = &params.add(name + ".weight", Tensor<T>(Shape{channels}, T{1}));
    beta_ = &params.add(name + ".bias", Tensor<T>(Shape{channels}));
    mean_ = &params.add(name + ".running_mean", Tensor<T>(Shape{channels}),
                        ParamKind::kBuffer);
    var_ = &params.add(name + ".running_var", Tensor<T>(Shape{channels}, T{1}),
                       ParamKind::kBuffer);
  }

  SeqBatch<T> forward(const SeqBatch<T>& x, Mode mode) {
    return ops::batchnorm1d_forward(x, gamma_->value, beta_->value,
                                    mean_->value, var_->value, mode, &cache_);
  }

  SeqBatch<T> backward(const SeqBatch<T>& grad_out) {
    return ops::batchnorm1d_backward(cache_, gamma_->value, grad_out,
                                     gamma_->grad, beta_->grad);
  }

 private:
  Parameter<T>* gamma_ = nullptr;
  Parameter<T>* beta_ = nullptr;
  Parameter<T>* mean_ = nullptr;
  Parameter<T>* var_ = nullptr;
  ops::BatchNormCache<T> cache_;
};

// conv1d -> relu -> batchnorm, the unit the encoders are built from.
template <typename T>
class TdnnBlock {
 public:
  TdnnBlock() = default;
  TdnnBlock(ParameterSet<T>& params, const std::string& name, std::size_t in,
            std::size_t out, std::size_t kernel, std::size_t dilation, Rng& rng)
      : conv_(params, name + ".conv", in, out, kernel, dilation, rng),
        norm_(params, name + ".norm", out) {}

  SeqBatch<T> forward(const SeqBatch<T>& x, Mode mode) {
    SeqBatch<T> h = conv_.forward(x);
    h.data = ops::relu(h.data);
    activated_ = h.data;
    return norm_.forward(h, mode);
  }

  SeqBatch<T> backward(const SeqBatch<T>& grad_out) {
    SeqBatch<T> g = norm_.backward(grad_out);
    g.data = ops::relu_backward(activated_, g.data);
    return conv_.backward(g);
  }

  std::size_t in_channels() const { return conv_.in_channels(); }
  std::size_t out_channels() const { return conv_.out_channels(); }

 private:
  Conv1d<T> conv_;
  BatchNorm1d<T> norm_;
  Tensor<T> activated_;
};

}  // namespace serforge
