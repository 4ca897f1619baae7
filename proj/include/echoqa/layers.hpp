#pragma once

// Differentiable layer primitives. Each layer offers
//   forward(x, ...)  caching activations for backward,
//   infer(x)         a const pure pass with no caching,
//   backward(g)      returning dLoss/dInput and adding parameter gradients.
// backward() without a preceding forward() throws std::logic_error.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "echoqa/rng.hpp"
#include "echoqa/tensor.hpp"

namespace echoqa {

enum class Mode { train, infer };

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { grad.fill(T(0)); }
};

/// Non-trainable state that still belongs in a checkpoint.
template <typename T>
struct Buffer {
  std::string name;
  Tensor<T>* value;
};

/// Valid-padding 2-d convolution over [batch, channels, height, width].
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  /// Weights ~ N(0, 2 / fan_in), bias zero.
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride, SeededRng& rng);
  Conv2d(Tensor<T> kernels, Tensor<T> bias, std::size_t stride = 1);

  Tensor<T> forward(const Tensor<T>& input);
  Tensor<T> infer(const Tensor<T>& input) const;
  Tensor<T> backward(const Tensor<T>& grad_output);

  std::size_t in_channels() const { return kernels_.value.dim(1); }
  std::size_t out_channels() const { return kernels_.value.dim(0); }
  std::size_t kernel_size() const { return kernels_.value.dim(2); }
  std::size_t stride() const { return stride_; }
  std::size_t output_extent(std::size_t input_extent) const;

  Parameter<T>& kernels() { return kernels_; }
  Parameter<T>& bias() { return bias_; }
  const Parameter<T>& kernels() const { return kernels_; }
  const Parameter<T>& bias() const { return bias_; }
  std::vector<Parameter<T>*> parameters() { return {&kernels_, &bias_}; }

 private:
  void check_input(const Tensor<T>& input) const;

  Parameter<T> kernels_;
  Parameter<T> bias_;
  std::size_t stride_ = 1;
  Tensor<T> cached_input_;
};

/// Batch normalization over axis 1. Statistics pool every other axis, so the
/// same layer handles [N, C] (dense) and [N, C, H, W] (convolutional) inputs.
template <typename T>
class BatchNorm {
 public:
  static constexpr double kEpsilon = 1e-5;
  static constexpr double kMomentum = 0.1;

  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels);

  Tensor<T> forward(const Tensor<T>& input, Mode mode);
  Tensor<T> infer(const Tensor<T>& input) const;
  Tensor<T> backward(const Tensor<T>& grad_output);

  std::size_t channels() const { return gamma_.value.size(); }
  Parameter<T>& gamma() { return gamma_; }
  Parameter<T>& beta() { return beta_; }
  Tensor<T>& running_mean() { return running_mean_; }
  Tensor<T>& running_var() { return running_var_; }
  const Tensor<T>& running_mean() const { return running_mean_; }
  const Tensor<T>& running_var() const { return running_var_; }
  std::vector<Parameter<T>*> parameters() { return {&gamma_, &beta_}; }
  std::vector<Buffer<T>> buffers() { return {{"running_mean", &running_mean_}, {"running_var", &running_var_}}; }

 private:
  void check_input(const Tensor<T>& input) const;

  Parameter<T> gamma_;
  Parameter<T> beta_;
  Tensor<T> running_mean_;
  Tensor<T> running_var_;
  // cache
  Tensor<T> normalized_;
  std::vector<T> inv_std_;
  Mode cached_mode_ = Mode::infer;
  bool has_cache_ = false;
};

template <typename T>
class Relu {
 public:
  Tensor<T> forward(const Tensor<T>& input);
  Tensor<T> infer(const Tensor<T>& input) const;
  /// Subgradient at exactly 0 is 0.
  Tensor<T> backward(const Tensor<T>& grad_output);

  /// 1 where the cached input was positive.
  std::vector<std::uint8_t> active_pattern() const { return active_; }

 private:
  std::vector<std::uint8_t> active_;
  Shape shape_;
};

/// 1 / (1 + e^-x), evaluated without overflow and clamped to the open
/// interval (0, 1) so that saturated outputs never reach 0 or 1 exactly.
template <typename T>
T sigmoid(T x) noexcept;

template <typename T>
class Sigmoid {
 public:
  Tensor<T> forward(const Tensor<T>& input);
  Tensor<T> infer(const Tensor<T>& input) const;
  Tensor<T> backward(const Tensor<T>& grad_output);

 private:
  Tensor<T> output_;
};

/// 2x2 max pooling with stride 2; an odd trailing row or column is dropped.
template <typename T>
class MaxPool2x2 {
 public:
  Tensor<T> forward(const Tensor<T>& input);
  Tensor<T> infer(const Tensor<T>& input) const;
  Tensor<T> backward(const Tensor<T>& grad_output);

  const std::vector<std::uint32_t>& argmax() const { return argmax_; }

 private:
  Tensor<T> run(const Tensor<T>& input, std::vector<std::uint32_t>* argmax) const;

  std::vector<std::uint32_t> argmax_;
  Shape input_shape_;
};

/// Inverted dropout: survivors are scaled by 1 / (1 - p) during training and
/// inference is the identity.
template <typename T>
class Dropout {
 public:
  Dropout() = default;
  explicit Dropout(double p);

  Tensor<T> forward(const Tensor<T>& input, Mode mode, SeededRng& rng);
  Tensor<T> infer(const Tensor<T>& input) const { return input; }
  Tensor<T> backward(const Tensor<T>& grad_output);

  double rate() const { return p_; }

 private:
  double p_ = 0.0;
  std::vector<T> mask_;  // 0 or 1 / (1 - p)
  bool has_cache_ = false;
  bool identity_ = true;
};

/// y = x W^T + b for x of shape [N, in].
template <typename T>
class Dense {
 public:
  Dense() = default;
  /// Weights ~ N(0, 2 / in), bias zero. zero_init gives all-zero weights.
  Dense(std::size_t in, std::size_t out, SeededRng& rng, bool zero_init = false);
  Dense(Tensor<T> weights, Tensor<T> bias);

  Tensor<T> forward(const Tensor<T>& input);
  Tensor<T> infer(const Tensor<T>& input) const;
  Tensor<T> backward(const Tensor<T>& grad_output);

  std::size_t in_features() const { return weights_.value.dim(1); }
  std::size_t out_features() const { return weights_.value.dim(0); }
  Parameter<T>& weights() { return weights_; }
  Parameter<T>& bias() { return bias_; }
  const Parameter<T>& weights() const { return weights_; }
  const Parameter<T>& bias() const { return bias_; }
  std::vector<Parameter<T>*> parameters() { return {&weights_, &bias_}; }

 private:
  void check_input(const Tensor<T>& input) const;

  Parameter<T> weights_;
  Parameter<T> bias_;
  Tensor<T> cached_input_;
};

/// Single-layer LSTM over [T, N, features], returning the final hidden state
/// [N, hidden]. Gate blocks are stacked in the order input, forget, cell,
/// output:
///   i = s(Wx_i x + Wh_i h + b_i)   f = s(Wx_f x + Wh_f h + b_f)
///   g = tanh(Wx_g x + Wh_g h + b_g) o = s(Wx_o x + Wh_o h + b_o)
///   c' = f c + i g                  h' = o tanh(c')
/// Initial h and c are zero. Weights ~ N(0, 1 / fan_in); the forget bias starts at 1.
template <typename T>
class Lstm {
 public:
  Lstm() = default;
  Lstm(std::size_t features, std::size_t hidden, SeededRng& rng);
  Lstm(Tensor<T> input_weights, Tensor<T> recurrent_weights, Tensor<T> bias);

  Tensor<T> forward(const Tensor<T>& sequence);
  Tensor<T> infer(const Tensor<T>& sequence) const;
  /// Returns the gradient for the whole input sequence.
  Tensor<T> backward(const Tensor<T>& grad_hidden);

  std::size_t features() const { return input_weights_.value.dim(1); }
  std::size_t hidden() const { return recurrent_weights_.value.dim(1); }
  Parameter<T>& input_weights() { return input_weights_; }
  Parameter<T>& recurrent_weights() { return recurrent_weights_; }
  Parameter<T>& bias() { return bias_; }
  std::vector<Parameter<T>*> parameters() { return {&input_weights_, &recurrent_weights_, &bias_}; }

 private:
  struct Step {
    std::vector<T> gates;  // [N, 4H] after activation
    std::vector<T> cell;   // c_t [N, H]
    std::vector<T> hidden; // h_t [N, H]
  };
  Tensor<T> run(const Tensor<T>& sequence, std::vector<Step>* steps) const;
  void check_input(const Tensor<T>& sequence) const;

  Parameter<T> input_weights_;      // [4H, F]
  Parameter<T> recurrent_weights_;  // [4H, H]
  Parameter<T> bias_;               // [4H]
  Tensor<T> cached_input_;
  std::vector<Step> steps_;
};

}  // namespace echoqa
