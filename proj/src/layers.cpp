#include "echoqa/layers.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "echoqa/kernels.hpp"

namespace echoqa {

namespace {

void require_cache(bool present, const char* layer) {
  if (!present) throw std::logic_error(std::string(layer) + ": backward called before forward");
}

}  // namespace

// ---------------------------------------------------------------- Conv2d

template <typename T>
Conv2d<T>::Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                  SeededRng& rng)
    : stride_(stride) {
  if (in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0)
    throw std::invalid_argument("Conv2d: channels, kernel and stride must be positive");
  const double fan_in = static_cast<double>(in_channels * kernel * kernel);
  kernels_ = Parameter<T>("kernels", randn<T>({out_channels, in_channels, kernel, kernel}, rng, 0.0,
                                              std::sqrt(2.0 / fan_in)));
  bias_ = Parameter<T>("bias", Tensor<T>({out_channels}));
}

template <typename T>
Conv2d<T>::Conv2d(Tensor<T> kernels, Tensor<T> bias, std::size_t stride) : stride_(stride) {
  if (kernels.rank() != 4 || bias.rank() != 1 || bias.dim(0) != kernels.dim(0))
    throw std::invalid_argument("Conv2d: kernels must be [out,in,kh,kw] and bias [out]");
  if (stride == 0) throw std::invalid_argument("Conv2d: stride must be positive");
  kernels_ = Parameter<T>("kernels", std::move(kernels));
  bias_ = Parameter<T>("bias", std::move(bias));
}

template <typename T>
std::size_t Conv2d<T>::output_extent(std::size_t input_extent) const {
  if (input_extent < kernel_size()) throw std::invalid_argument("Conv2d: input smaller than kernel");
  return (input_extent - kernel_size()) / stride_ + 1;
}

template <typename T>
void Conv2d<T>::check_input(const Tensor<T>& input) const {
  if (input.rank() != 4) throw std::invalid_argument("Conv2d: input must be [batch, channels, height, width]");
  if (input.dim(1) != in_channels())
    throw std::invalid_argument("Conv2d: channel mismatch, expected " + std::to_string(in_channels()) + " got " +
                                std::to_string(input.dim(1)));
  if (input.dim(2) < kernels_.value.dim(2) || input.dim(3) < kernels_.value.dim(3))
    throw std::invalid_argument("Conv2d: input " + shape_string(input.shape()) + " smaller than kernel");
}

namespace {

template <typename T>
kernels::ConvShape conv_shape(const Tensor<T>& input, const Tensor<T>& weights, std::size_t stride) {
  kernels::ConvShape s;
  s.batch = input.dim(0);
  s.in_channels = input.dim(1);
  s.height = input.dim(2);
  s.width = input.dim(3);
  s.out_channels = weights.dim(0);
  s.kernel_h = weights.dim(2);
  s.kernel_w = weights.dim(3);
  s.stride = stride;
  return s;
}

}  // namespace

template <typename T>
Tensor<T> Conv2d<T>::infer(const Tensor<T>& input) const {
  check_input(input);
  const auto s = conv_shape(input, kernels_.value, stride_);
  Tensor<T> out({s.batch, s.out_channels, s.out_h(), s.out_w()});
  kernels::conv2d_forward(s, input.data(), kernels_.value.data(), bias_.value.data(), out.data());
  return out;
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& input) {
  Tensor<T> out = infer(input);
  cached_input_ = input;
  return out;
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& grad_output) {
  require_cache(!cached_input_.empty(), "Conv2d");
  const auto s = conv_shape(cached_input_, kernels_.value, stride_);
  if (grad_output.shape() != Shape{s.batch, s.out_channels, s.out_h(), s.out_w()})
    throw std::invalid_argument("Conv2d: upstream gradient shape mismatch");
  Tensor<T> grad_input(cached_input_.shape());
  kernels::conv2d_backward_input(s, kernels_.value.data(), grad_output.data(), grad_input.data());
  kernels::conv2d_backward_params(s, cached_input_.data(), grad_output.data(), kernels_.grad.data(),
                                  bias_.grad.data());
  return grad_input;
}

// ---------------------------------------------------------------- BatchNorm

template <typename T>
BatchNorm<T>::BatchNorm(std::size_t channels)
    : gamma_("gamma", Tensor<T>::filled({channels}, T(1))),
      beta_("beta", Tensor<T>({channels})),
      running_mean_({channels}),
      running_var_(Tensor<T>::filled({channels}, T(1))) {}

template <typename T>
void BatchNorm<T>::check_input(const Tensor<T>& input) const {
  if (input.rank() < 2 || input.dim(1) != channels())
    throw std::invalid_argument("BatchNorm: expected channel axis of size " + std::to_string(channels()) + ", got " +
                                shape_string(input.shape()));
}

template <typename T>
Tensor<T> BatchNorm<T>::infer(const Tensor<T>& input) const {
  check_input(input);
  const std::size_t n = input.dim(0), c = input.dim(1), inner = input.size() / (n * c);
  Tensor<T> out(input.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T inv = T(1) / std::sqrt(running_var_[ch] + T(kEpsilon));
    const T g = gamma_.value[ch], b = beta_.value[ch], mu = running_mean_[ch];
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t base = (i * c + ch) * inner;
      for (std::size_t k = 0; k < inner; ++k) out[base + k] = g * ((input[base + k] - mu) * inv) + b;
    }
  }
  return out;
}

template <typename T>
Tensor<T> BatchNorm<T>::forward(const Tensor<T>& input, Mode mode) {
  check_input(input);
  const std::size_t n = input.dim(0), c = input.dim(1), inner = input.size() / (n * c);
  const std::size_t count = n * inner;
  normalized_ = Tensor<T>(input.shape());
  inv_std_.assign(c, T(0));
  cached_mode_ = mode;
  has_cache_ = true;
  Tensor<T> out(input.shape());

  if (mode == Mode::infer) {
    for (std::size_t ch = 0; ch < c; ++ch) inv_std_[ch] = T(1) / std::sqrt(running_var_[ch] + T(kEpsilon));
  } else if (n < 2) {
    throw std::invalid_argument("BatchNorm: training mode needs a batch of at least 2");
  }

#pragma omp parallel for schedule(static) if (input.size() > (1u << 16))
  for (long chl = 0; chl < static_cast<long>(c); ++chl) {
    const auto ch = static_cast<std::size_t>(chl);
    T mu = running_mean_[ch];
    if (mode == Mode::train) {
      double sum = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* x = input.data() + (i * c + ch) * inner;
        for (std::size_t k = 0; k < inner; ++k) sum += x[k];
      }
      const double mean = sum / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* x = input.data() + (i * c + ch) * inner;
        for (std::size_t k = 0; k < inner; ++k) {
          const double d = x[k] - mean;
          sq += d * d;
        }
      }
      const double var = sq / static_cast<double>(count);
      mu = static_cast<T>(mean);
      inv_std_[ch] = static_cast<T>(1.0 / std::sqrt(var + kEpsilon));
      const double unbiased = var * static_cast<double>(count) / static_cast<double>(count - 1);
      running_mean_[ch] = static_cast<T>((1.0 - kMomentum) * running_mean_[ch] + kMomentum * mean);
      running_var_[ch] = static_cast<T>((1.0 - kMomentum) * running_var_[ch] + kMomentum * unbiased);
    }
    const T inv = inv_std_[ch];
    const T g = gamma_.value[ch], b = beta_.value[ch];
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t base = (i * c + ch) * inner;
      for (std::size_t k = 0; k < inner; ++k) {
        const T xh = (input[base + k] - mu) * inv;
        normalized_[base + k] = xh;
        out[base + k] = g * xh + b;
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> BatchNorm<T>::backward(const Tensor<T>& grad_output) {
  require_cache(has_cache_, "BatchNorm");
  if (grad_output.shape() != normalized_.shape()) throw std::invalid_argument("BatchNorm: gradient shape mismatch");
  const std::size_t n = grad_output.dim(0), c = grad_output.dim(1), inner = grad_output.size() / (n * c);
  const T count = static_cast<T>(n * inner);
  Tensor<T> grad_input(grad_output.shape());

#pragma omp parallel for schedule(static) if (grad_output.size() > (1u << 16))
  for (long chl = 0; chl < static_cast<long>(c); ++chl) {
    const auto ch = static_cast<std::size_t>(chl);
    T sum_dy = 0, sum_dy_xh = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t base = (i * c + ch) * inner;
      for (std::size_t k = 0; k < inner; ++k) {
        sum_dy += grad_output[base + k];
        sum_dy_xh += grad_output[base + k] * normalized_[base + k];
      }
    }
    gamma_.grad[ch] += sum_dy_xh;
    beta_.grad[ch] += sum_dy;
    const T g = gamma_.value[ch];
    const T inv = inv_std_[ch];
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t base = (i * c + ch) * inner;
      for (std::size_t k = 0; k < inner; ++k) {
        if (cached_mode_ == Mode::train) {
          grad_input[base + k] =
              g * inv / count * (count * grad_output[base + k] - sum_dy - normalized_[base + k] * sum_dy_xh);
        } else {
          grad_input[base + k] = grad_output[base + k] * g * inv;
        }
      }
    }
  }
  return grad_input;
}

// ---------------------------------------------------------------- Relu

template <typename T>
Tensor<T> Relu<T>::infer(const Tensor<T>& input) const {
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T(0) ? input[i] : T(0);
  return out;
}

template <typename T>
Tensor<T> Relu<T>::forward(const Tensor<T>& input) {
  shape_ = input.shape();
  active_.resize(input.size());
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) {
    const bool on = input[i] > T(0);
    active_[i] = on;
    out[i] = on ? input[i] : T(0);
  }
  return out;
}

template <typename T>
Tensor<T> Relu<T>::backward(const Tensor<T>& grad_output) {
  require_cache(!shape_.empty(), "Relu");
  if (grad_output.shape() != shape_) throw std::invalid_argument("Relu: gradient shape mismatch");
  Tensor<T> grad_input(shape_);
  for (std::size_t i = 0; i < grad_output.size(); ++i) grad_input[i] = active_[i] ? grad_output[i] : T(0);
  return grad_input;
}

// ---------------------------------------------------------------- Sigmoid

template <typename T>
T sigmoid(T x) noexcept {
  T y;
  if (x >= T(0)) {
    y = T(1) / (T(1) + std::exp(-x));
  } else {
    const T e = std::exp(x);
    y = e / (T(1) + e);
  }
  constexpr T lo = std::numeric_limits<T>::denorm_min();
  const T hi = std::nextafter(T(1), T(0));
  return y < lo ? lo : (y > hi ? hi : y);
}

template <typename T>
Tensor<T> Sigmoid<T>::infer(const Tensor<T>& input) const {
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = sigmoid(input[i]);
  return out;
}

template <typename T>
Tensor<T> Sigmoid<T>::forward(const Tensor<T>& input) {
  output_ = infer(input);
  return output_;
}

template <typename T>
Tensor<T> Sigmoid<T>::backward(const Tensor<T>& grad_output) {
  require_cache(!output_.empty(), "Sigmoid");
  if (grad_output.shape() != output_.shape()) throw std::invalid_argument("Sigmoid: gradient shape mismatch");
  Tensor<T> grad_input(output_.shape());
  for (std::size_t i = 0; i < output_.size(); ++i)
    grad_input[i] = grad_output[i] * output_[i] * (T(1) - output_[i]);
  return grad_input;
}

// ---------------------------------------------------------------- MaxPool2x2

template <typename T>
Tensor<T> MaxPool2x2<T>::run(const Tensor<T>& input, std::vector<std::uint32_t>* argmax) const {
  if (input.rank() != 4) throw std::invalid_argument("MaxPool2x2: input must be [batch, channels, height, width]");
  const std::size_t h = input.dim(2), w = input.dim(3);
  if (h < 2 || w < 2) throw std::invalid_argument("MaxPool2x2: spatial dims must be at least 2");
  const std::size_t planes = input.dim(0) * input.dim(1);
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor<T> out({input.dim(0), input.dim(1), oh, ow});
  if (argmax) argmax->resize(out.size());
  for (std::size_t p = 0; p < planes; ++p) {
    const std::size_t base = p * h * w;
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        std::size_t best = base + 2 * y * w + 2 * x;
        const std::size_t candidates[3] = {best + 1, best + w, best + w + 1};
        for (std::size_t c : candidates)
          if (input[c] > input[best]) best = c;
        const std::size_t o = (p * oh + y) * ow + x;
        out[o] = input[best];
        if (argmax) (*argmax)[o] = static_cast<std::uint32_t>(best);
      }
  }
  return out;
}

template <typename T>
Tensor<T> MaxPool2x2<T>::infer(const Tensor<T>& input) const {
  return run(input, nullptr);
}

template <typename T>
Tensor<T> MaxPool2x2<T>::forward(const Tensor<T>& input) {
  input_shape_ = input.shape();
  return run(input, &argmax_);
}

template <typename T>
Tensor<T> MaxPool2x2<T>::backward(const Tensor<T>& grad_output) {
  require_cache(!input_shape_.empty(), "MaxPool2x2");
  if (grad_output.size() != argmax_.size()) throw std::invalid_argument("MaxPool2x2: gradient shape mismatch");
  Tensor<T> grad_input(input_shape_);
  for (std::size_t o = 0; o < argmax_.size(); ++o) grad_input[argmax_[o]] += grad_output[o];
  return grad_input;
}

// ---------------------------------------------------------------- Dropout

template <typename T>
Dropout<T>::Dropout(double p) : p_(p) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("Dropout: rate must be in [0, 1)");
}

template <typename T>
Tensor<T> Dropout<T>::forward(const Tensor<T>& input, Mode mode, SeededRng& rng) {
  has_cache_ = true;
  identity_ = mode == Mode::infer || p_ == 0.0;
  if (identity_) {
    mask_.clear();
    return input;
  }
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p_));
  mask_.resize(input.size());
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) {
    mask_[i] = rng.uniform() < p_ ? T(0) : keep_scale;
    out[i] = input[i] * mask_[i];
  }
  return out;
}

template <typename T>
Tensor<T> Dropout<T>::backward(const Tensor<T>& grad_output) {
  require_cache(has_cache_, "Dropout");
  if (identity_) return grad_output;
  if (grad_output.size() != mask_.size()) throw std::invalid_argument("Dropout: gradient shape mismatch");
  Tensor<T> grad_input(grad_output.shape());
  for (std::size_t i = 0; i < mask_.size(); ++i) grad_input[i] = grad_output[i] * mask_[i];
  return grad_input;
}

// ---------------------------------------------------------------- Dense

template <typename T>
Dense<T>::Dense(std::size_t in, std::size_t out, SeededRng& rng, bool zero_init) {
  if (in == 0 || out == 0) throw std::invalid_argument("Dense: feature counts must be positive");
  weights_ = Parameter<T>("weights", zero_init ? Tensor<T>({out, in})
                                               : randn<T>({out, in}, rng, 0.0, std::sqrt(2.0 / static_cast<double>(in))));
  bias_ = Parameter<T>("bias", Tensor<T>({out}));
}

template <typename T>
Dense<T>::Dense(Tensor<T> weights, Tensor<T> bias) {
  if (weights.rank() != 2 || bias.rank() != 1 || bias.dim(0) != weights.dim(0))
    throw std::invalid_argument("Dense: weights must be [out,in] and bias [out]");
  weights_ = Parameter<T>("weights", std::move(weights));
  bias_ = Parameter<T>("bias", std::move(bias));
}

template <typename T>
void Dense<T>::check_input(const Tensor<T>& input) const {
  if (input.rank() != 2 || input.dim(1) != in_features())
    throw std::invalid_argument("Dense: expected [N, " + std::to_string(in_features()) + "], got " +
                                shape_string(input.shape()));
}

template <typename T>
Tensor<T> Dense<T>::infer(const Tensor<T>& input) const {
  check_input(input);
  const std::size_t n = input.dim(0), out_f = out_features(), in_f = in_features();
  Tensor<T> out({n, out_f});
  kernels::matmul_nt(n, out_f, in_f, input.data(), weights_.value.data(), out.data());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < out_f; ++j) out[i * out_f + j] += bias_.value[j];
  return out;
}

template <typename T>
Tensor<T> Dense<T>::forward(const Tensor<T>& input) {
  Tensor<T> out = infer(input);
  cached_input_ = input;
  return out;
}

template <typename T>
Tensor<T> Dense<T>::backward(const Tensor<T>& grad_output) {
  require_cache(!cached_input_.empty(), "Dense");
  const std::size_t n = cached_input_.dim(0), out_f = out_features(), in_f = in_features();
  if (grad_output.shape() != Shape{n, out_f}) throw std::invalid_argument("Dense: gradient shape mismatch");
  Tensor<T> grad_input({n, in_f});
  kernels::matmul(n, in_f, out_f, grad_output.data(), weights_.value.data(), grad_input.data());
  kernels::matmul_tn(out_f, in_f, n, grad_output.data(), cached_input_.data(), weights_.grad.data(), true);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < out_f; ++j) bias_.grad[j] += grad_output[i * out_f + j];
  return grad_input;
}

// ---------------------------------------------------------------- Lstm

template <typename T>
Lstm<T>::Lstm(std::size_t features, std::size_t hidden, SeededRng& rng) {
  if (features == 0 || hidden == 0) throw std::invalid_argument("Lstm: sizes must be positive");
  input_weights_ = Parameter<T>(
      "input_weights", randn<T>({4 * hidden, features}, rng, 0.0, 1.0 / std::sqrt(static_cast<double>(features))));
  recurrent_weights_ = Parameter<T>(
      "recurrent_weights", randn<T>({4 * hidden, hidden}, rng, 0.0, 1.0 / std::sqrt(static_cast<double>(hidden))));
  Tensor<T> b({4 * hidden});
  for (std::size_t j = hidden; j < 2 * hidden; ++j) b[j] = T(1);
  bias_ = Parameter<T>("bias", std::move(b));
}

template <typename T>
Lstm<T>::Lstm(Tensor<T> input_weights, Tensor<T> recurrent_weights, Tensor<T> bias) {
  if (recurrent_weights.rank() != 2 || recurrent_weights.dim(0) != 4 * recurrent_weights.dim(1))
    throw std::invalid_argument("Lstm: recurrent weights must be [4H, H]");
  const std::size_t h = recurrent_weights.dim(1);
  if (input_weights.rank() != 2 || input_weights.dim(0) != 4 * h)
    throw std::invalid_argument("Lstm: input weights must be [4H, F]");
  if (bias.rank() != 1 || bias.dim(0) != 4 * h) throw std::invalid_argument("Lstm: bias must be [4H]");
  input_weights_ = Parameter<T>("input_weights", std::move(input_weights));
  recurrent_weights_ = Parameter<T>("recurrent_weights", std::move(recurrent_weights));
  bias_ = Parameter<T>("bias", std::move(bias));
}

template <typename T>
void Lstm<T>::check_input(const Tensor<T>& sequence) const {
  if (sequence.rank() != 3 || sequence.dim(2) != features())
    throw std::invalid_argument("Lstm: expected [T, N, " + std::to_string(features()) + "], got " +
                                shape_string(sequence.shape()));
}

template <typename T>
Tensor<T> Lstm<T>::run(const Tensor<T>& sequence, std::vector<Step>* steps) const {
  check_input(sequence);
  const std::size_t len = sequence.dim(0), n = sequence.dim(1), f = features(), h = hidden();
  const std::size_t g4 = 4 * h;
  std::vector<T> hidden_state(n * h, T(0)), cell(n * h, T(0)), z(n * g4);
  if (steps) steps->assign(len, Step{});
  for (std::size_t t = 0; t < len; ++t) {
    kernels::matmul_nt(n, g4, f, sequence.data() + t * n * f, input_weights_.value.data(), z.data());
    kernels::matmul_nt(n, g4, h, hidden_state.data(), recurrent_weights_.value.data(), z.data(), true);
    for (std::size_t b = 0; b < n; ++b) {
      T* zb = z.data() + b * g4;
      for (std::size_t j = 0; j < g4; ++j) zb[j] += bias_.value[j];
      for (std::size_t j = 0; j < h; ++j) {
        const T i_gate = sigmoid(zb[j]);
        const T f_gate = sigmoid(zb[h + j]);
        const T g_gate = std::tanh(zb[2 * h + j]);
        const T o_gate = sigmoid(zb[3 * h + j]);
        zb[j] = i_gate;
        zb[h + j] = f_gate;
        zb[2 * h + j] = g_gate;
        zb[3 * h + j] = o_gate;
        T& c = cell[b * h + j];
        c = f_gate * c + i_gate * g_gate;
        hidden_state[b * h + j] = o_gate * std::tanh(c);
      }
    }
    if (steps) {
      (*steps)[t].gates = z;
      (*steps)[t].cell = cell;
      (*steps)[t].hidden = hidden_state;
    }
  }
  return Tensor<T>({n, h}, std::move(hidden_state));
}

template <typename T>
Tensor<T> Lstm<T>::infer(const Tensor<T>& sequence) const {
  return run(sequence, nullptr);
}

template <typename T>
Tensor<T> Lstm<T>::forward(const Tensor<T>& sequence) {
  Tensor<T> out = run(sequence, &steps_);
  cached_input_ = sequence;
  return out;
}

template <typename T>
Tensor<T> Lstm<T>::backward(const Tensor<T>& grad_hidden) {
  require_cache(!cached_input_.empty(), "Lstm");
  const std::size_t len = cached_input_.dim(0), n = cached_input_.dim(1), f = features(), h = hidden();
  const std::size_t g4 = 4 * h;
  if (grad_hidden.shape() != Shape{n, h}) throw std::invalid_argument("Lstm: gradient shape mismatch");

  Tensor<T> grad_sequence(cached_input_.shape());
  std::vector<T> dh(grad_hidden.values().begin(), grad_hidden.values().end());
  std::vector<T> dc(n * h, T(0)), dz(n * g4), zero(n * h, T(0));

  for (std::size_t step = len; step-- > 0;) {
    const Step& cur = steps_[step];
    const std::vector<T>& c_prev = step > 0 ? steps_[step - 1].cell : zero;
    const std::vector<T>& h_prev = step > 0 ? steps_[step - 1].hidden : zero;
    for (std::size_t b = 0; b < n; ++b) {
      const T* gates = cur.gates.data() + b * g4;
      T* dzb = dz.data() + b * g4;
      for (std::size_t j = 0; j < h; ++j) {
        const std::size_t k = b * h + j;
        const T i_gate = gates[j], f_gate = gates[h + j], g_gate = gates[2 * h + j], o_gate = gates[3 * h + j];
        const T tanh_c = std::tanh(cur.cell[k]);
        const T d_o = dh[k] * tanh_c;
        const T d_c = dc[k] + dh[k] * o_gate * (T(1) - tanh_c * tanh_c);
        dzb[j] = d_c * g_gate * i_gate * (T(1) - i_gate);
        dzb[h + j] = d_c * c_prev[k] * f_gate * (T(1) - f_gate);
        dzb[2 * h + j] = d_c * i_gate * (T(1) - g_gate * g_gate);
        dzb[3 * h + j] = d_o * o_gate * (T(1) - o_gate);
        dc[k] = d_c * f_gate;
      }
    }
    const T* x_t = cached_input_.data() + step * n * f;
    kernels::matmul_tn(g4, f, n, dz.data(), x_t, input_weights_.grad.data(), true);
    kernels::matmul_tn(g4, h, n, dz.data(), h_prev.data(), recurrent_weights_.grad.data(), true);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t j = 0; j < g4; ++j) bias_.grad[j] += dz[b * g4 + j];
    kernels::matmul(n, f, g4, dz.data(), input_weights_.value.data(), grad_sequence.data() + step * n * f);
    kernels::matmul(n, h, g4, dz.data(), recurrent_weights_.value.data(), dh.data());
  }
  return grad_sequence;
}

template float sigmoid(float) noexcept;
template double sigmoid(double) noexcept;

template class Conv2d<float>;
template class Conv2d<double>;
template class BatchNorm<float>;
template class BatchNorm<double>;
template class Relu<float>;
template class Relu<double>;
template class Sigmoid<float>;
template class Sigmoid<double>;
template class MaxPool2x2<float>;
template class MaxPool2x2<double>;
template class Dropout<float>;
template class Dropout<double>;
template class Dense<float>;
template class Dense<double>;
template class Lstm<float>;
template class Lstm<double>;

}  // namespace echoqa
