#pragma once

// Compute kernels behind the layers. Each kernel has a plain serial version in
// `reference` (kept for tests and the benchmark) and an OpenMP version used by
// the library. Parallel versions split work over independent outputs only, so
// results do not depend on the thread count.
//
// Forward convolution sums, for every output element, over input channel, then
// kernel row, then kernel column, starting from zero, and adds the bias last.
// Both versions keep that order, so they agree bit for bit.

#include <algorithm>
#include <cstddef>
#include <vector>

#include <omp.h>

namespace echoqa::kernels {

struct ConvShape {
  std::size_t batch = 1;
  std::size_t in_channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t out_channels = 1;
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t stride = 1;

  std::size_t out_h() const noexcept { return (height - kernel_h) / stride + 1; }
  std::size_t out_w() const noexcept { return (width - kernel_w) / stride + 1; }
  std::size_t input_size() const noexcept { return batch * in_channels * height * width; }
  std::size_t output_size() const noexcept { return batch * out_channels * out_h() * out_w(); }
  std::size_t weight_size() const noexcept { return out_channels * in_channels * kernel_h * kernel_w; }
};

// Below this many multiply-adds a kernel stays on the calling thread.
inline constexpr std::size_t kParallelThreshold = 1u << 15;

namespace reference {

template <typename T>
void conv2d_forward(const ConvShape& s, const T* input, const T* weights, const T* bias, T* output) {
  const std::size_t oh = s.out_h(), ow = s.out_w();
  for (std::size_t n = 0; n < s.batch; ++n)
    for (std::size_t co = 0; co < s.out_channels; ++co)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          T acc = T(0);
          for (std::size_t ci = 0; ci < s.in_channels; ++ci) {
            const T* plane = input + (n * s.in_channels + ci) * s.height * s.width;
            const T* kernel = weights + (co * s.in_channels + ci) * s.kernel_h * s.kernel_w;
            for (std::size_t ki = 0; ki < s.kernel_h; ++ki)
              for (std::size_t kj = 0; kj < s.kernel_w; ++kj)
                acc += kernel[ki * s.kernel_w + kj] *
                       plane[(oy * s.stride + ki) * s.width + ox * s.stride + kj];
          }
          output[((n * s.out_channels + co) * oh + oy) * ow + ox] = acc + bias[co];
        }
}

// grad_in is overwritten.
template <typename T>
void conv2d_backward_input(const ConvShape& s, const T* weights, const T* grad_out, T* grad_in) {
  const std::size_t oh = s.out_h(), ow = s.out_w();
  std::fill(grad_in, grad_in + s.input_size(), T(0));
  for (std::size_t n = 0; n < s.batch; ++n)
    for (std::size_t co = 0; co < s.out_channels; ++co)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const T g = grad_out[((n * s.out_channels + co) * oh + oy) * ow + ox];
          for (std::size_t ci = 0; ci < s.in_channels; ++ci) {
            T* plane = grad_in + (n * s.in_channels + ci) * s.height * s.width;
            const T* kernel = weights + (co * s.in_channels + ci) * s.kernel_h * s.kernel_w;
            for (std::size_t ki = 0; ki < s.kernel_h; ++ki)
              for (std::size_t kj = 0; kj < s.kernel_w; ++kj)
                plane[(oy * s.stride + ki) * s.width + ox * s.stride + kj] += kernel[ki * s.kernel_w + kj] * g;
          }
        }
}

// Gradients are added to grad_w and grad_b.
template <typename T>
void conv2d_backward_params(const ConvShape& s, const T* input, const T* grad_out, T* grad_w, T* grad_b) {
  const std::size_t oh = s.out_h(), ow = s.out_w();
  for (std::size_t co = 0; co < s.out_channels; ++co) {
    T bias_acc = T(0);
    for (std::size_t n = 0; n < s.batch; ++n)
      for (std::size_t p = 0; p < oh * ow; ++p) bias_acc += grad_out[(n * s.out_channels + co) * oh * ow + p];
    grad_b[co] += bias_acc;
    for (std::size_t ci = 0; ci < s.in_channels; ++ci)
      for (std::size_t ki = 0; ki < s.kernel_h; ++ki)
        for (std::size_t kj = 0; kj < s.kernel_w; ++kj) {
          T acc = T(0);
          for (std::size_t n = 0; n < s.batch; ++n) {
            const T* plane = input + (n * s.in_channels + ci) * s.height * s.width;
            const T* g = grad_out + (n * s.out_channels + co) * oh * ow;
            for (std::size_t oy = 0; oy < oh; ++oy)
              for (std::size_t ox = 0; ox < ow; ++ox)
                acc += g[oy * ow + ox] * plane[(oy * s.stride + ki) * s.width + ox * s.stride + kj];
          }
          grad_w[((co * s.in_channels + ci) * s.kernel_h + ki) * s.kernel_w + kj] += acc;
        }
  }
}

// C[m x n] = A[m x k] * B[k x n]
template <typename T>
void matmul(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
}

}  // namespace reference

namespace detail {

// Copies [planes, oh, ow] into [planes, oh, width] with zeroed trailing columns.
// Stride-1 kernels then index input and gradient planes with the same row pitch.
template <typename T>
std::vector<T> widen_rows(const T* src, std::size_t planes, std::size_t oh, std::size_t ow, std::size_t width) {
  std::vector<T> wide(planes * oh * width, T(0));
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      std::copy_n(src + (p * oh + y) * ow, ow, wide.data() + (p * oh + y) * width);
  return wide;
}

}  // namespace detail

template <typename T>
void conv2d_forward(const ConvShape& s, const T* input, const T* weights, const T* bias, T* output) {
  const std::size_t oh = s.out_h(), ow = s.out_w();
  const std::size_t taps = s.in_channels * s.kernel_h * s.kernel_w;
  const bool parallel = s.output_size() * taps >= kParallelThreshold;
  const auto planes = static_cast<long>(s.batch * s.out_channels);

  if (s.stride != 1) {
#pragma omp parallel for schedule(static) if (parallel)
    for (long plane = 0; plane < planes; ++plane) {
      const std::size_t n = static_cast<std::size_t>(plane) / s.out_channels;
      const std::size_t co = static_cast<std::size_t>(plane) % s.out_channels;
      ConvShape one = s;
      one.batch = 1;
      one.out_channels = 1;
      reference::conv2d_forward(one, input + n * s.in_channels * s.height * s.width,
                                weights + co * taps, bias + co, output + plane * oh * ow);
    }
    return;
  }

  // Stride 1: accumulate whole output planes laid out with the input's row
  // pitch, so each kernel tap is one contiguous multiply-add sweep. Columns
  // past ow hold wrapped values and are discarded.
  const std::size_t span = (oh - 1) * s.width + ow;
#pragma omp parallel if (parallel)
  {
    std::vector<T> acc(oh * s.width);
#pragma omp for schedule(static)
    for (long plane = 0; plane < planes; ++plane) {
      const std::size_t n = static_cast<std::size_t>(plane) / s.out_channels;
      const std::size_t co = static_cast<std::size_t>(plane) % s.out_channels;
      std::fill(acc.begin(), acc.end(), T(0));
      T* __restrict dst = acc.data();
      for (std::size_t ci = 0; ci < s.in_channels; ++ci) {
        const T* src_plane = input + (n * s.in_channels + ci) * s.height * s.width;
        const T* kernel = weights + (co * s.in_channels + ci) * s.kernel_h * s.kernel_w;
        for (std::size_t ki = 0; ki < s.kernel_h; ++ki)
          for (std::size_t kj = 0; kj < s.kernel_w; ++kj) {
            const T w = kernel[ki * s.kernel_w + kj];
            const T* __restrict src = src_plane + ki * s.width + kj;
#pragma omp simd
            for (std::size_t p = 0; p < span; ++p) dst[p] += w * src[p];
          }
      }
      T* out = output + static_cast<std::size_t>(plane) * oh * ow;
      const T b = bias[co];
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) out[y * ow + x] = acc[y * s.width + x] + b;
    }
  }
}

template <typename T>
void conv2d_backward_input(const ConvShape& s, const T* weights, const T* grad_out, T* grad_in) {
  const std::size_t oh = s.out_h(), ow = s.out_w();
  const std::size_t hw = s.height * s.width;
  const std::size_t taps = s.kernel_h * s.kernel_w;
  const bool parallel = s.output_size() * s.in_channels * taps >= kParallelThreshold;
  const auto planes = static_cast<long>(s.batch * s.in_channels);

  if (s.stride != 1) {
#pragma omp parallel for schedule(static) if (parallel)
    for (long plane = 0; plane < planes; ++plane) {
      const std::size_t n = static_cast<std::size_t>(plane) / s.in_channels;
      const std::size_t ci = static_cast<std::size_t>(plane) % s.in_channels;
      T* dst = grad_in + static_cast<std::size_t>(plane) * hw;
      std::fill(dst, dst + hw, T(0));
      for (std::size_t co = 0; co < s.out_channels; ++co) {
        const T* g = grad_out + (n * s.out_channels + co) * oh * ow;
        const T* kernel = weights + (co * s.in_channels + ci) * taps;
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox)
            for (std::size_t ki = 0; ki < s.kernel_h; ++ki)
              for (std::size_t kj = 0; kj < s.kernel_w; ++kj)
                dst[(oy * s.stride + ki) * s.width + ox * s.stride + kj] +=
                    kernel[ki * s.kernel_w + kj] * g[oy * ow + ox];
      }
    }
    return;
  }

  const std::vector<T> wide = detail::widen_rows(grad_out, s.batch * s.out_channels, oh, ow, s.width);
  const std::size_t span = (oh - 1) * s.width + ow;
#pragma omp parallel for schedule(static) if (parallel)
  for (long plane = 0; plane < planes; ++plane) {
    const std::size_t n = static_cast<std::size_t>(plane) / s.in_channels;
    const std::size_t ci = static_cast<std::size_t>(plane) % s.in_channels;
    T* dst_plane = grad_in + static_cast<std::size_t>(plane) * hw;
    std::fill(dst_plane, dst_plane + hw, T(0));
    for (std::size_t co = 0; co < s.out_channels; ++co) {
      const T* __restrict g = wide.data() + (n * s.out_channels + co) * oh * s.width;
      const T* kernel = weights + (co * s.in_channels + ci) * taps;
      for (std::size_t ki = 0; ki < s.kernel_h; ++ki)
        for (std::size_t kj = 0; kj < s.kernel_w; ++kj) {
          const T w = kernel[ki * s.kernel_w + kj];
          T* __restrict dst = dst_plane + ki * s.width + kj;
#pragma omp simd
          for (std::size_t p = 0; p < span; ++p) dst[p] += w * g[p];
        }
    }
  }
}

template <typename T>
void conv2d_backward_params(const ConvShape& s, const T* input, const T* grad_out, T* grad_w, T* grad_b) {
  const std::size_t oh = s.out_h(), ow = s.out_w();
  const std::size_t hw = s.height * s.width;
  const std::size_t taps = s.kernel_h * s.kernel_w;
  const bool parallel = s.output_size() * s.in_channels * taps >= kParallelThreshold;

  for (std::size_t co = 0; co < s.out_channels; ++co) {
    T acc = T(0);
    for (std::size_t n = 0; n < s.batch; ++n) {
      const T* g = grad_out + (n * s.out_channels + co) * oh * ow;
      for (std::size_t p = 0; p < oh * ow; ++p) acc += g[p];
    }
    grad_b[co] += acc;
  }

  const auto pairs = static_cast<long>(s.out_channels * s.in_channels);
  if (s.stride != 1) {
#pragma omp parallel for schedule(static) if (parallel)
    for (long pair = 0; pair < pairs; ++pair) {
      const std::size_t co = static_cast<std::size_t>(pair) / s.in_channels;
      const std::size_t ci = static_cast<std::size_t>(pair) % s.in_channels;
      for (std::size_t ki = 0; ki < s.kernel_h; ++ki)
        for (std::size_t kj = 0; kj < s.kernel_w; ++kj) {
          T acc = T(0);
          for (std::size_t n = 0; n < s.batch; ++n) {
            const T* plane = input + (n * s.in_channels + ci) * hw;
            const T* g = grad_out + (n * s.out_channels + co) * oh * ow;
            for (std::size_t oy = 0; oy < oh; ++oy)
              for (std::size_t ox = 0; ox < ow; ++ox)
                acc += g[oy * ow + ox] * plane[(oy * s.stride + ki) * s.width + ox * s.stride + kj];
          }
          grad_w[static_cast<std::size_t>(pair) * taps + ki * s.kernel_w + kj] += acc;
        }
    }
    return;
  }

  const std::vector<T> wide = detail::widen_rows(grad_out, s.batch * s.out_channels, oh, ow, s.width);
  const std::size_t span = (oh - 1) * s.width + ow;
#pragma omp parallel for schedule(static) if (parallel)
  for (long pair = 0; pair < pairs; ++pair) {
    const std::size_t co = static_cast<std::size_t>(pair) / s.in_channels;
    const std::size_t ci = static_cast<std::size_t>(pair) % s.in_channels;
    for (std::size_t ki = 0; ki < s.kernel_h; ++ki)
      for (std::size_t kj = 0; kj < s.kernel_w; ++kj) {
        T total = T(0);
        for (std::size_t n = 0; n < s.batch; ++n) {
          const T* __restrict g = wide.data() + (n * s.out_channels + co) * oh * s.width;
          const T* __restrict x = input + (n * s.in_channels + ci) * hw + ki * s.width + kj;
          T acc = T(0);
#pragma omp simd reduction(+ : acc)
          for (std::size_t p = 0; p < span; ++p) acc += g[p] * x[p];
          total += acc;
        }
        grad_w[static_cast<std::size_t>(pair) * taps + ki * s.kernel_w + kj] += total;
      }
  }
}

// C[m x n] = A[m x k] * B[k x n], or C += ... when accumulate is set.
template <typename T>
void matmul(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate = false) {
  const bool parallel = m * n * k >= kParallelThreshold && m > 1;
#pragma omp parallel for schedule(static) if (parallel)
  for (long row = 0; row < static_cast<long>(m); ++row) {
    const auto i = static_cast<std::size_t>(row);
    T* __restrict out = c + i * n;
    if (!accumulate) std::fill(out, out + n, T(0));
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* __restrict brow = b + p * n;
#pragma omp simd
      for (std::size_t j = 0; j < n; ++j) out[j] += av * brow[j];
    }
  }
}

// C[m x n] = A[m x k] * B^T where B is [n x k].
template <typename T>
void matmul_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate = false) {
  const bool parallel = m * n * k >= kParallelThreshold;
#pragma omp parallel for collapse(2) schedule(static) if (parallel)
  for (long row = 0; row < static_cast<long>(m); ++row)
    for (long col = 0; col < static_cast<long>(n); ++col) {
      const T* __restrict arow = a + static_cast<std::size_t>(row) * k;
      const T* __restrict brow = b + static_cast<std::size_t>(col) * k;
      T acc = T(0);
#pragma omp simd reduction(+ : acc)
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      T& out = c[static_cast<std::size_t>(row) * n + static_cast<std::size_t>(col)];
      out = accumulate ? out + acc : acc;
    }
}

// C[m x n] = A^T * B where A is [k x m] and B is [k x n].
template <typename T>
void matmul_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate = false) {
  const bool parallel = m * n * k >= kParallelThreshold && m > 1;
#pragma omp parallel for schedule(static) if (parallel)
  for (long row = 0; row < static_cast<long>(m); ++row) {
    const auto i = static_cast<std::size_t>(row);
    T* __restrict out = c + i * n;
    if (!accumulate) std::fill(out, out + n, T(0));
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[p * m + i];
      const T* __restrict brow = b + p * n;
#pragma omp simd
      for (std::size_t j = 0; j < n; ++j) out[j] += av * brow[j];
    }
  }
}

}  // namespace echoqa::kernels
