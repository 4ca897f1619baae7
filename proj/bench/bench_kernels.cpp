// Serial reference loops against the OpenMP kernels on shapes taken from the
// first layers of a stream at 224x224.

#include <benchmark/benchmark.h>

#include <vector>

#include "echoqa/kernels.hpp"
#include "echoqa/rng.hpp"

using namespace echoqa;

namespace {

std::vector<float> random_values(std::size_t n, std::uint64_t seed) {
  SeededRng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

kernels::ConvShape conv_shape(const benchmark::State& state) {
  kernels::ConvShape s;
  s.batch = 3;
  s.in_channels = static_cast<std::size_t>(state.range(0));
  s.out_channels = 32;
  s.height = s.width = static_cast<std::size_t>(state.range(1));
  return s;
}

template <bool Parallel>
void conv_forward(benchmark::State& state) {
  const auto s = conv_shape(state);
  const auto in = random_values(s.input_size(), 1), w = random_values(s.weight_size(), 2),
             b = random_values(s.out_channels, 3);
  std::vector<float> out(s.output_size());
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::conv2d_forward(s, in.data(), w.data(), b.data(), out.data());
    else
      kernels::reference::conv2d_forward(s, in.data(), w.data(), b.data(), out.data());
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(s.output_size() * s.in_channels * 9));
}

template <bool Parallel>
void conv_backward_input(benchmark::State& state) {
  const auto s = conv_shape(state);
  const auto w = random_values(s.weight_size(), 2), g = random_values(s.output_size(), 4);
  std::vector<float> gin(s.input_size());
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::conv2d_backward_input(s, w.data(), g.data(), gin.data());
    else
      kernels::reference::conv2d_backward_input(s, w.data(), g.data(), gin.data());
    benchmark::DoNotOptimize(gin.data());
  }
}

template <bool Parallel>
void matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_values(n * n, 5), b = random_values(n * n, 6);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::matmul(n, n, n, a.data(), b.data(), c.data());
    else
      kernels::reference::matmul(n, n, n, a.data(), b.data(), c.data());
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

}  // namespace

BENCHMARK(conv_forward<false>)->Name("conv_forward/serial")->Args({1, 224})->Args({32, 111})->Unit(benchmark::kMillisecond);
BENCHMARK(conv_forward<true>)->Name("conv_forward/openmp")->Args({1, 224})->Args({32, 111})->Unit(benchmark::kMillisecond);
BENCHMARK(conv_backward_input<false>)->Name("conv_backward_input/serial")->Args({32, 111})->Unit(benchmark::kMillisecond);
BENCHMARK(conv_backward_input<true>)->Name("conv_backward_input/openmp")->Args({32, 111})->Unit(benchmark::kMillisecond);
BENCHMARK(matmul<false>)->Name("matmul/serial")->Arg(128)->Arg(512)->Unit(benchmark::kMillisecond);
BENCHMARK(matmul<true>)->Name("matmul/openmp")->Arg(128)->Arg(512)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
