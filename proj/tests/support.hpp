#pragma once

// Independent reference implementations and a finite-difference gradient
// checker shared by the unit tests and the acceptance run.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "echoqa/layers.hpp"
#include "echoqa/rng.hpp"
#include "echoqa/tensor.hpp"

namespace oracle {

// Direct convolution sum: out[n,co,y,x] = sum over ci, ki, kj of
// in[n,ci,y*s+ki,x*s+kj] * w[co,ci,ki,kj], then + b[co].
template <typename T>
std::vector<T> conv2d(const std::vector<T>& in, const std::vector<T>& w, const std::vector<T>& b, std::size_t n,
                      std::size_t cin, std::size_t h, std::size_t wd, std::size_t cout, std::size_t k, std::size_t s) {
  const std::size_t oh = (h - k) / s + 1, ow = (wd - k) / s + 1;
  std::vector<T> out(n * cout * oh * ow);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          T acc = 0;
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t ki = 0; ki < k; ++ki)
              for (std::size_t kj = 0; kj < k; ++kj)
                acc += in[((i * cin + ci) * h + y * s + ki) * wd + x * s + kj] * w[((co * cin + ci) * k + ki) * k + kj];
          out[((i * cout + co) * oh + y) * ow + x] = acc + b[co];
        }
  return out;
}

inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                  std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

// Sort-based quantile with linear interpolation between order statistics.
inline double quantile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double pos = p * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] * (1 - (pos - lo)) + v[hi] * (pos - lo);
}

// Welford single-pass mean and population standard deviation.
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  double mean = 0, m2 = 0;
  std::size_t n = 0;
  for (double x : v) {
    ++n;
    const double d = x - mean;
    mean += d / static_cast<double>(n);
    m2 += d * (x - mean);
  }
  return {mean, std::sqrt(m2 / static_cast<double>(n))};
}

}  // namespace oracle

namespace gradcheck {

inline constexpr double kStep = 1e-4;

// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose true
// gradient is zero from dividing roundoff by roundoff.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct Entry {
  std::string name;
  echoqa::Tensor<double>* value;
  const echoqa::Tensor<double>* grad;
};

struct Result {
  std::size_t checked = 0;
  std::size_t skipped = 0;  // perturbation crossed a ReLU or pooling switch
  double max_relative = 0;
  std::string worst;
};

// loss() must rerun the forward pass (with any randomness reseeded) and
// return the scalar loss; signature() identifies the piecewise-linear region
// of the last forward pass. Entries are drawn uniformly by tensor, then by
// element, until `samples` checks succeed.
inline Result check(std::vector<Entry> entries, const std::function<double()>& loss,
                    const std::function<std::uint64_t()>& signature, std::size_t samples, std::uint64_t seed) {
  Result r;
  echoqa::SeededRng rng(seed);
  loss();
  const std::uint64_t base = signature();
  std::size_t attempts = 0;
  while (r.checked < samples) {
    if (++attempts > samples * 20) throw std::runtime_error("gradient check: too many kinks");
    const auto& e = entries[rng.below(entries.size())];
    const std::size_t idx = rng.below(e.value->size());
    double& v = (*e.value)[idx];
    const double saved = v;
    v = saved + kStep;
    const double up = loss();
    const bool same_up = signature() == base;
    v = saved - kStep;
    const double down = loss();
    const bool same_down = signature() == base;
    v = saved;
    if (!same_up || !same_down) {
      ++r.skipped;
      continue;
    }
    const double numeric = (up - down) / (2 * kStep);
    const double analytic = (*e.grad)[idx];
    const double rel = relative_error(analytic, numeric);
    ++r.checked;
    if (rel > r.max_relative) {
      r.max_relative = rel;
      r.worst = e.name + "[" + std::to_string(idx) + "] analytic " + std::to_string(analytic) + " numeric " +
                std::to_string(numeric);
    }
  }
  return r;
}

// Sum of weights * output, the usual random projection loss.
inline double project(const echoqa::Tensor<double>& out, const echoqa::Tensor<double>& weights) {
  double s = 0;
  for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * weights[i];
  return s;
}

inline std::uint64_t hash_bytes(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) h = (h ^ p[i]) * 0x100000001B3ULL;
  return h;
}

}  // namespace gradcheck
