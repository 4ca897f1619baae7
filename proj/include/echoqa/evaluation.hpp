#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "echoqa/qanet.hpp"
#include "echoqa/synthgen.hpp"
#include "echoqa/tensor.hpp"

namespace echoqa {

/// Pairwise (binary tree) summation with a fixed leaf size; the grouping
/// depends only on the length, so results are reproducible.
double pairwise_sum(std::span<const double> values);

double mean_absolute_error(std::span<const double> predicted, std::span<const double> truth);
/// (1 - MAE) * 100 on normalized scores.
double accuracy(std::span<const double> predicted, std::span<const double> truth);

struct ErrorStats {
  std::size_t count = 0;
  std::array<double, 4> mean{};
  std::array<double, 4> stddev{};  // population
};

/// Absolute errors [N, 4] grouped by quality band (poor, average, good).
/// Bands without samples are std::nullopt.
std::array<std::optional<ErrorStats>, 3> band_error_stats(const Tensor<double>& predicted, const Tensor<double>& truth,
                                                          const std::vector<QualityBand>& bands);

/// Five-number summary. Quantiles interpolate linearly between order
/// statistics: q(p) = x[floor(h)] + (h - floor(h)) (x[floor(h)+1] - x[floor(h)]),
/// h = (n - 1) p over the sorted values.
struct Quartiles {
  double min = 0;
  double q1 = 0;
  double median = 0;
  double q3 = 0;
  double max = 0;
};

Quartiles quartiles(std::span<const double> values);
/// Per attribute quartiles of the absolute errors [N, 4].
std::array<Quartiles, 4> export_error_distribution(const Tensor<double>& errors);

struct EvalReport {
  std::size_t samples = 0;
  std::array<double, 4> accuracy{};
  std::array<double, 4> mae{};
  double mean_accuracy = 0;
  std::array<std::optional<ErrorStats>, 3> bands;
  std::array<Quartiles, 4> error_quartiles{};

  /// One JSON object per line: a summary record, one record per populated
  /// band and one per attribute's error quartiles.
  std::string to_records() const;
  std::string to_table() const;
};

/// Bands come from the ground-truth raw scores.
EvalReport evaluate(const Tensor<double>& predicted, const Tensor<double>& truth, const std::vector<QualityBand>& bands);

/// |pred - truth| per clip as JSON lines (clip_id, four errors, band).
std::string per_sample_errors(const Tensor<double>& predicted, const Tensor<double>& truth,
                              const std::vector<std::string>& ids, const std::vector<QualityBand>& bands);

/// Per-clip score record written by inference. Scores use the shortest
/// round-trip decimal form, so AS reads back as exactly the stored value.
struct ScoreSidecar {
  std::string clip_id;
  std::array<double, 4> scores{};  // VS, LC, DG, FS
  double aggregate = 0;            // AS
  std::string checkpoint_id;
  std::string timestamp;

  static ScoreSidecar from_scores(std::string clip_id, const QualityScores& s, std::string checkpoint_id,
                                  std::string timestamp);
  std::string to_line() const;
  static ScoreSidecar parse(std::string_view line);
  bool operator==(const ScoreSidecar&) const = default;
};

// ---- latency

struct TimingStats {
  double median = 0;
  double mean = 0;
  double stddev = 0;  // population
  double min = 0;
  double max = 0;
};

TimingStats timing_stats(std::span<const double> samples);

struct LatencyReport {
  std::size_t warmup = 0;
  std::size_t iterations = 0;
  std::size_t frames_per_clip = 0;
  std::string input_shape;
  std::string hardware;
  int threads = 1;
  double timer_resolution_ms = 0;
  bool valid = true;
  std::string invalid_reason;
  // Milliseconds per frame.
  TimingStats combined_parallel;
  TimingStats combined_sequential;
  std::array<TimingStats, 4> per_stream{};
  std::vector<double> raw_parallel;
  std::vector<double> raw_sequential;
  std::array<std::vector<double>, 4> raw_stream;

  double sequential_stream_sum() const;
  std::string to_records() const;
  std::string to_table() const;
};

inline constexpr std::size_t kMinIterations = 30;
inline constexpr std::size_t kMinWarmup = 5;

std::string hardware_descriptor();
/// Smallest nonzero step of the monotonic clock, in milliseconds.
double timer_resolution_ms();

/// Times inference on one clip [frames, 1, H, W]: the four streams together
/// on parallel threads, together on one thread, and each stream alone.
LatencyReport benchmark_latency(const QaNetModel& model, const Tensor<float>& clip, std::size_t warmup,
                                std::size_t iterations);

}  // namespace echoqa
