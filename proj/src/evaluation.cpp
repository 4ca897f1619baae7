#include "echoqa/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>
#include <omp.h>

#include "echoqa/text.hpp"

namespace echoqa {

namespace {

constexpr std::size_t kPairwiseLeaf = 8;

void check_pair(std::span<const double> a, std::span<const double> b) {
  if (a.empty()) throw std::invalid_argument("no samples to evaluate");
  if (a.size() != b.size()) throw std::invalid_argument("predictions and ground truth differ in length");
}

void check_scores(const Tensor<double>& predicted, const Tensor<double>& truth) {
  if (predicted.rank() != 2 || predicted.dim(1) != 4 || predicted.shape() != truth.shape())
    throw std::invalid_argument("expected predictions and ground truth of shape [N, 4]");
}

std::vector<double> column(const Tensor<double>& t, std::size_t a) {
  std::vector<double> out(t.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = t[i * 4 + a];
  return out;
}

std::string fixed3(double v) { return format_fixed(v, 3); }

}  // namespace

double pairwise_sum(std::span<const double> v) {
  if (v.size() <= kPairwiseLeaf) {
    double s = 0;
    for (double x : v) s += x;
    return s;
  }
  const std::size_t half = v.size() / 2;
  return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

double mean_absolute_error(std::span<const double> predicted, std::span<const double> truth) {
  check_pair(predicted, truth);
  std::vector<double> err(predicted.size());
  for (std::size_t i = 0; i < err.size(); ++i) err[i] = std::abs(predicted[i] - truth[i]);
  return pairwise_sum(err) / static_cast<double>(err.size());
}

double accuracy(std::span<const double> predicted, std::span<const double> truth) {
  return (1.0 - mean_absolute_error(predicted, truth)) * 100.0;
}

std::array<std::optional<ErrorStats>, 3> band_error_stats(const Tensor<double>& predicted, const Tensor<double>& truth,
                                                          const std::vector<QualityBand>& bands) {
  check_scores(predicted, truth);
  const std::size_t n = predicted.dim(0);
  if (bands.size() != n) throw std::invalid_argument("need one quality band per sample");
  std::array<std::optional<ErrorStats>, 3> out;
  for (std::size_t b = 0; b < 3; ++b) {
    std::array<std::vector<double>, 4> errs;
    for (std::size_t i = 0; i < n; ++i)
      if (static_cast<std::size_t>(bands[i]) == b)
        for (std::size_t a = 0; a < 4; ++a) errs[a].push_back(std::abs(predicted[i * 4 + a] - truth[i * 4 + a]));
    if (errs[0].empty()) continue;
    ErrorStats s;
    s.count = errs[0].size();
    for (std::size_t a = 0; a < 4; ++a) {
      const double mean = pairwise_sum(errs[a]) / static_cast<double>(s.count);
      std::vector<double> sq(s.count);
      for (std::size_t i = 0; i < s.count; ++i) sq[i] = (errs[a][i] - mean) * (errs[a][i] - mean);
      s.mean[a] = mean;
      s.stddev[a] = std::sqrt(pairwise_sum(sq) / static_cast<double>(s.count));
    }
    out[b] = s;
  }
  return out;
}

Quartiles quartiles(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("no values to summarize");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  auto q = [&](double p) {
    const double h = static_cast<double>(v.size() - 1) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    if (lo + 1 >= v.size()) return v[lo];
    return v[lo] + (h - static_cast<double>(lo)) * (v[lo + 1] - v[lo]);
  };
  return {v.front(), q(0.25), q(0.5), q(0.75), v.back()};
}

std::array<Quartiles, 4> export_error_distribution(const Tensor<double>& errors) {
  if (errors.rank() != 2 || errors.dim(1) != 4) throw std::invalid_argument("expected errors of shape [N, 4]");
  std::array<Quartiles, 4> out;
  for (std::size_t a = 0; a < 4; ++a) out[a] = quartiles(column(errors, a));
  return out;
}

EvalReport evaluate(const Tensor<double>& predicted, const Tensor<double>& truth, const std::vector<QualityBand>& bands) {
  check_scores(predicted, truth);
  EvalReport r;
  r.samples = predicted.dim(0);
  Tensor<double> errors(predicted.shape());
  for (std::size_t i = 0; i < errors.size(); ++i) errors[i] = std::abs(predicted[i] - truth[i]);
  for (std::size_t a = 0; a < 4; ++a) {
    r.mae[a] = mean_absolute_error(column(predicted, a), column(truth, a));
    r.accuracy[a] = (1.0 - r.mae[a]) * 100.0;
  }
  r.mean_accuracy = pairwise_sum(r.accuracy) / 4.0;
  r.bands = band_error_stats(predicted, truth, bands);
  r.error_quartiles = export_error_distribution(errors);
  return r;
}

std::string EvalReport::to_records() const {
  std::ostringstream out;
  out << JsonLine()
             .field("record", "summary")
             .field("samples", samples)
             .fixed("accuracy", accuracy)
             .fixed("mae", mae)
             .fixed("mean_accuracy", mean_accuracy)
             .str()
      << '\n';
  for (std::size_t b = 0; b < 3; ++b) {
    JsonLine line;
    line.field("record", "band").field("band", band_name(static_cast<QualityBand>(b)));
    if (bands[b]) {
      line.field("count", bands[b]->count).fixed("error_mean", bands[b]->mean).fixed("error_stddev", bands[b]->stddev);
    } else {
      line.field("count", std::size_t{0}).raw("error_mean", "null").raw("error_stddev", "null");
    }
    out << line.str() << '\n';
  }
  for (std::size_t a = 0; a < 4; ++a) {
    const auto& q = error_quartiles[a];
    out << JsonLine()
               .field("record", "error_distribution")
               .field("attribute", attribute_name(kAttributes[a]))
               .fixed("min", q.min)
               .fixed("q1", q.q1)
               .fixed("median", q.median)
               .fixed("q3", q.q3)
               .fixed("max", q.max)
               .str()
        << '\n';
  }
  return out.str();
}

std::string EvalReport::to_table() const {
  std::ostringstream out;
  out << "samples: " << samples << "\n\n";
  out << "attribute  accuracy(%)  MAE\n";
  for (std::size_t a = 0; a < 4; ++a)
    out << attribute_label(kAttributes[a]) << "         " << format_fixed(accuracy[a], 2) << "       "
        << format_fixed(mae[a], 4) << '\n';
  out << "mean       " << format_fixed(mean_accuracy, 2) << "\n\n";
  out << "band     n     VS              LC              DG              FS\n";
  static constexpr const char* names[] = {"Q1 poor", "Q2 avg ", "Q3 good"};
  for (std::size_t b = 0; b < 3; ++b) {
    out << names[b] << "  ";
    if (!bands[b]) {
      out << "absent\n";
      continue;
    }
    out << bands[b]->count;
    for (std::size_t a = 0; a < 4; ++a)
      out << "  " << fixed3(bands[b]->mean[a]) << " +- " << fixed3(bands[b]->stddev[a]);
    out << '\n';
  }
  out << "\nerror     min    Q1     median Q3     max\n";
  for (std::size_t a = 0; a < 4; ++a) {
    const auto& q = error_quartiles[a];
    out << attribute_label(kAttributes[a]) << "        " << fixed3(q.min) << "  " << fixed3(q.q1) << "  "
        << fixed3(q.median) << "  " << fixed3(q.q3) << "  " << fixed3(q.max) << '\n';
  }
  return out.str();
}

std::string per_sample_errors(const Tensor<double>& predicted, const Tensor<double>& truth,
                              const std::vector<std::string>& ids, const std::vector<QualityBand>& bands) {
  check_scores(predicted, truth);
  const std::size_t n = predicted.dim(0);
  if (ids.size() != n || bands.size() != n) throw std::invalid_argument("need one id and band per sample");
  std::ostringstream out;
  for (std::size_t i = 0; i < n; ++i) {
    std::array<double, 4> pred{}, gt{}, err{};
    for (std::size_t a = 0; a < 4; ++a) {
      pred[a] = predicted[i * 4 + a];
      gt[a] = truth[i * 4 + a];
      err[a] = std::abs(pred[a] - gt[a]);
    }
    out << JsonLine()
               .field("clip_id", ids[i])
               .field("band", band_name(bands[i]))
               .shortest("pred_vs", pred[0]).shortest("pred_lc", pred[1])
               .shortest("pred_dg", pred[2]).shortest("pred_fs", pred[3])
               .shortest("gt_vs", gt[0]).shortest("gt_lc", gt[1]).shortest("gt_dg", gt[2]).shortest("gt_fs", gt[3])
               .fixed("abs_error", err)
               .str()
        << '\n';
  }
  return out.str();
}

ScoreSidecar ScoreSidecar::from_scores(std::string clip_id, const QualityScores& s, std::string checkpoint_id,
                                       std::string timestamp) {
  return {std::move(clip_id), s.attributes(), s.aggregate, std::move(checkpoint_id), std::move(timestamp)};
}

std::string ScoreSidecar::to_line() const {
  JsonLine line;
  line.field("clip_id", clip_id);
  for (std::size_t a = 0; a < 4; ++a) line.shortest(attribute_label(kAttributes[a]), scores[a]);
  return line.shortest("AS", aggregate).field("checkpoint", checkpoint_id).field("timestamp", timestamp).str();
}

ScoreSidecar ScoreSidecar::parse(std::string_view line) {
  const auto j = nlohmann::json::parse(line);
  ScoreSidecar s;
  s.clip_id = j.at("clip_id").get<std::string>();
  for (std::size_t a = 0; a < 4; ++a) s.scores[a] = j.at(std::string(attribute_label(kAttributes[a]))).get<double>();
  s.aggregate = j.at("AS").get<double>();
  s.checkpoint_id = j.at("checkpoint").get<std::string>();
  s.timestamp = j.at("timestamp").get<std::string>();
  return s;
}

// ---------------------------------------------------------------- latency

TimingStats timing_stats(std::span<const double> samples) {
  if (samples.empty()) throw std::invalid_argument("no timing samples");
  TimingStats s;
  const Quartiles q = quartiles(samples);
  s.median = q.median;
  s.min = q.min;
  s.max = q.max;
  s.mean = pairwise_sum(samples) / static_cast<double>(samples.size());
  std::vector<double> sq(samples.size());
  for (std::size_t i = 0; i < sq.size(); ++i) sq[i] = (samples[i] - s.mean) * (samples[i] - s.mean);
  s.stddev = std::sqrt(pairwise_sum(sq) / static_cast<double>(sq.size()));
  return s;
}

double LatencyReport::sequential_stream_sum() const {
  return per_stream[0].median + per_stream[1].median + per_stream[2].median + per_stream[3].median;
}

std::string hardware_descriptor() {
  std::string cpu = "unknown cpu";
  std::ifstream info("/proc/cpuinfo");
  std::string line;
  while (std::getline(info, line))
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) cpu = line.substr(colon + 2);
      break;
    }
  return cpu + "; " + std::to_string(std::thread::hardware_concurrency()) + " hardware threads; " +
         std::to_string(omp_get_max_threads()) + " OpenMP threads";
}

double timer_resolution_ms() {
  using clock = std::chrono::steady_clock;
  auto best = clock::duration::max();
  for (int i = 0; i < 200; ++i) {
    const auto t0 = clock::now();
    auto t1 = clock::now();
    while (t1 == t0) t1 = clock::now();
    best = std::min(best, t1 - t0);
  }
  return std::chrono::duration<double, std::milli>(best).count();
}

namespace {

template <typename F>
std::vector<double> time_runs(F&& run, std::size_t warmup, std::size_t iterations, double frames) {
  using clock = std::chrono::steady_clock;
  for (std::size_t i = 0; i < warmup; ++i) run();
  std::vector<double> ms;
  ms.reserve(iterations);
  for (std::size_t i = 0; i < iterations; ++i) {
    const auto t0 = clock::now();
    run();
    const auto t1 = clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count() / frames);
  }
  return ms;
}

void add_stats(JsonLine& line, const TimingStats& s) {
  line.fixed("median_ms", s.median).fixed("mean_ms", s.mean).fixed("stddev_ms", s.stddev).fixed("min_ms", s.min).fixed(
      "max_ms", s.max);
}

}  // namespace

LatencyReport benchmark_latency(const QaNetModel& model, const Tensor<float>& clip, std::size_t warmup,
                                std::size_t iterations) {
  if (iterations < kMinIterations)
    throw std::invalid_argument("iterations must be at least " + std::to_string(kMinIterations));
  if (warmup < kMinWarmup) throw std::invalid_argument("warmup must be at least " + std::to_string(kMinWarmup));
  if (clip.shape() != model.config().input.clip_shape())
    throw std::invalid_argument("clip " + shape_string(clip.shape()) + " does not match model input " +
                                shape_string(model.config().input.clip_shape()));
  LatencyReport r;
  r.warmup = warmup;
  r.iterations = iterations;
  r.frames_per_clip = clip.dim(0);
  r.input_shape = shape_string(clip.shape());
  r.hardware = hardware_descriptor();
  r.threads = omp_get_max_threads();
  r.timer_resolution_ms = timer_resolution_ms();
  const double frames = static_cast<double>(r.frames_per_clip);

  volatile double sink = 0;
  r.raw_parallel = time_runs([&] { sink = sink + model.forward_clip(clip, true).aggregate; }, warmup, iterations, frames);
  r.raw_sequential =
      time_runs([&] { sink = sink + model.forward_clip(clip, false).aggregate; }, warmup, iterations, frames);
  Shape batched{1};
  batched.insert(batched.end(), clip.shape().begin(), clip.shape().end());
  const Tensor<float> one = clip.reshaped(batched);
  for (std::size_t s = 0; s < 4; ++s) {
    const auto& stream = model.stream(kAttributes[s]);
    r.raw_stream[s] = time_runs([&] { sink = sink + stream.infer(one)[0]; }, warmup, iterations, frames);
    r.per_stream[s] = timing_stats(r.raw_stream[s]);
  }
  r.combined_parallel = timing_stats(r.raw_parallel);
  r.combined_sequential = timing_stats(r.raw_sequential);

  const double shortest =
      std::min({r.combined_parallel.median, r.combined_sequential.median, r.per_stream[0].median,
                r.per_stream[1].median, r.per_stream[2].median, r.per_stream[3].median}) *
      frames;
  if (r.timer_resolution_ms > 0.01 * shortest) {
    r.valid = false;
    r.invalid_reason = "timer resolution " + format_shortest(r.timer_resolution_ms) +
                       " ms is coarser than 1% of the measured median";
  }
  return r;
}

std::string LatencyReport::to_records() const {
  std::ostringstream out;
  out << JsonLine()
             .field("record", "latency")
             .field("hardware", hardware)
             .field("threads", threads)
             .field("input_shape", input_shape)
             .field("frames_per_clip", frames_per_clip)
             .field("warmup", warmup)
             .field("iterations", iterations)
             .fixed("timer_resolution_ms", timer_resolution_ms)
             .field("valid", valid)
             .field("invalid_reason", invalid_reason)
             .fixed("sequential_stream_sum_ms", sequential_stream_sum())
             .str()
      << '\n';
  auto emit = [&](const std::string& mode, const TimingStats& s) {
    JsonLine line;
    line.field("record", "timing").field("mode", mode);
    add_stats(line, s);
    out << line.str() << '\n';
  };
  emit("combined_parallel", combined_parallel);
  emit("combined_sequential", combined_sequential);
  for (std::size_t s = 0; s < 4; ++s) emit(std::string(attribute_name(kAttributes[s])), per_stream[s]);
  return out.str();
}

std::string LatencyReport::to_table() const {
  std::ostringstream out;
  out << "hardware: " << hardware << '\n'
      << "input " << input_shape << ", warmup " << warmup << ", iterations " << iterations << '\n'
      << "timer resolution: " << format_fixed(timer_resolution_ms, 6) << " ms\n\n"
      << "mode                  median    mean      stddev    min       max   (ms per frame)\n";
  auto row = [&](const std::string& name, const TimingStats& s) {
    std::string padded = name;
    padded.resize(20, ' ');
    out << padded << "  " << format_fixed(s.median, 3) << "  " << format_fixed(s.mean, 3) << "  "
        << format_fixed(s.stddev, 3) << "  " << format_fixed(s.min, 3) << "  " << format_fixed(s.max, 3) << '\n';
  };
  row("combined parallel", combined_parallel);
  row("combined sequential", combined_sequential);
  for (std::size_t s = 0; s < 4; ++s) row(std::string(attribute_name(kAttributes[s])), per_stream[s]);
  out << "sum of stream medians " << format_fixed(sequential_stream_sum(), 3) << '\n';
  if (!valid) out << "INVALID: " << invalid_reason << '\n';
  return out.str();
}

}  // namespace echoqa
