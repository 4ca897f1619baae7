#include <cmath>

#include "doctest.h"
#include "echoqa/evaluation.hpp"
#include "support.hpp"

using namespace echoqa;

TEST_CASE("accuracy formula") {
  const std::vector<double> truth{0.1, 0.5, 0.9, 0.3};
  CHECK(accuracy(truth, truth) == 100.0);
  std::vector<double> off = truth;
  for (auto& v : off) v += 0.0375;
  CHECK(accuracy(off, truth) == doctest::Approx(96.25).epsilon(1e-12));
  CHECK_THROWS_AS(accuracy(std::vector<double>{1}, truth), std::invalid_argument);
  CHECK_THROWS_AS(mean_absolute_error(std::vector<double>{}, std::vector<double>{}), std::invalid_argument);
}

TEST_CASE("pairwise sum is exact on integers and stable on long runs") {
  std::vector<double> v(1000);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
  CHECK(pairwise_sum(v) == 499500.0);
  std::vector<double> tenths(1 << 20, 0.1);
  CHECK(std::abs(pairwise_sum(tenths) - 104857.6) < 1e-8);
  CHECK(pairwise_sum(std::vector<double>{}) == 0.0);
}

TEST_CASE("band stats pool back to the global mae") {
  SeededRng rng(1);
  const std::size_t n = 300;
  Tensor<double> pred({n, 4}), truth({n, 4});
  std::vector<QualityBand> bands(n);
  for (std::size_t i = 0; i < n; ++i) {
    bands[i] = static_cast<QualityBand>(rng.below(3));
    for (std::size_t a = 0; a < 4; ++a) {
      truth[i * 4 + a] = rng.uniform();
      pred[i * 4 + a] = rng.uniform();
    }
  }
  const auto stats = band_error_stats(pred, truth, bands);
  for (std::size_t a = 0; a < 4; ++a) {
    std::vector<double> p(n), t(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = pred[i * 4 + a], t[i] = truth[i * 4 + a];
    double pooled = 0;
    std::size_t count = 0;
    for (const auto& s : stats) {
      REQUIRE(s.has_value());
      pooled += s->mean[a] * static_cast<double>(s->count);
      count += s->count;
    }
    CHECK(count == n);
    CHECK(std::abs(pooled / static_cast<double>(n) - mean_absolute_error(p, t)) < 1e-12);
  }
  // Population standard deviation against Welford.
  std::vector<double> errs;
  for (std::size_t i = 0; i < n; ++i)
    if (bands[i] == QualityBand::good) errs.push_back(std::abs(pred[i * 4] - truth[i * 4]));
  const auto [mean, sd] = oracle::mean_std(errs);
  CHECK(stats[2]->mean[0] == doctest::Approx(mean).epsilon(1e-12));
  CHECK(stats[2]->stddev[0] == doctest::Approx(sd).epsilon(1e-12));
}

TEST_CASE("empty bands are reported as missing") {
  Tensor<double> p({2, 4}), t({2, 4});
  const auto s = band_error_stats(p, t, {QualityBand::poor, QualityBand::poor});
  CHECK(s[0].has_value());
  CHECK_FALSE(s[1].has_value());
  CHECK_FALSE(s[2].has_value());
}

TEST_CASE("quartiles match a sort based oracle") {
  SeededRng rng(2);
  for (std::size_t n : {1u, 2u, 5u, 100u, 101u}) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    const auto q = quartiles(v);
    CHECK(q.min == oracle::quantile(v, 0.0));
    CHECK(q.q1 == doctest::Approx(oracle::quantile(v, 0.25)).epsilon(1e-15));
    CHECK(q.median == doctest::Approx(oracle::quantile(v, 0.5)).epsilon(1e-15));
    CHECK(q.q3 == doctest::Approx(oracle::quantile(v, 0.75)).epsilon(1e-15));
    CHECK(q.max == oracle::quantile(v, 1.0));
  }
  CHECK_THROWS(quartiles(std::vector<double>{}));
}

TEST_CASE("eval report records are line delimited json") {
  Tensor<double> p({3, 4}, std::vector<double>(12, 0.5)), t({3, 4}, std::vector<double>(12, 0.25));
  const auto r = evaluate(p, t, {QualityBand::poor, QualityBand::good, QualityBand::good});
  CHECK(r.accuracy[0] == 75.0);
  CHECK(r.mean_accuracy == 75.0);
  const auto text = r.to_records();
  std::size_t lines = 0;
  for (char c : text) lines += c == '\n';
  CHECK(lines == 1 + 3 + 4);
  CHECK(text.find("\"accuracy\":[75.000000,75.000000,75.000000,75.000000]") != std::string::npos);
}

TEST_CASE("sidecar round trip keeps the aggregate exact") {
  QualityScores s = QualityScores::from_attributes({0.1, 0.2, 0.7, 1.0 / 3.0}, {0.25, 0.25, 0.25, 0.25});
  const auto car = ScoreSidecar::from_scores("clip_000007", s, "0123456789abcdef", "2026-01-02T03:04:05Z");
  const auto line = car.to_line();
  const auto back = ScoreSidecar::parse(line);
  CHECK(back == car);
  CHECK(back.aggregate == s.aggregate);
  CHECK(back.to_line() == line);
  CHECK_THROWS(ScoreSidecar::parse("{\"VS\":1}"));
  CHECK_THROWS(ScoreSidecar::parse("not json"));
}

TEST_CASE("timing stats") {
  const std::vector<double> v{3, 1, 2, 10};
  const auto s = timing_stats(v);
  CHECK(s.median == 2.5);
  CHECK(s.mean == 4.0);
  CHECK(s.min == 1);
  CHECK(s.max == 10);
  CHECK(s.stddev == doctest::Approx(std::sqrt(12.5)).epsilon(1e-15));
  CHECK(timer_resolution_ms() > 0);
}

TEST_CASE("latency report on a tiny model") {
  auto c = ModelConfig::reduced({2, 1, 32, 32}, 8);
  QaNetModel model(c, SeededRng(1));
  Tensor<float> clip(c.input.clip_shape());
  const auto r = benchmark_latency(model, clip, kMinWarmup, kMinIterations);
  CHECK(r.iterations == kMinIterations);
  CHECK(r.raw_parallel.size() == kMinIterations);
  for (const auto& s : r.raw_stream) CHECK(s.size() == kMinIterations);
  CHECK(r.combined_parallel.median > 0);
  CHECK(r.sequential_stream_sum() > 0);
  CHECK_THROWS_AS(benchmark_latency(model, clip, kMinWarmup, kMinIterations - 1), std::invalid_argument);
  CHECK_THROWS_AS(benchmark_latency(model, clip, kMinWarmup - 1, kMinIterations), std::invalid_argument);
}
