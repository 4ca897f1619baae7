#include "echoqa/indicators.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "echoqa/text.hpp"

namespace echoqa {

Point2 rotate_point(Point2 p, const RotationSpec& spec) {
  const double c = std::cos(spec.beta), s = std::sin(spec.beta);
  const double dx = p.x - spec.center.x, dy = p.y - spec.center.y;
  return {dx * c - dy * s + spec.center.x, dx * s + dy * c + spec.center.y};
}

namespace {

void check_frame(const Tensor<double>& frame) {
  if (frame.rank() != 2) throw std::invalid_argument("expected a frame of shape [H, W], got " + shape_string(frame.shape()));
}

}  // namespace

ContrastResult rms_contrast(const Tensor<double>& frame) {
  check_frame(frame);
  const std::vector<std::uint8_t> all(frame.size(), 1);
  return rms_contrast(frame, all);
}

ContrastResult rms_contrast(const Tensor<double>& frame, std::span<const std::uint8_t> mask) {
  check_frame(frame);
  if (mask.size() != frame.size()) throw std::invalid_argument("contrast mask must have one entry per pixel");
  // Deviations are taken from the first selected pixel, so a constant
  // region yields exactly zero and the mean is not rounded twice.
  std::size_t first = 0;
  while (first < mask.size() && !mask[first]) ++first;
  if (first == mask.size()) throw std::invalid_argument("contrast region is empty");
  const double ref = frame[first];
  double sum = 0;
  std::size_t count = 0;
  for (std::size_t i = first; i < frame.size(); ++i)
    if (mask[i]) {
      sum += frame[i] - ref;
      ++count;
    }
  const double shift = sum / static_cast<double>(count);
  double sq = 0;
  for (std::size_t i = first; i < frame.size(); ++i)
    if (mask[i]) {
      const double d = (frame[i] - ref) - shift;
      sq += d * d;
    }
  return {std::sqrt(sq / static_cast<double>(count)), ref + shift};
}

GainProfile depth_gain_profile(const Tensor<double>& frame, std::size_t band_count) {
  check_frame(frame);
  const std::size_t h = frame.dim(0), w = frame.dim(1);
  if (band_count < 1 || band_count > h)
    throw std::invalid_argument("band count " + std::to_string(band_count) + " must be in [1, " + std::to_string(h) + "]");
  const std::size_t rows = h / band_count;
  GainProfile profile;
  profile.band_count = band_count;
  for (std::size_t k = 0; k < band_count; ++k) {
    const std::size_t r0 = k * rows, r1 = (k + 1 == band_count) ? h : r0 + rows;
    // Offsets from the band's first pixel keep a constant band exact.
    const double ref = frame[r0 * w];
    double sum = 0;
    for (std::size_t r = r0; r < r1; ++r)
      for (std::size_t c = 0; c < w; ++c) sum += frame[r * w + c] - ref;
    profile.band_means.push_back(ref + sum / static_cast<double>((r1 - r0) * w));
  }
  return profile;
}

double gain_anomaly_score(const GainProfile& profile, const GainThresholds& t) {
  const auto& b = profile.band_means;
  if (b.empty() || b.size() != profile.band_count) throw std::invalid_argument("malformed gain profile");
  if (!(t.low < t.high)) throw std::invalid_argument("gain thresholds must satisfy low < high");
  const double k = static_cast<double>(b.size());
  const auto excess = static_cast<double>(std::count_if(b.begin(), b.end(), [&](double v) { return v > t.high; }));
  const auto dropout = static_cast<double>(std::count_if(b.begin(), b.end(), [&](double v) { return v < t.low; }));
  const double first = std::clamp(b.front(), t.low, t.high), last = std::clamp(b.back(), t.low, t.high);
  const double penalty = excess / k + dropout / k + std::abs(first - last) / ((t.high - t.low) * k);
  return 1.0 - std::min(1.0, penalty);
}

Point2 perspective_project(const Point3& p, const PerspectiveSpec& spec) {
  if (!(spec.d > 0.0)) throw std::invalid_argument("projection distance must be positive");
  if (p.z == 0.0) throw std::domain_error("perspective projection undefined at z = 0");
  // d / z is exactly 1 on the focal plane, which then maps to itself.
  const double scale = spec.d / p.z;
  return {p.x * scale, p.y * scale};
}

Point3 perspective_unproject(Point2 q, double z, const PerspectiveSpec& spec) {
  if (spec.d == 0.0) throw std::domain_error("projection distance must be nonzero");
  return {q.x * z / spec.d, q.y * z / spec.d, z};
}

double foreshortening_severity(double apex_truncation, double tilt) {
  if (!(apex_truncation >= 0.0 && apex_truncation <= 1.0))
    throw std::invalid_argument("apex truncation must be in [0, 1]");
  if (!(tilt >= 0.0 && tilt <= std::numbers::pi / 2)) throw std::invalid_argument("tilt must be in [0, pi/2]");
  const double tau = std::min(1.0, tilt / kFullTilt);
  return 1.0 - (1.0 - apex_truncation) * (1.0 - tau);
}

FrameMetrics frame_metrics(const Tensor<double>& frame, std::size_t band_count, const GainThresholds& thresholds) {
  FrameMetrics m;
  m.contrast = rms_contrast(frame);
  m.gain = depth_gain_profile(frame, band_count);
  m.gain_score = gain_anomaly_score(m.gain, thresholds);
  return m;
}

std::string metrics_record(const std::string& id, const FrameMetrics& m) {
  return JsonLine()
      .field("frame", id)
      .fixed("rms", m.contrast.rms)
      .fixed("mean_intensity", m.contrast.mean_intensity)
      .fixed("band_means", m.gain.band_means)
      .fixed("gain_score", m.gain_score)
      .str();
}

}  // namespace echoqa
