#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "echoqa/tensor.hpp"

namespace echoqa {

struct Point2 {
  double x = 0;
  double y = 0;
};

struct Point3 {
  double x = 0;
  double y = 0;
  double z = 0;
};

struct RotationSpec {
  Point2 center;
  double beta = 0;  // radians
};

/// Planar rotation of p about spec.center by spec.beta (counter-clockwise for
/// a y-up frame).
Point2 rotate_point(Point2 p, const RotationSpec& spec);

struct ContrastResult {
  double rms = 0;
  double mean_intensity = 0;
};

/// Root-mean-square deviation of intensities around their mean, two-pass.
/// The optional mask has one byte per pixel; nonzero selects the pixel.
ContrastResult rms_contrast(const Tensor<double>& frame);
ContrastResult rms_contrast(const Tensor<double>& frame, std::span<const std::uint8_t> mask);

struct GainProfile {
  std::vector<double> band_means;  // near field first
  std::size_t band_count = 0;
};

/// Mean intensity of band_count horizontal bands of rows; the remainder rows
/// of an uneven split belong to the last band.
GainProfile depth_gain_profile(const Tensor<double>& frame, std::size_t band_count);

struct GainThresholds {
  double low = 0.08;
  double high = 0.85;
};

/// 1 - min(1, penalty) with
///   penalty = excess + dropout + imbalance
///   excess    = fraction of bands above thresholds.high
///   dropout   = fraction of bands below thresholds.low
///   imbalance = |c(first) - c(last)| / ((high - low) * band_count)
/// where c clamps a band mean to [low, high]. The imbalance term changes by at
/// most one band's worth of penalty when a single band moves, so raising a
/// band from mid-range into saturation never raises the score.
double gain_anomaly_score(const GainProfile& profile, const GainThresholds& thresholds = {});

struct PerspectiveSpec {
  double d = 1.0;
};

/// (d x / z, d y / z). Throws std::domain_error when z is zero.
Point2 perspective_project(const Point3& p, const PerspectiveSpec& spec);
/// Inverse of perspective_project for a known depth z.
Point3 perspective_unproject(Point2 q, double z, const PerspectiveSpec& spec);

/// Largest tilt that still counts; anything steeper is fully foreshortened.
inline constexpr double kFullTilt = 1.0471975511965976;  // pi / 3

/// 1 - (1 - apex_truncation) (1 - tau), tau = min(1, tilt / kFullTilt).
/// apex_truncation in [0, 1], tilt in [0, pi / 2]; otherwise std::invalid_argument.
double foreshortening_severity(double apex_truncation, double tilt);

/// Per-frame no-reference metrics.
struct FrameMetrics {
  ContrastResult contrast;
  GainProfile gain;
  double gain_score = 0;
};

FrameMetrics frame_metrics(const Tensor<double>& frame, std::size_t band_count = 8,
                           const GainThresholds& thresholds = {});
/// One JSON object on one line: rms, mean_intensity, band_means, gain_score.
std::string metrics_record(const std::string& id, const FrameMetrics& m);

}  // namespace echoqa
