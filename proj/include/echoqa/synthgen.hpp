#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "echoqa/indicators.hpp"
#include "echoqa/rng.hpp"
#include "echoqa/tensor.hpp"

namespace echoqa {

enum class View { a4c, plax };
std::string_view view_name(View v);
View parse_view(std::string_view name);

enum class QualityBand { poor, average, good };
std::string_view band_name(QualityBand b);
QualityBand parse_band(std::string_view name);
/// poor if the best raw score is <= 4.5, average if <= 6.5, good otherwise.
QualityBand quality_band(const std::array<int, 4>& raw);

/// Largest axis misalignment; severity grows linearly with |beta| up to it.
inline constexpr double kMaxRotation = 0.7853981633974483;  // pi / 4

struct SynthParams {
  View view = View::a4c;
  double rotation_beta = 0;    // [-kMaxRotation, kMaxRotation]
  double contrast_level = 1;   // [0, 1], 1 keeps full contrast
  double gain_slope = 0;       // [0, 1], near-to-far attenuation
  double gain_excess = 0;      // [0, 1], near-field over-amplification
  double apex_truncation = 0;  // [0, 1]
  double tilt = 0;             // [0, pi/2]
  std::uint64_t speckle_seed = 0;
  std::size_t frames = 3;
  std::size_t height = 64;
  std::size_t width = 64;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

/// Gain profile implied by the parameters, evaluated at the centers of
/// band_count depth bands:
///   m(y) = clamp(0.45 (1 - 0.9 slope y) + 1.5 excess (1 - y), 0, 1).
/// The renderer multiplies depth y by m(y) / 0.45.
GainProfile analytic_gain_profile(double gain_slope, double gain_excess, std::size_t band_count = 8);

/// Severities in [0, 1] for (visibility, clarity, depth_gain, foreshortening).
std::array<double, 4> attribute_severities(const SynthParams& p);
/// round(9 (1 - severity)).
int raw_score(double severity);

struct AnnotationRecord {
  std::string clip_id;
  View view = View::a4c;
  std::vector<std::string> frames;  // frame file paths, relative to the manifest
  std::array<int, 4> raw{};
  QualityBand band = QualityBand::poor;

  std::array<double, 4> normalized() const;
  bool operator==(const AnnotationRecord&) const = default;
};

/// 8-bit frames, row-major, frame-major.
struct Clip {
  std::size_t frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;

  std::span<const std::uint8_t> frame(std::size_t t) const {
    return {pixels.data() + t * height * width, height * width};
  }
  /// [frames, 1, height, width] with intensities divided by 255.
  Tensor<float> to_tensor() const;
  bool operator==(const Clip&) const = default;
};

struct GeneratedClip {
  Clip clip;
  AnnotationRecord record;
};

/// Renders the phantom and applies the degradations. The rng supplies the
/// cardiac phase; speckle comes from params.speckle_seed.
GeneratedClip generate_clip(const SynthParams& params, SeededRng& rng, std::string clip_id = "clip");

/// Sampling distribution for datasets. A latent quality class is drawn first,
/// then each attribute's severity uniformly from that class's range.
struct SynthDistribution {
  std::array<double, 3> class_weights{1.0, 1.0, 1.0};  // poor, average, good
  std::array<std::array<double, 2>, 3> severity_range{{{0.55, 1.0}, {0.3, 0.7}, {0.0, 0.6}}};
  double plax_fraction = 0.5;
  std::size_t frames = 3;
  std::size_t height = 64;
  std::size_t width = 64;

  void validate() const;
  std::string to_json() const;
  static SynthDistribution from_json(std::string_view text);
};

SynthParams sample_params(const SynthDistribution& dist, SeededRng& rng);

/// Clip i uses rng child i of the dataset seed; ids are "clip_000000"...
std::vector<GeneratedClip> generate_clips(std::size_t n, const SynthDistribution& dist, std::uint64_t seed);

struct DatasetSplit {
  std::vector<AnnotationRecord> train;
  std::vector<AnnotationRecord> test;
};

/// round(n * split) clips for training (at least one clip on each side).
std::size_t train_count(std::size_t n, double split);

/// Writes frames/<clip_id>_<t>.pgm, train.jsonl and test.jsonl under out_dir.
DatasetSplit generate_dataset(std::size_t n, const SynthDistribution& dist, double split, std::uint64_t seed,
                              const std::filesystem::path& out_dir);

// ---- files

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;
};

void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               std::span<const std::uint8_t> pixels);
GrayImage read_pgm(const std::filesystem::path& path);

std::string manifest_line(const AnnotationRecord& r);
/// Parses one manifest line; normalized scores must agree with raw / 9 and
/// the band with the raw scores.
AnnotationRecord parse_manifest_line(std::string_view line);
void write_manifest(const std::filesystem::path& path, const std::vector<AnnotationRecord>& rows);
std::vector<AnnotationRecord> read_manifest(const std::filesystem::path& path);

/// Reads a row's frames (paths relative to base_dir) into [frames, 1, H, W].
Tensor<float> load_clip(const AnnotationRecord& row, const std::filesystem::path& base_dir);

}  // namespace echoqa
