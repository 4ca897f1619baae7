#include "echoqa/synthgen.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "echoqa/text.hpp"

namespace echoqa {

namespace {

constexpr double kMidIntensity = 0.45;
constexpr double kSlopeDepth = 0.9;
constexpr double kExcessBoost = 1.5;
constexpr std::size_t kGainBands = 8;

// Phantom geometry, normalized image coordinates with depth growing downwards.
constexpr Point2 kApex{0.5, 0.02};
constexpr double kSectorRadius = 0.95;
constexpr double kSectorHalfAngle = 0.6981317007977318;  // 40 degrees
constexpr double kProjectionDistance = 4.0;
constexpr double kTruncationDepth = 0.3;
constexpr double kSpeckleSigma = 0.15;

struct Ellipse {
  double cx, cy, ax, ay;
  double systolic_shrink;  // fraction the axes lose at peak contraction
};

struct Template {
  std::vector<Ellipse> chambers;
  // Bright bands: vertical septum for A4C, horizontal pericardium for PLAX.
  double septum_x;
  double septum_y0, septum_y1;
  double pericardium_y;
};

const Template& view_template(View v) {
  static const Template a4c{{{0.60, 0.36, 0.11, 0.22, 0.12},
                             {0.38, 0.38, 0.09, 0.19, 0.10},
                             {0.60, 0.72, 0.10, 0.09, -0.08},
                             {0.38, 0.72, 0.09, 0.09, -0.08}},
                            0.49,
                            0.15,
                            0.82,
                            0.90};
  static const Template plax{{{0.50, 0.24, 0.26, 0.055, 0.06},
                              {0.45, 0.50, 0.25, 0.10, 0.14},
                              {0.74, 0.47, 0.07, 0.06, 0.0},
                              {0.72, 0.72, 0.10, 0.08, -0.08}},
                             -1.0,
                             0.0,
                             0.0,
                             0.84};
  return v == View::a4c ? a4c : plax;
}

double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3 - 2 * t);
}

// Intensity of the undistorted phantom at (u, v); 0 outside the sector.
double phantom(const Template& tpl, double u, double v, double phase) {
  const double dx = u - kApex.x, dy = v - kApex.y;
  const double r = std::hypot(dx, dy);
  if (dy <= 0 || r > kSectorRadius || std::atan2(std::abs(dx), dy) > kSectorHalfAngle) return 0.0;
  double value = kMidIntensity + 0.06 * std::sin(17.0 * u + 3.0 * v) * std::cos(11.0 * v - 5.0 * u);
  const double contraction = std::sin(phase) * std::sin(phase);
  double blood = 0.0;
  for (const auto& e : tpl.chambers) {
    const double k = 1.0 - e.systolic_shrink * contraction;
    const double q = std::hypot((u - e.cx) / (e.ax * k), (v - e.cy) / (e.ay * k));
    value += 0.25 * std::exp(-40.0 * (q - 1.1) * (q - 1.1));  // bright wall
    blood = std::max(blood, 1.0 - smoothstep(0.85, 1.0, q));
  }
  if (tpl.septum_x > 0 && v > tpl.septum_y0 && v < tpl.septum_y1)
    value += 0.3 * std::exp(-std::pow((u - tpl.septum_x) / 0.02, 2));
  value += 0.35 * std::exp(-std::pow((v - tpl.pericardium_y) / 0.02, 2));
  value = value * (1.0 - blood) + 0.05 * blood;
  return std::clamp(value, 0.0, 1.0);
}

bool in_range(double v, double lo, double hi) { return v >= lo && v <= hi; }

}  // namespace

std::string_view view_name(View v) { return v == View::a4c ? "A4C" : "PLAX"; }

View parse_view(std::string_view name) {
  if (name == "A4C") return View::a4c;
  if (name == "PLAX") return View::plax;
  throw std::invalid_argument("unknown view '" + std::string(name) + "'");
}

std::string_view band_name(QualityBand b) {
  switch (b) {
    case QualityBand::poor: return "poor";
    case QualityBand::average: return "average";
    case QualityBand::good: return "good";
  }
  throw std::invalid_argument("bad quality band");
}

QualityBand parse_band(std::string_view name) {
  for (auto b : {QualityBand::poor, QualityBand::average, QualityBand::good})
    if (band_name(b) == name) return b;
  throw std::invalid_argument("unknown quality band '" + std::string(name) + "'");
}

QualityBand quality_band(const std::array<int, 4>& raw) {
  const int best = *std::max_element(raw.begin(), raw.end());
  if (best <= 4.5) return QualityBand::poor;
  if (best <= 6.5) return QualityBand::average;
  return QualityBand::good;
}

void SynthParams::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("synth parameter out of range: " + what); };
  if (!in_range(rotation_beta, -kMaxRotation, kMaxRotation)) fail("rotation_beta");
  if (!in_range(contrast_level, 0, 1)) fail("contrast_level");
  if (!in_range(gain_slope, 0, 1)) fail("gain_slope");
  if (!in_range(gain_excess, 0, 1)) fail("gain_excess");
  if (!in_range(apex_truncation, 0, 1)) fail("apex_truncation");
  if (!in_range(tilt, 0, std::numbers::pi / 2)) fail("tilt");
  if (frames < 1) fail("frames");
  if (height < 8 || width < 8) fail("frame size");
}

GainProfile analytic_gain_profile(double gain_slope, double gain_excess, std::size_t band_count) {
  if (band_count < 1) throw std::invalid_argument("band count must be positive");
  GainProfile p;
  p.band_count = band_count;
  for (std::size_t k = 0; k < band_count; ++k) {
    const double y = (static_cast<double>(k) + 0.5) / static_cast<double>(band_count);
    const double m = kMidIntensity * (1 - kSlopeDepth * gain_slope * y) + kExcessBoost * gain_excess * (1 - y);
    p.band_means.push_back(std::clamp(m, 0.0, 1.0));
  }
  return p;
}

std::array<double, 4> attribute_severities(const SynthParams& p) {
  p.validate();
  return {std::abs(p.rotation_beta) / kMaxRotation, 1.0 - p.contrast_level,
          1.0 - gain_anomaly_score(analytic_gain_profile(p.gain_slope, p.gain_excess, kGainBands)),
          foreshortening_severity(p.apex_truncation, p.tilt)};
}

int raw_score(double severity) {
  if (!in_range(severity, 0, 1)) throw std::invalid_argument("severity must be in [0, 1]");
  return static_cast<int>(std::lround(9.0 * (1.0 - severity)));
}

std::array<double, 4> AnnotationRecord::normalized() const {
  return {raw[0] / 9.0, raw[1] / 9.0, raw[2] / 9.0, raw[3] / 9.0};
}

Tensor<float> Clip::to_tensor() const {
  Tensor<float> t({frames, 1, height, width});
  for (std::size_t i = 0; i < pixels.size(); ++i) t[i] = static_cast<float>(pixels[i] / 255.0);
  return t;
}

GeneratedClip generate_clip(const SynthParams& p, SeededRng& rng, std::string clip_id) {
  p.validate();
  const Template& tpl = view_template(p.view);
  const std::size_t h = p.height, w = p.width, plane = h * w;
  const double phase0 = rng.uniform(0.0, std::numbers::pi);
  const double cos_t = std::cos(p.tilt), sin_t = std::sin(p.tilt);
  const PerspectiveSpec persp{kProjectionDistance};
  const RotationSpec undo_rotation{kApex, -p.rotation_beta};
  SeededRng speckle(p.speckle_seed);

  GeneratedClip out;
  out.clip = {p.frames, h, w, std::vector<std::uint8_t>(p.frames * plane)};
  std::vector<double> img(plane);
  for (std::size_t t = 0; t < p.frames; ++t) {
    const double phase = phase0 + std::numbers::pi * static_cast<double>(t) / 4.0;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const Point2 screen{(static_cast<double>(x) + 0.5) / static_cast<double>(w),
                            (static_cast<double>(y) + 0.5) / static_cast<double>(h)};
        const Point2 r = rotate_point(screen, undo_rotation);
        // The scan plane is tilted away from the probe: a point at plane depth
        // Y sits at z = d + Y sin(tilt) and projects to depth d Y cos(tilt) / z.
        const double depth = r.y - kApex.y;
        const double denom = kProjectionDistance * cos_t - depth * sin_t;
        double value = 0.0;
        if (denom > 0) {
          const double plane_depth = depth * kProjectionDistance / denom;
          const double z = kProjectionDistance + plane_depth * sin_t;
          const Point3 q = perspective_unproject({r.x - kApex.x, depth}, z, persp);
          value = phantom(tpl, q.x + kApex.x, plane_depth + kApex.y + kTruncationDepth * p.apex_truncation, phase);
        }
        img[y * w + x] = value;
      }
    double mean = 0;
    for (double v : img) mean += v;
    mean /= static_cast<double>(plane);
    const double boost = kExcessBoost * p.gain_excess / kMidIntensity;
    for (std::size_t y = 0; y < h; ++y) {
      const double depth = (static_cast<double>(y) + 0.5) / static_cast<double>(h);
      const double gain = (1 - kSlopeDepth * p.gain_slope * depth) + boost * (1 - depth);
      for (std::size_t x = 0; x < w; ++x) {
        double v = img[y * w + x];
        v = mean + p.contrast_level * (v - mean);
        v = std::clamp(v * gain, 0.0, 1.0);
        v = std::clamp(v * (1.0 + kSpeckleSigma * speckle.normal()), 0.0, 1.0);
        out.clip.pixels[t * plane + y * w + x] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  }

  auto& rec = out.record;
  rec.clip_id = std::move(clip_id);
  rec.view = p.view;
  const auto sev = attribute_severities(p);
  for (std::size_t a = 0; a < 4; ++a) rec.raw[a] = raw_score(sev[a]);
  rec.band = quality_band(rec.raw);
  for (std::size_t t = 0; t < p.frames; ++t)
    rec.frames.push_back("frames/" + rec.clip_id + "_" + std::to_string(t) + ".pgm");
  return out;
}

// ---------------------------------------------------------------- datasets

void SynthDistribution::validate() const {
  double total = 0;
  for (double wgt : class_weights) {
    if (!(wgt >= 0)) throw std::invalid_argument("class weights must be non-negative");
    total += wgt;
  }
  if (!(total > 0)) throw std::invalid_argument("class weights must not all be zero");
  for (const auto& r : severity_range)
    if (!(0 <= r[0] && r[0] <= r[1] && r[1] <= 1)) throw std::invalid_argument("severity ranges must lie in [0, 1]");
  if (!in_range(plax_fraction, 0, 1)) throw std::invalid_argument("plax fraction must be in [0, 1]");
  if (frames < 1 || height < 8 || width < 8) throw std::invalid_argument("bad clip geometry");
}

std::string SynthDistribution::to_json() const {
  nlohmann::ordered_json j;
  j["class_weights"] = class_weights;
  j["severity_range"] = severity_range;
  j["plax_fraction"] = plax_fraction;
  j["frames"] = frames;
  j["height"] = height;
  j["width"] = width;
  return j.dump();
}

SynthDistribution SynthDistribution::from_json(std::string_view text) {
  const auto j = nlohmann::json::parse(text);
  SynthDistribution d;
  if (j.contains("class_weights")) d.class_weights = j["class_weights"].get<std::array<double, 3>>();
  if (j.contains("severity_range")) d.severity_range = j["severity_range"].get<std::array<std::array<double, 2>, 3>>();
  if (j.contains("plax_fraction")) d.plax_fraction = j["plax_fraction"].get<double>();
  if (j.contains("frames")) d.frames = j["frames"].get<std::size_t>();
  if (j.contains("height")) d.height = j["height"].get<std::size_t>();
  if (j.contains("width")) d.width = j["width"].get<std::size_t>();
  d.validate();
  return d;
}

SynthParams sample_params(const SynthDistribution& dist, SeededRng& rng) {
  dist.validate();
  const double total = dist.class_weights[0] + dist.class_weights[1] + dist.class_weights[2];
  double pick = rng.uniform() * total;
  std::size_t cls = 0;
  while (cls < 2 && pick >= dist.class_weights[cls]) pick -= dist.class_weights[cls++];
  const auto [lo, hi] = dist.severity_range[cls];
  auto severity = [&] { return rng.uniform(lo, hi); };

  SynthParams p;
  p.frames = dist.frames;
  p.height = dist.height;
  p.width = dist.width;
  p.view = rng.bernoulli(dist.plax_fraction) ? View::plax : View::a4c;

  const double sv = severity();
  p.rotation_beta = (rng.bernoulli(0.5) ? 1.0 : -1.0) * sv * kMaxRotation;
  p.contrast_level = 1.0 - severity();

  // Depth gain: random slope, then the excess on a 0.01 grid whose score
  // lands closest to the drawn severity.
  const double sg = severity();
  p.gain_slope = rng.uniform();
  double best = 2.0;
  for (int i = 0; i <= 100; ++i) {
    const double e = i / 100.0;
    const double err = std::abs(1.0 - gain_anomaly_score(analytic_gain_profile(p.gain_slope, e, kGainBands)) - sg);
    if (err < best) {
      best = err;
      p.gain_excess = e;
    }
  }

  // Foreshortening: split the severity between truncation and tilt so that
  // (1 - a)(1 - tau) = 1 - s.
  const double sf = severity();
  const double share = rng.uniform();
  p.apex_truncation = 1.0 - std::pow(1.0 - sf, share);
  p.tilt = (1.0 - std::pow(1.0 - sf, 1.0 - share)) * kFullTilt;

  p.speckle_seed = rng.next_u64();
  return p;
}

std::vector<GeneratedClip> generate_clips(std::size_t n, const SynthDistribution& dist, std::uint64_t seed) {
  dist.validate();
  const SeededRng root(seed);
  std::vector<GeneratedClip> clips(n);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) {
    SeededRng rng = root.child(i);
    const SynthParams params = sample_params(dist, rng);
    char id[32];
    std::snprintf(id, sizeof id, "clip_%06zu", i);
    clips[i] = generate_clip(params, rng, id);
  }
  return clips;
}

std::size_t train_count(std::size_t n, double split) {
  if (n < 2) throw std::invalid_argument("need at least 2 clips to split into train and test");
  if (!(split > 0 && split < 1)) throw std::invalid_argument("split must be in (0, 1)");
  const auto k = static_cast<std::size_t>(std::llround(static_cast<double>(n) * split));
  return std::clamp<std::size_t>(k, 1, n - 1);
}

DatasetSplit generate_dataset(std::size_t n, const SynthDistribution& dist, double split, std::uint64_t seed,
                              const std::filesystem::path& out_dir) {
  const std::size_t n_train = train_count(n, split);
  auto clips = generate_clips(n, dist, seed);

  std::error_code ec;
  std::filesystem::create_directories(out_dir / "frames", ec);
  if (ec) throw std::runtime_error("cannot create " + (out_dir / "frames").string() + ": " + ec.message());
  for (const auto& g : clips)
    for (std::size_t t = 0; t < g.clip.frames; ++t)
      write_pgm(out_dir / g.record.frames[t], g.clip.width, g.clip.height, g.clip.frame(t));

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  SeededRng(seed).child(n).shuffle(std::span(order));
  std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::sort(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());

  DatasetSplit split_out;
  for (std::size_t i = 0; i < n; ++i)
    (i < n_train ? split_out.train : split_out.test).push_back(clips[order[i]].record);
  write_manifest(out_dir / "train.jsonl", split_out.train);
  write_manifest(out_dir / "test.jsonl", split_out.test);
  return split_out;
}

// ---------------------------------------------------------------- files

void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               std::span<const std::uint8_t> pixels) {
  if (pixels.size() != width * height) throw std::invalid_argument("PGM pixel count does not match its size");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open frame " + path.string());
  auto token = [&]() {
    std::string tok;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        if (!tok.empty()) return tok;
      } else {
        tok += c;
      }
    }
    return tok;
  };
  auto number = [&](const char* what) {
    const std::string tok = token();
    std::size_t v = 0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc{} || ptr != tok.data() + tok.size() || tok.empty())
      throw std::runtime_error("bad PGM " + std::string(what) + " in " + path.string());
    return v;
  };
  if (token() != "P5") throw std::runtime_error("not a binary PGM: " + path.string());
  GrayImage img;
  img.width = number("width");
  img.height = number("height");
  if (number("maxval") != 255) throw std::runtime_error("only 8-bit PGM is supported: " + path.string());
  if (img.width == 0 || img.height == 0 || img.width * img.height > (1u << 26))
    throw std::runtime_error("bad PGM size in " + path.string());
  img.pixels.resize(img.width * img.height);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!in) throw std::runtime_error("truncated PGM " + path.string());
  return img;
}

std::string manifest_line(const AnnotationRecord& r) {
  const auto norm = r.normalized();
  return JsonLine()
      .field("clip_id", r.clip_id)
      .field("view", view_name(r.view))
      .strings("frames", r.frames)
      .integers("raw", r.raw)
      .fixed("normalized", norm)
      .field("band", band_name(r.band))
      .str();
}

AnnotationRecord parse_manifest_line(std::string_view line) {
  const auto j = nlohmann::json::parse(line);
  AnnotationRecord r;
  r.clip_id = j.at("clip_id").get<std::string>();
  r.view = parse_view(j.at("view").get<std::string>());
  r.frames = j.at("frames").get<std::vector<std::string>>();
  if (r.frames.empty()) throw std::invalid_argument("manifest row " + r.clip_id + " lists no frames");
  r.raw = j.at("raw").get<std::array<int, 4>>();
  for (int v : r.raw)
    if (v < 0 || v > 9) throw std::invalid_argument("manifest row " + r.clip_id + " has a raw score outside 0-9");
  const auto norm = j.at("normalized").get<std::array<double, 4>>();
  const auto expect = r.normalized();
  for (std::size_t a = 0; a < 4; ++a)
    if (std::abs(norm[a] - expect[a]) > 1e-6)
      throw std::invalid_argument("manifest row " + r.clip_id + ": normalized score differs from raw / 9");
  r.band = parse_band(j.at("band").get<std::string>());
  if (r.band != quality_band(r.raw))
    throw std::invalid_argument("manifest row " + r.clip_id + ": band does not match raw scores");
  return r;
}

void write_manifest(const std::filesystem::path& path, const std::vector<AnnotationRecord>& rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  for (const auto& r : rows) out << manifest_line(r) << '\n';
  if (!out) throw std::runtime_error("failed writing manifest " + path.string());
}

std::vector<AnnotationRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  std::vector<AnnotationRecord> rows;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    try {
      rows.push_back(parse_manifest_line(line));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return rows;
}

Tensor<float> load_clip(const AnnotationRecord& row, const std::filesystem::path& base_dir) {
  Clip clip;
  clip.frames = row.frames.size();
  for (std::size_t t = 0; t < row.frames.size(); ++t) {
    const GrayImage img = read_pgm(base_dir / row.frames[t]);
    if (t == 0) {
      clip.height = img.height;
      clip.width = img.width;
    } else if (img.height != clip.height || img.width != clip.width) {
      throw std::runtime_error("clip " + row.clip_id + " has frames of different sizes");
    }
    clip.pixels.insert(clip.pixels.end(), img.pixels.begin(), img.pixels.end());
  }
  return clip.to_tensor();
}

}  // namespace echoqa
