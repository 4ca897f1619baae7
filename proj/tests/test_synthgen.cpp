#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "echoqa/synthgen.hpp"

using namespace echoqa;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "echoqa_test_synth" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Tensor<double> frame_tensor(const Clip& c, std::size_t t) {
  Tensor<double> f({c.height, c.width});
  const auto px = c.frame(t);
  for (std::size_t i = 0; i < px.size(); ++i) f[i] = px[i] / 255.0;
  return f;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("raw scores and quality bands") {
  CHECK(raw_score(0.0) == 9);
  CHECK(raw_score(1.0) == 0);
  CHECK(raw_score(0.5) == 5);
  CHECK_THROWS_AS(raw_score(1.5), std::invalid_argument);
  CHECK(quality_band({4, 4, 3, 0}) == QualityBand::poor);
  CHECK(quality_band({5, 0, 0, 0}) == QualityBand::average);
  CHECK(quality_band({6, 6, 6, 6}) == QualityBand::average);
  CHECK(quality_band({7, 0, 0, 0}) == QualityBand::good);
}

TEST_CASE("severities follow the parameters") {
  SynthParams p;
  CHECK(attribute_severities(p) == std::array<double, 4>{0, 0, 0, 0});
  p.rotation_beta = -kMaxRotation / 2;
  p.contrast_level = 0.25;
  p.apex_truncation = 1;
  const auto s = attribute_severities(p);
  CHECK(s[0] == 0.5);
  CHECK(s[1] == 0.75);
  CHECK(s[3] == 1.0);
}

TEST_CASE("parameter validation names the field") {
  SynthParams p;
  p.contrast_level = 2;
  CHECK_THROWS_WITH_AS(p.validate(), doctest::Contains("contrast_level"), std::invalid_argument);
  p = {};
  p.tilt = -0.1;
  CHECK_THROWS_WITH_AS(p.validate(), doctest::Contains("tilt"), std::invalid_argument);
  p = {};
  p.height = 4;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
}

TEST_CASE("clip generation is deterministic") {
  SynthDistribution dist;
  const auto a = generate_clips(6, dist, 11), b = generate_clips(6, dist, 11), c = generate_clips(6, dist, 12);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(a[i].clip == b[i].clip);
    CHECK(a[i].record == b[i].record);
  }
  CHECK(a[0].clip != c[0].clip);
  CHECK(a[3].record.clip_id == "clip_000003");
  CHECK(a[0].clip.pixels.size() == 3u * 64 * 64);
}

TEST_CASE("lower contrast level gives lower measured contrast") {
  SynthParams p;
  p.speckle_seed = 5;
  double previous = 2.0;
  for (double level : {1.0, 0.8, 0.6, 0.4, 0.2, 0.0}) {
    p.contrast_level = level;
    SeededRng rng(3);
    const auto g = generate_clip(p, rng);
    const double rms = rms_contrast(frame_tensor(g.clip, 0)).rms;
    CHECK(rms < previous);
    previous = rms;
  }
}

TEST_CASE("excess gain brightens the near field and lowers the gain score") {
  SynthParams p;
  p.speckle_seed = 6;
  double near_previous = -1, score_previous = 2;
  for (double excess : {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}) {
    p.gain_excess = excess;
    SeededRng rng(3);
    const auto g = generate_clip(p, rng);
    const double near = depth_gain_profile(frame_tensor(g.clip, 0), 8).band_means[1];
    const double score = gain_anomaly_score(analytic_gain_profile(p.gain_slope, excess));
    CHECK(near > near_previous);
    CHECK(score <= score_previous);
    near_previous = near;
    score_previous = score;
  }
  CHECK(score_previous < 0.5);
}

TEST_CASE("default distribution covers every quality band") {
  const auto clips = generate_clips(400, SynthDistribution{}, 7);
  std::array<std::size_t, 3> bands{};
  std::array<std::set<int>, 4> raws;
  for (const auto& c : clips) {
    ++bands[static_cast<std::size_t>(c.record.band)];
    for (std::size_t a = 0; a < 4; ++a) raws[a].insert(c.record.raw[a]);
  }
  for (auto b : bands) CHECK(b >= 20);
  for (const auto& r : raws) CHECK(r.size() >= 7);
}

TEST_CASE("distribution json round trips and validates") {
  SynthDistribution d;
  d.plax_fraction = 0.25;
  d.frames = 4;
  const auto back = SynthDistribution::from_json(d.to_json());
  CHECK(back.to_json() == d.to_json());
  d.severity_range[0] = {0.8, 0.2};
  CHECK_THROWS_AS(d.validate(), std::invalid_argument);
}

TEST_CASE("pgm round trip") {
  const auto dir = scratch_dir("pgm");
  std::vector<std::uint8_t> px(5 * 3);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<std::uint8_t>(i * 17);
  write_pgm(dir / "a.pgm", 5, 3, px);
  const auto img = read_pgm(dir / "a.pgm");
  CHECK(img.width == 5);
  CHECK(img.height == 3);
  CHECK(img.pixels == px);
  std::ofstream(dir / "bad.pgm") << "P2\n1 1\n255\n0";
  CHECK_THROWS(read_pgm(dir / "bad.pgm"));
  CHECK_THROWS(read_pgm(dir / "missing.pgm"));
}

TEST_CASE("manifest round trip and error reporting") {
  const auto dir = scratch_dir("manifest");
  const auto clips = generate_clips(5, SynthDistribution{}, 3);
  std::vector<AnnotationRecord> rows;
  for (const auto& c : clips) rows.push_back(c.record);
  write_manifest(dir / "m.jsonl", rows);
  CHECK(read_manifest(dir / "m.jsonl") == rows);
  write_manifest(dir / "m2.jsonl", read_manifest(dir / "m.jsonl"));
  CHECK(slurp(dir / "m.jsonl") == slurp(dir / "m2.jsonl"));

  std::string bad = slurp(dir / "m.jsonl");
  const auto pos = bad.find("\"raw\":[", bad.find('\n'));
  bad[pos + 7] = bad[pos + 7] == '9' ? '8' : '9';
  std::ofstream(dir / "bad.jsonl", std::ios::binary) << bad;
  CHECK_THROWS_WITH(read_manifest(dir / "bad.jsonl"), doctest::Contains("bad.jsonl:2:"));
}

TEST_CASE("dataset split writes disjoint sorted manifests") {
  const auto dir = scratch_dir("dataset");
  const auto split = generate_dataset(10, SynthDistribution{}, 0.8, 4, dir);
  CHECK(split.train.size() == 8);
  CHECK(split.test.size() == 2);
  std::set<std::string> ids;
  for (const auto* side : {&split.train, &split.test})
    for (const auto& r : *side) {
      ids.insert(r.clip_id);
      for (const auto& f : r.frames) CHECK(fs::exists(dir / f));
    }
  CHECK(ids.size() == 10);
  CHECK(read_manifest(dir / "train.jsonl") == split.train);
  CHECK(std::is_sorted(split.train.begin(), split.train.end(),
                       [](const auto& a, const auto& b) { return a.clip_id < b.clip_id; }));
  const auto clip = load_clip(split.test[0], dir);
  const auto regenerated = generate_clips(10, SynthDistribution{}, 4);
  for (const auto& g : regenerated)
    if (g.record.clip_id == split.test[0].clip_id) CHECK(g.clip.to_tensor() == clip);

  CHECK(train_count(10, 0.8) == 8);
  CHECK(train_count(3, 0.99) == 2);
  CHECK(train_count(3, 0.01) == 1);
  CHECK_THROWS_AS(train_count(3, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(generate_dataset(1, SynthDistribution{}, 0.8, 4, dir), std::invalid_argument);
}
