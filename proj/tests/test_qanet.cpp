#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "echoqa/qanet.hpp"
#include "support.hpp"

using namespace echoqa;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "echoqa_test_qanet";
  fs::create_directories(dir);
  return dir / name;
}

Tensor<float> random_clip(const InputSpec& in, SeededRng& rng) {
  Tensor<float> t(in.clip_shape());
  for (auto& v : t.values()) v = static_cast<float>(rng.uniform());
  return t;
}

}  // namespace

TEST_CASE("size chain at 224 and 64") {
  const auto vis = size_chain(StreamConfig::standard(Attribute::visibility), {3, 1, 224, 224});
  REQUIRE(vis.size() == 4);
  CHECK(vis[0].conv_h == 222);
  CHECK(vis[0].out_h == 111);
  CHECK(vis[1].conv_h == 109);
  CHECK(vis[1].out_h == 54);
  CHECK(vis[2].out_h == 52);
  CHECK(vis[3].conv_h == 50);
  CHECK(vis[3].out_h == 25);
  CHECK(flatten_size(StreamConfig::standard(Attribute::visibility), {3, 1, 224, 224}) == 64u * 25 * 25);

  const auto cl = size_chain(StreamConfig::standard(Attribute::clarity), {3, 1, 64, 64});
  REQUIRE(cl.size() == 3);
  CHECK(cl[0].out_h == 31);
  CHECK(cl[1].out_h == 29);
  CHECK(cl[2].conv_h == 27);
  CHECK(cl[2].out_h == 13);
  CHECK_THROWS_AS(size_chain(StreamConfig::standard(Attribute::visibility), {3, 1, 12, 12}), std::invalid_argument);
}

TEST_CASE("narrowed configs keep at least one channel") {
  const auto s = StreamConfig::standard(Attribute::visibility).narrowed(4);
  CHECK(s.conv_channels == std::vector<std::size_t>{8, 8, 8, 16});
  CHECK(StreamConfig::standard(Attribute::visibility).narrowed(1000).conv_channels ==
        std::vector<std::size_t>{1, 1, 1, 1});
  CHECK_THROWS_AS(StreamConfig::standard(Attribute::visibility).narrowed(0), std::invalid_argument);
}

TEST_CASE("model config json round trips") {
  auto c = ModelConfig::reduced({3, 1, 64, 64}, 4);
  c.zero_head = true;
  const auto back = ModelConfig::from_json(c.to_json());
  CHECK(back == c);
  CHECK(back.to_json() == c.to_json());
  CHECK_THROWS(ModelConfig::from_json("{}"));
}

TEST_CASE("zero head scores exactly one half") {
  auto c = ModelConfig::reduced({2, 1, 32, 32}, 8);
  c.zero_head = true;
  QaNetModel model(c, SeededRng(1));
  SeededRng rng(2);
  const auto s = model.forward_clip(random_clip(c.input, rng));
  for (double v : s.attributes()) CHECK(v == 0.5);
  CHECK(s.aggregate == 0.5);
}

TEST_CASE("batch, single and sequential inference agree") {
  const auto c = ModelConfig::reduced({2, 1, 32, 32}, 8);
  QaNetModel model(c, SeededRng(3));
  SeededRng rng(4);
  std::vector<Tensor<float>> clips;
  for (int i = 0; i < 3; ++i) clips.push_back(random_clip(c.input, rng));
  const auto batch = model.forward_batch(clips);
  Tensor<float> stacked({3, 2, 1, 32, 32});
  for (std::size_t i = 0; i < 3; ++i) std::copy_n(clips[i].data(), clips[i].size(), stacked.data() + i * clips[i].size());
  const auto scores = model.infer_batch(stacked);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto one = model.forward_clip(clips[i]);
    const auto seq = model.forward_clip(clips[i], false);
    CHECK(one.attributes() == batch[i].attributes());
    CHECK(one.attributes() == seq.attributes());
    for (std::size_t a = 0; a < 4; ++a) CHECK(scores[i * 4 + a] == static_cast<float>(one.attributes()[a]));
    double mean = 0;
    for (double v : one.attributes()) mean += 0.25 * v;
    CHECK(one.aggregate == doctest::Approx(mean).epsilon(1e-15));
  }
  CHECK_THROWS_AS(model.forward_clip(Tensor<float>({2, 1, 30, 32})), std::invalid_argument);
}

TEST_CASE("streams are independent") {
  const auto c = ModelConfig::reduced({2, 1, 32, 32}, 8);
  QaNetModel model(c, SeededRng(5));
  SeededRng rng(6);
  const auto clip = random_clip(c.input, rng);
  const auto before = model.forward_clip(clip);
  for (auto* p : model.stream(Attribute::clarity).parameters()) p->value.fill(0.25f);
  const auto after = model.forward_clip(clip);
  CHECK(after.visibility == before.visibility);
  CHECK(after.depth_gain == before.depth_gain);
  CHECK(after.foreshortening == before.foreshortening);
  CHECK(after.clarity != before.clarity);
}

TEST_CASE("feature map of a delta kernel reproduces the input") {
  auto c = ModelConfig::reduced({1, 1, 32, 32}, 32);
  QaNetModel model(c, SeededRng(7));
  auto& conv = model.stream(Attribute::visibility).conv(0);
  conv.kernels().value.fill(0.0f);
  conv.bias().value.fill(0.0f);
  conv.kernels().value.at({0, 0, 1, 1}) = 1.0f;
  SeededRng rng(8);
  const auto clip = random_clip(c.input, rng);
  const auto map = model.dump_feature_map(clip, Attribute::visibility, 0);
  // Fresh batchnorm running stats are the identity up to epsilon.
  const float scale = 1.0f / std::sqrt(1.0f + 1e-5f);
  REQUIRE(map.shape() == Shape{1, 1, 30, 30});
  for (std::size_t y = 0; y < 30; ++y)
    for (std::size_t x = 0; x < 30; ++x)
      CHECK(map.at({0, 0, y, x}) == doctest::Approx(clip.at({0, 0, y + 1, x + 1}) * scale).epsilon(1e-6));
  CHECK_THROWS_AS(model.dump_feature_map(clip, Attribute::visibility, 9), std::out_of_range);
}

TEST_CASE("checkpoint round trip is exact") {
  const auto c = ModelConfig::reduced({2, 1, 32, 32}, 8);
  QaNetModel model(c, SeededRng(9));
  // Make the running stats non-trivial.
  SeededRng rng(10);
  Tensor<float> batch({4, 2, 1, 32, 32});
  for (auto& v : batch.values()) v = static_cast<float>(rng.uniform());
  SeededRng drop(11);
  model.stream(Attribute::visibility).forward(batch, Mode::train, drop);

  const auto a = scratch("a.ckpt"), b = scratch("b.ckpt");
  save_checkpoint(model, a);
  const auto loaded = load_checkpoint(a);
  CHECK(loaded.config() == c);
  save_checkpoint(loaded, b);
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
  CHECK(sa == sb);
  CHECK(checkpoint_id(a) == checkpoint_id(b));
  CHECK(checkpoint_id(a).size() == 16);
  const auto clip = batch.reshaped({4 * 2 * 32 * 32}).storage();
  Tensor<float> one({2, 1, 32, 32}, std::vector<float>(clip.begin(), clip.begin() + 2 * 32 * 32));
  CHECK(model.forward_clip(one).attributes() == loaded.forward_clip(one).attributes());

  std::ofstream(scratch("bad.ckpt"), std::ios::binary) << sa.substr(0, sa.size() / 2);
  CHECK_THROWS(load_checkpoint(scratch("bad.ckpt")));
  std::ofstream(scratch("trail.ckpt"), std::ios::binary) << sa << "x";
  CHECK_THROWS(load_checkpoint(scratch("trail.ckpt")));
  std::ofstream(scratch("magic.ckpt"), std::ios::binary) << "NOTACKPT" << sa.substr(8);
  CHECK_THROWS(load_checkpoint(scratch("magic.ckpt")));
  CHECK_THROWS(load_checkpoint(scratch("missing.ckpt")));
}
