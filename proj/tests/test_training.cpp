#include <cmath>
#include <set>

#include "doctest.h"
#include "echoqa/training.hpp"

using namespace echoqa;

namespace {

std::vector<TrainingSample> small_set(std::size_t n, std::size_t size, std::uint64_t seed) {
  SynthDistribution dist;
  dist.height = dist.width = size;
  dist.frames = 2;
  return to_samples(generate_clips(n, dist, seed));
}

ModelConfig small_model(std::size_t size) { return ModelConfig::reduced({2, 1, size, size}, 8); }

}  // namespace

TEST_CASE("mae loss") {
  Tensor<double> p({2, 4}, {0, 0, 0, 0, 1, 1, 1, 1}), t({2, 4}, {0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5});
  CHECK(mae_loss(p, t) == 0.5);
  CHECK(mae_loss(t, t) == 0.0);
  CHECK_THROWS_AS(mae_loss(Tensor<double>({2, 3}), Tensor<double>({2, 3})), std::invalid_argument);
  CHECK_THROWS_AS(mae_loss(std::vector<QualityScores>{}, {}), std::invalid_argument);
}

TEST_CASE("learning rate schedule") {
  OptimizerConfig c;
  CHECK(c.rate(0) == 0.002);
  CHECK(c.rate(23) == 0.002);
  CHECK(c.rate(24) == doctest::Approx(0.0002).epsilon(1e-15));
  CHECK(c.rate(48) == doctest::Approx(0.00002).epsilon(1e-15));
  c.momentum = 1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("sgd momentum update") {
  Parameter<double> p("w", Tensor<double>({2}, {1.0, -1.0}));
  SgdMomentum<double> opt({0.1, 0.9, 0.1, 24});
  p.grad = Tensor<double>({2}, {1.0, 2.0});
  opt.step({&p}, 0);
  CHECK(p.value[0] == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(p.value[1] == doctest::Approx(-1.2).epsilon(1e-15));
  opt.step({&p}, 0);
  // v = 0.9 * (-0.1) - 0.1 = -0.19
  CHECK(p.value[0] == doctest::Approx(0.71).epsilon(1e-15));
  opt.step({&p}, 24);
  // v = 0.9 * (-0.19) - 0.01 = -0.181
  CHECK(p.value[0] == doctest::Approx(0.529).epsilon(1e-14));
}

TEST_CASE("zero momentum reproduces plain gradient descent") {
  SeededRng rng(8);
  Parameter<float> p("w", randn<float>({7, 5}, rng));
  SgdMomentum<float> opt({0.05, 0.0, 0.1, 2});
  Tensor<float> expected = p.value;
  for (std::size_t epoch = 0; epoch < 5; ++epoch) {
    p.grad = randn<float>({7, 5}, rng);
    const auto lr = static_cast<float>(opt.config().rate(epoch));
    for (std::size_t i = 0; i < expected.size(); ++i) expected[i] = expected[i] - lr * p.grad[i];
    opt.step({&p}, epoch);
    CHECK(p.value == expected);
  }
}

TEST_CASE("integer shift is exact and rotation keeps the center") {
  Tensor<float> clip({2, 1, 5, 6});
  for (std::size_t i = 0; i < clip.size(); ++i) clip[i] = static_cast<float>(i + 1);
  const auto s = affine_transform(clip, 2, -1, 0.0);
  CHECK(s.at({1, 0, 0, 2}) == clip.at({1, 0, 1, 0}));
  CHECK(s.at({0, 0, 3, 5}) == clip.at({0, 0, 4, 3}));
  CHECK(s.at({0, 0, 4, 0}) == 0.0f);
  CHECK(s.at({0, 0, 0, 1}) == 0.0f);

  Tensor<float> odd({1, 1, 5, 5});
  odd.at({0, 0, 2, 2}) = 1.0f;
  const auto r = affine_transform(odd, 0, 0, 0.3);
  CHECK(r.at({0, 0, 2, 2}) == 1.0f);
  const auto quarter = affine_transform(clip, 0, 0, 2 * 3.14159265358979323846);
  for (std::size_t i = 0; i < clip.size(); ++i) CHECK(quarter[i] == doctest::Approx(clip[i]).epsilon(1e-5));
  CHECK(translation_pixels(0.05, 64) == 3);
  CHECK(translation_pixels(-0.05, 64) == -3);
}

TEST_CASE("augmentation applies one transform to every frame") {
  Tensor<float> clip({3, 1, 16, 16});
  SeededRng fill(1);
  for (std::size_t i = 0; i < 256; ++i) clip[i] = clip[256 + i] = clip[512 + i] = static_cast<float>(fill.uniform());
  SeededRng rng(2);
  const auto a = augment(clip, {}, rng);
  for (std::size_t i = 0; i < 256; ++i) {
    CHECK(a[i] == a[256 + i]);
    CHECK(a[i] == a[512 + i]);
  }
  AugmentationSpec off;
  off.translate = off.rotate = false;
  SeededRng rng2(2);
  CHECK(augment(clip, off, rng2) == clip);
}

TEST_CASE("two epochs lower the loss and are reproducible") {
  const auto samples = small_set(64, 32, 5);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.seed = 9;
  QaNetModel a(small_model(32), SeededRng(3)), b(small_model(32), SeededRng(3));
  const auto ra = train(a, samples, cfg);
  cfg.parallel_streams = false;
  const auto rb = train(b, samples, cfg);
  REQUIRE(ra.epoch_loss.size() == 2);
  CHECK(ra.epoch_loss.back() < ra.epoch_loss.front());
  CHECK(ra.epoch_loss == rb.epoch_loss);
  CHECK(ra.steps == 8);
  const auto pa = a.named_tensors(), pb = b.named_tensors();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(*pa[i].second == *pb[i].second);
}

TEST_CASE("zero learning rate leaves trainable parameters unchanged") {
  const auto samples = small_set(10, 32, 6);
  QaNetModel m(small_model(32), SeededRng(4));
  std::vector<Tensor<float>> before;
  for (auto* p : m.parameters()) before.push_back(p->value);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  cfg.optimizer.learning_rate = 0;
  train(m, samples, cfg);
  const auto params = m.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) CHECK(params[i]->value == before[i]);
}

TEST_CASE("one step on one batch moves every stream") {
  const auto samples = small_set(4, 32, 10);
  QaNetModel m(small_model(32), SeededRng(6));
  std::vector<std::vector<Tensor<float>>> before;
  for (auto a : kAttributes) {
    before.emplace_back();
    for (auto* p : m.stream(a).parameters()) before.back().push_back(p->value);
  }
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  REQUIRE(train(m, samples, cfg).steps == 1);
  for (std::size_t s = 0; s < 4; ++s) {
    const auto params = m.stream(kAttributes[s]).parameters();
    std::size_t moved = 0;
    for (std::size_t i = 0; i < params.size(); ++i) moved += params[i]->value != before[s][i];
    CHECK_MESSAGE(moved > 0, std::string(attribute_name(kAttributes[s])));
  }
}

TEST_CASE("augmentation keeps the clip shape") {
  Tensor<float> clip({3, 1, 20, 24});
  SeededRng rng(3);
  for (int i = 0; i < 20; ++i) CHECK(augment(clip, {}, rng).shape() == clip.shape());
}

TEST_CASE("a trailing single clip joins the previous batch") {
  const auto samples = small_set(7, 32, 7);
  QaNetModel m(small_model(32), SeededRng(5));
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 3;
  std::vector<std::size_t> seen;
  TrainHooks hooks;
  hooks.on_batch = [&](const BatchLog& log) { seen.push_back(log.batch); };
  CHECK(train(m, samples, cfg, hooks).steps == 2);
  CHECK(seen == std::vector<std::size_t>{0, 1});
}

TEST_CASE("training input errors") {
  const auto samples = small_set(4, 32, 8);
  QaNetModel m(small_model(32), SeededRng(6));
  TrainConfig cfg;
  cfg.batch_size = 1;
  CHECK_THROWS_AS(train(m, samples, cfg), std::invalid_argument);
  cfg.batch_size = 2;
  QaNetModel wrong(small_model(40), SeededRng(6));
  CHECK_THROWS_WITH_AS(train(wrong, samples, cfg), doctest::Contains("expects"), std::invalid_argument);
  CHECK_THROWS_AS(train(m, {samples[0]}, cfg), std::invalid_argument);
}

TEST_CASE("non-finite loss aborts with a one line report") {
  const auto samples = small_set(4, 32, 9);
  QaNetModel m(small_model(32), SeededRng(7));
  m.stream(Attribute::depth_gain).head().bias().value[0] = std::nanf("");
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 2;
  try {
    train(m, samples, cfg);
    FAIL("expected divergence");
  } catch (const TrainingDiverged& e) {
    const std::string what = e.what();
    CHECK(what.find('\n') == std::string::npos);
    CHECK(what.find("depth_gain/head/bias: 1 non-finite") != std::string::npos);
  }
}

TEST_CASE("fold partition is disjoint and complete") {
  for (auto [n, k] : {std::pair<std::size_t, std::size_t>{50, 5}, {53, 5}, {10, 10}}) {
    const auto folds = fold_partition(n, k, 3);
    REQUIRE(folds.size() == k);
    std::vector<int> hits(n, 0);
    for (std::size_t f = 0; f < k; ++f) {
      CHECK(folds[f].size() == n / k + (f < n % k ? 1 : 0));
      for (std::size_t i : folds[f]) ++hits[i];
    }
    for (int h : hits) CHECK(h == 1);
  }
  CHECK(fold_partition(50, 5, 3) == fold_partition(50, 5, 3));
  CHECK(fold_partition(50, 5, 3) != fold_partition(50, 5, 4));
  CHECK_THROWS_AS(fold_partition(3, 5, 0), std::invalid_argument);
}

TEST_CASE("cross validation reports every fold") {
  const auto samples = small_set(20, 32, 10);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.folds = 4;
  const auto reports = cross_validate(samples, small_model(32), cfg);
  REQUIRE(reports.size() == 4);
  std::set<std::string> ids;
  for (const auto& r : reports) {
    CHECK(r.train_clips == 15);
    CHECK(r.validation_ids.size() == 5);
    ids.insert(r.validation_ids.begin(), r.validation_ids.end());
    CHECK(r.epoch_loss.size() == 1);
    CHECK(r.to_json().find('\n') == std::string::npos);
  }
  CHECK(ids.size() == 20);
}

TEST_CASE("predict matches per clip inference") {
  const auto samples = small_set(5, 32, 11);
  QaNetModel m(small_model(32), SeededRng(8));
  const auto p = predict(m, samples, 2);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto s = m.forward_clip(samples[i].clip);
    for (std::size_t a = 0; a < 4; ++a) CHECK(p[i * 4 + a] == static_cast<double>(static_cast<float>(s.attributes()[a])));
  }
}
