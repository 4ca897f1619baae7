#include "echoqa/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <sstream>

#include "echoqa/evaluation.hpp"
#include "echoqa/text.hpp"

namespace echoqa {

double mae_loss(const Tensor<double>& predicted, const Tensor<double>& target) {
  if (predicted.rank() != 2 || predicted.dim(1) != 4 || predicted.shape() != target.shape())
    throw std::invalid_argument("mae_loss expects predictions and targets of shape [N, 4]");
  double sum = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) sum += std::abs(predicted[i] - target[i]);
  return sum / static_cast<double>(predicted.size());
}

double mae_loss(const std::vector<QualityScores>& predicted, const std::vector<std::array<double, 4>>& target) {
  if (predicted.empty()) throw std::invalid_argument("mae_loss: empty batch");
  if (predicted.size() != target.size()) throw std::invalid_argument("mae_loss: batch sizes differ");
  Tensor<double> p({predicted.size(), 4}), t({predicted.size(), 4});
  for (std::size_t i = 0; i < predicted.size(); ++i)
    for (std::size_t a = 0; a < 4; ++a) {
      p[i * 4 + a] = predicted[i].attributes()[a];
      t[i * 4 + a] = target[i][a];
    }
  return mae_loss(p, t);
}

// ---------------------------------------------------------------- augmentation

void AugmentationSpec::validate() const {
  if (!(max_translation_fraction >= 0) || !(max_rotation_degrees >= 0))
    throw std::invalid_argument("augmentation limits must be non-negative");
}

int translation_pixels(double fraction, std::size_t extent) {
  return static_cast<int>(std::lround(fraction * static_cast<double>(extent)));
}

Tensor<float> affine_transform(const Tensor<float>& clip, int dx, int dy, double angle) {
  if (clip.rank() != 4) throw std::invalid_argument("expected a clip of shape [frames, C, H, W]");
  const std::size_t planes = clip.dim(0) * clip.dim(1), h = clip.dim(2), w = clip.dim(3);
  const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
  Tensor<float> out(clip.shape());
  if (angle == 0.0) {
    for (std::size_t p = 0; p < planes; ++p)
      for (std::ptrdiff_t y = 0; y < H; ++y) {
        const std::ptrdiff_t sy = y - dy;
        if (sy < 0 || sy >= H) continue;
        for (std::ptrdiff_t x = 0; x < W; ++x) {
          const std::ptrdiff_t sx = x - dx;
          if (sx >= 0 && sx < W) out[p * h * w + static_cast<std::size_t>(y * W + x)] = clip[p * h * w + static_cast<std::size_t>(sy * W + sx)];
        }
      }
    return out;
  }
  const double cx = (static_cast<double>(w) - 1) / 2, cy = (static_cast<double>(h) - 1) / 2;
  const double c = std::cos(angle), s = std::sin(angle);
  for (std::ptrdiff_t y = 0; y < H; ++y)
    for (std::ptrdiff_t x = 0; x < W; ++x) {
      // Inverse map: undo the shift, then rotate by -angle about the center.
      const double ux = static_cast<double>(x - dx) - cx, uy = static_cast<double>(y - dy) - cy;
      const double sx = c * ux + s * uy + cx, sy = -s * ux + c * uy + cy;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const auto x0 = static_cast<std::ptrdiff_t>(fx), y0 = static_cast<std::ptrdiff_t>(fy);
      const double ax = sx - fx, ay = sy - fy;
      const double wts[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
      const std::ptrdiff_t xs[4] = {x0, x0 + 1, x0, x0 + 1}, ys[4] = {y0, y0, y0 + 1, y0 + 1};
      for (std::size_t p = 0; p < planes; ++p) {
        double v = 0;
        for (int k = 0; k < 4; ++k)
          if (xs[k] >= 0 && xs[k] < W && ys[k] >= 0 && ys[k] < H)
            v += wts[k] * clip[p * h * w + static_cast<std::size_t>(ys[k] * W + xs[k])];
        out[p * h * w + static_cast<std::size_t>(y * W + x)] = static_cast<float>(v);
      }
    }
  return out;
}

Tensor<float> augment(const Tensor<float>& clip, const AugmentationSpec& spec, SeededRng& rng) {
  spec.validate();
  if (clip.rank() != 4) throw std::invalid_argument("expected a clip of shape [frames, C, H, W]");
  // Always draw all three numbers so the stream does not depend on the flags.
  const double ux = rng.uniform(-1, 1), uy = rng.uniform(-1, 1), ur = rng.uniform(-1, 1);
  const int dx = spec.translate ? translation_pixels(ux * spec.max_translation_fraction, clip.dim(3)) : 0;
  const int dy = spec.translate ? translation_pixels(uy * spec.max_translation_fraction, clip.dim(2)) : 0;
  const double angle = spec.rotate ? ur * spec.max_rotation_degrees * std::numbers::pi / 180.0 : 0.0;
  if (dx == 0 && dy == 0 && angle == 0.0) return clip;
  return affine_transform(clip, dx, dy, angle);
}

// ---------------------------------------------------------------- optimizer

void OptimizerConfig::validate() const {
  if (!(learning_rate >= 0)) throw std::invalid_argument("learning rate must be non-negative");
  if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("momentum must be in [0, 1)");
  if (!(decay_factor > 0)) throw std::invalid_argument("decay factor must be positive");
  if (decay_interval == 0) throw std::invalid_argument("decay interval must be positive");
}

double OptimizerConfig::rate(std::size_t epoch) const {
  return learning_rate * std::pow(decay_factor, static_cast<double>(epoch / decay_interval));
}

template <typename T>
void SgdMomentum<T>::step(const std::vector<Parameter<T>*>& params, std::size_t epoch) {
  if (velocity_.empty())
    for (auto* p : params) velocity_.emplace_back(p->value.shape());
  if (velocity_.size() != params.size()) throw std::invalid_argument("optimizer: parameter count changed");
  const T lr = static_cast<T>(config_.rate(epoch));
  const T m = static_cast<T>(config_.momentum);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    auto& v = velocity_[i];
    if (p.value.shape() != v.shape() || p.grad.shape() != v.shape())
      throw std::invalid_argument("optimizer: shape mismatch for parameter " + p.name);
    T* pv = p.value.data();
    const T* g = p.grad.data();
    T* vv = v.data();
    for (std::size_t k = 0; k < v.size(); ++k) {
      vv[k] = m * vv[k] - lr * g[k];
      pv[k] = pv[k] + vv[k];
    }
  }
}

template class SgdMomentum<float>;
template class SgdMomentum<double>;

// ---------------------------------------------------------------- data

std::vector<TrainingSample> load_samples(const std::vector<AnnotationRecord>& rows,
                                         const std::filesystem::path& base_dir) {
  std::vector<TrainingSample> out(rows.size());
  std::vector<std::string> errors(rows.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < rows.size(); ++i) {
    try {
      out[i] = {rows[i].clip_id, load_clip(rows[i], base_dir), rows[i].normalized(), rows[i].band};
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw std::runtime_error(e);
  return out;
}

std::vector<TrainingSample> to_samples(const std::vector<GeneratedClip>& clips) {
  std::vector<TrainingSample> out;
  out.reserve(clips.size());
  for (const auto& g : clips) out.push_back({g.record.clip_id, g.clip.to_tensor(), g.record.normalized(), g.record.band});
  return out;
}

// ---------------------------------------------------------------- training

void TrainConfig::validate() const {
  if (batch_size < 2) throw std::invalid_argument("batch size must be at least 2 (batch normalization)");
  if (folds < 2) throw std::invalid_argument("cross validation needs at least 2 folds");
  optimizer.validate();
  augmentation.validate();
}

std::string TrainConfig::to_json() const {
  return JsonLine()
      .field("batch_size", batch_size)
      .field("epochs", epochs)
      .field("folds", folds)
      .field("seed", std::to_string(seed))
      .shortest("learning_rate", optimizer.learning_rate)
      .shortest("momentum", optimizer.momentum)
      .shortest("decay_factor", optimizer.decay_factor)
      .field("decay_interval", optimizer.decay_interval)
      .field("augment", augment)
      .shortest("max_translation_fraction", augmentation.max_translation_fraction)
      .shortest("max_rotation_degrees", augmentation.max_rotation_degrees)
      .str();
}

namespace {

std::string parameter_report(QaNetModel& model) {
  std::ostringstream out;
  for (const auto& [name, t] : model.named_tensors()) {
    std::size_t bad = 0;
    double max_abs = 0;
    for (float v : t->values()) {
      if (!std::isfinite(v))
        ++bad;
      else
        max_abs = std::max(max_abs, static_cast<double>(std::abs(v)));
    }
    if (bad || max_abs > 1e3) out << "; " << name << ": " << bad << " non-finite, max |value| " << max_abs;
  }
  const std::string s = out.str();
  return s.empty() ? "; all parameters finite" : s;
}

void check_sample_shapes(const QaNetModel& model, const std::vector<TrainingSample>& samples) {
  const Shape want = model.config().input.clip_shape();
  for (const auto& s : samples)
    if (s.clip.shape() != want)
      throw std::invalid_argument("clip " + s.clip_id + " has shape " + shape_string(s.clip.shape()) +
                                  " but the model expects " + shape_string(want));
}

}  // namespace

TrainResult train(QaNetModel& model, const std::vector<TrainingSample>& samples, const TrainConfig& config,
                  const TrainHooks& hooks) {
  config.validate();
  if (samples.size() < 2) throw std::invalid_argument("training needs at least 2 clips");
  check_sample_shapes(model, samples);

  const Shape clip_shape = model.config().input.clip_shape();
  const std::size_t clip_size = shape_size(clip_shape);
  auto params = model.parameters();
  SgdMomentum<float> optimizer(config.optimizer);
  const SeededRng root(config.seed);
  const auto start = std::chrono::steady_clock::now();
  TrainResult result;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const SeededRng epoch_rng = root.child(epoch);
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    SeededRng shuffle_rng = epoch_rng.child(0);
    shuffle_rng.shuffle(std::span(order));

    std::vector<std::pair<std::size_t, std::size_t>> batches;
    for (std::size_t b = 0; b < order.size(); b += config.batch_size)
      batches.emplace_back(b, std::min(order.size(), b + config.batch_size));
    if (batches.size() > 1 && batches.back().second - batches.back().first == 1) {
      batches[batches.size() - 2].second = batches.back().second;
      batches.pop_back();
    }

    double epoch_sum = 0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto [b0, b1] = batches[bi];
      const std::size_t n = b1 - b0;
      const SeededRng batch_rng = epoch_rng.child(bi + 1);
      Shape batch_shape{n};
      batch_shape.insert(batch_shape.end(), clip_shape.begin(), clip_shape.end());
      Tensor<float> x(batch_shape);
      SeededRng aug_rng = batch_rng.child(0);
      for (std::size_t i = 0; i < n; ++i) {
        const auto& clip = samples[order[b0 + i]].clip;
        const Tensor<float> a = config.augment ? augment(clip, config.augmentation, aug_rng) : clip;
        std::copy_n(a.data(), clip_size, x.data() + i * clip_size);
      }
      for (auto* p : params) p->zero_grad();

      std::array<double, 4> stream_loss{};
      const float scale = 1.0f / static_cast<float>(4 * n);
#pragma omp parallel for num_threads(4) schedule(static, 1) if (config.parallel_streams)
      for (int s = 0; s < 4; ++s) {
        SeededRng dropout_rng = batch_rng.child(1 + static_cast<std::size_t>(s));
        auto& stream = model.stream(kAttributes[s]);
        const Tensor<float> pred = stream.forward(x, Mode::train, dropout_rng);
        Tensor<float> grad({n});
        double sum = 0;
        for (std::size_t i = 0; i < n; ++i) {
          const double diff = static_cast<double>(pred[i]) - samples[order[b0 + i]].target[s];
          sum += std::abs(diff);
          grad[i] = diff > 0 ? scale : (diff < 0 ? -scale : 0.0f);
        }
        stream_loss[s] = sum;
        stream.backward(grad);
      }
      const double loss = (stream_loss[0] + stream_loss[1] + stream_loss[2] + stream_loss[3]) / static_cast<double>(4 * n);
      if (!std::isfinite(loss))
        throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(bi) +
                               parameter_report(model));
      optimizer.step(params, epoch);
      ++result.steps;
      epoch_sum += loss;
      if (hooks.on_batch) {
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        hooks.on_batch({epoch, bi, loss, config.optimizer.rate(epoch), wall});
      }
    }
    result.epoch_loss.push_back(epoch_sum / static_cast<double>(batches.size()));
    if (hooks.on_epoch) hooks.on_epoch(epoch, result.epoch_loss.back());
  }
  return result;
}

std::vector<std::vector<std::size_t>> fold_partition(std::size_t n, std::size_t folds, std::uint64_t seed) {
  if (folds < 2) throw std::invalid_argument("need at least 2 folds");
  if (n < folds)
    throw std::invalid_argument("cannot split " + std::to_string(n) + " clips into " + std::to_string(folds) + " folds");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  SeededRng(seed).child(0xF01D).shuffle(std::span(order));
  std::vector<std::vector<std::size_t>> out(folds);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < folds; ++f) {
    const std::size_t size = n / folds + (f < n % folds ? 1 : 0);
    out[f].assign(order.begin() + static_cast<std::ptrdiff_t>(pos), order.begin() + static_cast<std::ptrdiff_t>(pos + size));
    std::sort(out[f].begin(), out[f].end());
    pos += size;
  }
  return out;
}

Tensor<double> predict(const QaNetModel& model, const std::vector<TrainingSample>& samples, std::size_t batch_size) {
  if (samples.empty()) throw std::invalid_argument("nothing to predict");
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  check_sample_shapes(model, samples);
  const Shape clip_shape = model.config().input.clip_shape();
  const std::size_t clip_size = shape_size(clip_shape);
  Tensor<double> out({samples.size(), 4});
  for (std::size_t b0 = 0; b0 < samples.size(); b0 += batch_size) {
    const std::size_t n = std::min(batch_size, samples.size() - b0);
    Shape shape{n};
    shape.insert(shape.end(), clip_shape.begin(), clip_shape.end());
    Tensor<float> x(shape);
    for (std::size_t i = 0; i < n; ++i) std::copy_n(samples[b0 + i].clip.data(), clip_size, x.data() + i * clip_size);
    const Tensor<float> scores = model.infer_batch(x);
    for (std::size_t k = 0; k < n * 4; ++k) out[b0 * 4 + k] = scores[k];
  }
  return out;
}

std::string FoldReport::to_json() const {
  return JsonLine()
      .field("fold", fold)
      .field("train_clips", train_clips)
      .field("validation_clips", validation_ids.size())
      .strings("validation_ids", validation_ids)
      .fixed("mae", mae)
      .fixed("accuracy", accuracy)
      .fixed("mean_accuracy", mean_accuracy)
      .fixed("epoch_loss", epoch_loss)
      .str();
}

std::vector<FoldReport> cross_validate(const std::vector<TrainingSample>& samples, const ModelConfig& model_config,
                                       const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  const auto folds = fold_partition(samples.size(), config.folds, config.seed);
  const SeededRng root(config.seed);
  std::vector<FoldReport> reports;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    std::vector<TrainingSample> train_set, val_set;
    std::vector<bool> held(samples.size(), false);
    for (std::size_t i : folds[f]) held[i] = true;
    for (std::size_t i = 0; i < samples.size(); ++i) (held[i] ? val_set : train_set).push_back(samples[i]);

    const SeededRng fold_rng = root.child(1 + f);
    QaNetModel model(model_config, fold_rng.child(0));
    TrainConfig fold_config = config;
    fold_config.seed = fold_rng.child(1).next_u64();
    FoldReport report;
    report.fold = f;
    report.train_clips = train_set.size();
    report.epoch_loss = train(model, train_set, fold_config, hooks).epoch_loss;

    const Tensor<double> pred = predict(model, val_set);
    for (const auto& s : val_set) report.validation_ids.push_back(s.clip_id);
    for (std::size_t a = 0; a < 4; ++a) {
      std::vector<double> p(val_set.size()), t(val_set.size());
      for (std::size_t i = 0; i < val_set.size(); ++i) {
        p[i] = pred[i * 4 + a];
        t[i] = val_set[i].target[a];
      }
      report.mae[a] = mean_absolute_error(p, t);
      report.accuracy[a] = (1.0 - report.mae[a]) * 100.0;
    }
    report.mean_accuracy = pairwise_sum(report.accuracy) / 4.0;
    reports.push_back(std::move(report));
  }
  return reports;
}

}  // namespace echoqa
