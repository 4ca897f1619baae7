#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "echoqa/qanet.hpp"
#include "echoqa/rng.hpp"
#include "echoqa/synthgen.hpp"
#include "echoqa/tensor.hpp"

namespace echoqa {

/// Mean over clips and the four attributes of |pred - target|. Both tensors
/// are [N, 4]; throws on an empty batch or mismatched shapes.
double mae_loss(const Tensor<double>& predicted, const Tensor<double>& target);
double mae_loss(const std::vector<QualityScores>& predicted, const std::vector<std::array<double, 4>>& target);

struct AugmentationSpec {
  double max_translation_fraction = 0.05;
  double max_rotation_degrees = 5.0;
  bool translate = true;
  bool rotate = true;

  void validate() const;
};

/// Shift in whole pixels for a translation given as a fraction of the extent.
int translation_pixels(double fraction, std::size_t extent);

/// Moves every frame of a clip [frames, C, H, W] by (dx, dy) pixels and
/// rotates it by angle radians about the image center. Bilinear sampling,
/// zero outside. With angle 0 the shift is an exact copy.
Tensor<float> affine_transform(const Tensor<float>& clip, int dx, int dy, double angle);

/// One random translation and rotation shared by all frames of the clip.
Tensor<float> augment(const Tensor<float>& clip, const AugmentationSpec& spec, SeededRng& rng);

struct OptimizerConfig {
  double learning_rate = 0.002;
  double momentum = 0.95;
  double decay_factor = 0.1;
  std::size_t decay_interval = 24;  // epochs

  void validate() const;
  /// learning_rate * decay_factor ^ floor(epoch / decay_interval)
  double rate(std::size_t epoch) const;
};

/// velocity <- momentum * velocity - lr(epoch) * grad; param <- param + velocity.
template <typename T>
class SgdMomentum {
 public:
  explicit SgdMomentum(OptimizerConfig config) : config_(config) { config_.validate(); }

  void step(const std::vector<Parameter<T>*>& params, std::size_t epoch);
  const OptimizerConfig& config() const { return config_; }
  const std::vector<Tensor<T>>& velocity() const { return velocity_; }

 private:
  OptimizerConfig config_;
  std::vector<Tensor<T>> velocity_;
};

struct TrainingSample {
  std::string clip_id;
  Tensor<float> clip;  // [frames, 1, H, W]
  std::array<double, 4> target{};
  QualityBand band = QualityBand::poor;
};

std::vector<TrainingSample> load_samples(const std::vector<AnnotationRecord>& rows,
                                         const std::filesystem::path& base_dir);
std::vector<TrainingSample> to_samples(const std::vector<GeneratedClip>& clips);

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t epochs = 40;
  std::size_t folds = 5;
  std::uint64_t seed = 0;
  OptimizerConfig optimizer;
  AugmentationSpec augmentation;
  bool augment = true;
  /// Run the four streams' forward/backward on separate threads.
  bool parallel_streams = true;

  void validate() const;
  std::string to_json() const;
};

struct BatchLog {
  std::size_t epoch;
  std::size_t batch;
  double loss;
  double learning_rate;
  double wall_seconds;
};

struct TrainResult {
  std::vector<double> epoch_loss;  // mean batch MAE per epoch
  std::size_t steps = 0;
};

/// Thrown when a batch loss is not finite.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainHooks {
  std::function<void(const BatchLog&)> on_batch;
  std::function<void(std::size_t epoch, double loss)> on_epoch;
};

/// Epochs of shuffled mini-batches; per batch: augment, forward all streams,
/// MAE over the four outputs, joint backward, one optimizer step. A trailing
/// batch of one clip joins the previous batch (batchnorm needs two).
TrainResult train(QaNetModel& model, const std::vector<TrainingSample>& samples, const TrainConfig& config,
                  const TrainHooks& hooks = {});

/// Shuffled clip indices cut into `folds` contiguous groups; the first
/// n % folds groups hold one extra clip.
std::vector<std::vector<std::size_t>> fold_partition(std::size_t n, std::size_t folds, std::uint64_t seed);

struct FoldReport {
  std::size_t fold = 0;
  std::size_t train_clips = 0;
  std::vector<std::string> validation_ids;
  std::array<double, 4> mae{};
  std::array<double, 4> accuracy{};
  double mean_accuracy = 0;
  std::vector<double> epoch_loss;

  std::string to_json() const;
};

/// Trains a fresh model per fold (seeded from the config seed and fold index)
/// and validates on the held-out fold.
std::vector<FoldReport> cross_validate(const std::vector<TrainingSample>& samples, const ModelConfig& model_config,
                                       const TrainConfig& config, const TrainHooks& hooks = {});

/// Predictions [N, 4] for samples, batched.
Tensor<double> predict(const QaNetModel& model, const std::vector<TrainingSample>& samples,
                       std::size_t batch_size = 64);

}  // namespace echoqa
