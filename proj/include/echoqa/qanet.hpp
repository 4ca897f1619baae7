#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "echoqa/layers.hpp"
#include "echoqa/tensor.hpp"

namespace echoqa {

enum class Attribute { visibility = 0, clarity = 1, depth_gain = 2, foreshortening = 3 };

inline constexpr std::array<Attribute, 4> kAttributes = {Attribute::visibility, Attribute::clarity,
                                                         Attribute::depth_gain, Attribute::foreshortening};

std::string_view attribute_name(Attribute a);
/// Short report labels: VS, LC, DG, FS.
std::string_view attribute_label(Attribute a);
Attribute parse_attribute(std::string_view name);

/// Per-clip input geometry. Spatial size is fixed per model; frames per clip
/// is the LSTM sequence length.
struct InputSpec {
  std::size_t frames = 3;
  std::size_t channels = 1;
  std::size_t height = 224;
  std::size_t width = 224;

  Shape clip_shape() const { return {frames, channels, height, width}; }
  bool operator==(const InputSpec&) const = default;
};

struct StreamConfig {
  Attribute attribute = Attribute::visibility;
  std::vector<std::size_t> conv_channels;
  std::vector<bool> pool_after;
  std::size_t lstm_hidden = 32;
  std::vector<std::size_t> dense_widths{64, 16};
  double dropout = 0.5;

  /// Four 3x3 conv layers of 32, 32, 32, 64 channels with pooling after
  /// layers 1, 2 and 4; the clarity stream has three layers (32, 32, 64)
  /// pooling after layers 1 and 3.
  static StreamConfig standard(Attribute attribute);
  /// Same layout with every conv channel count divided by `divisor` (at least 1).
  StreamConfig narrowed(std::size_t divisor) const;

  void validate() const;
  bool operator==(const StreamConfig&) const = default;
};

struct ModelConfig {
  InputSpec input;
  std::array<StreamConfig, 4> streams;
  /// Weights of the aggregate score; equal by default.
  std::array<double, 4> aggregate_weights{0.25, 0.25, 0.25, 0.25};
  /// Zero the final dense layer so an untrained model scores exactly 0.5.
  bool zero_head = false;

  static ModelConfig standard(InputSpec input = {});
  /// Desk-scale variant used for synthetic training runs.
  static ModelConfig reduced(InputSpec input, std::size_t channel_divisor = 4);

  std::string to_json() const;
  static ModelConfig from_json(std::string_view text);
  bool operator==(const ModelConfig&) const = default;
};

/// Spatial extent after one conv block.
struct BlockSize {
  std::size_t channels;
  std::size_t conv_h, conv_w;  // after the convolution
  std::size_t out_h, out_w;    // after optional pooling
  bool pooled;
};

/// Size chain for a stream under valid 3x3 convolutions and floor 2x2 pooling.
/// Throws std::invalid_argument when a stage would leave less than 1x1 (or a
/// map too small for the next kernel or pool).
std::vector<BlockSize> size_chain(const StreamConfig& config, const InputSpec& input);
std::size_t flatten_size(const StreamConfig& config, const InputSpec& input);

struct QualityScores {
  double visibility = 0;
  double clarity = 0;
  double depth_gain = 0;
  double foreshortening = 0;
  double aggregate = 0;

  std::array<double, 4> attributes() const { return {visibility, clarity, depth_gain, foreshortening}; }
  double operator[](Attribute a) const { return attributes()[static_cast<std::size_t>(a)]; }
  static QualityScores from_attributes(const std::array<double, 4>& values, const std::array<double, 4>& weights);
};

/// One attribute's sub-network: conv blocks (conv, batchnorm, ReLU, optional
/// max pool, dropout) applied per frame, LSTM over the frame sequence, dense
/// blocks (dense, batchnorm, ReLU, dropout) and a one-unit sigmoid head.
template <typename T>
class Stream {
 public:
  Stream(const StreamConfig& config, const InputSpec& input, SeededRng& rng, bool zero_head = false);

  /// clips: [N, frames, channels, height, width] -> scores [N]. Caches for backward.
  Tensor<T> forward(const Tensor<T>& clips, Mode mode, SeededRng& rng);
  Tensor<T> infer(const Tensor<T>& clips) const;
  /// Pre-sigmoid head output [N, 1].
  Tensor<T> infer_logits(const Tensor<T>& clips) const;
  /// Gradient of the loss with respect to the scores; returns the gradient
  /// with respect to the clips.
  Tensor<T> backward(const Tensor<T>& grad_scores);

  /// Post-ReLU output of conv block `layer` for one clip [frames, C, H, W].
  Tensor<T> feature_map(const Tensor<T>& clip, std::size_t layer) const;

  const StreamConfig& config() const { return config_; }
  const std::vector<BlockSize>& sizes() const { return sizes_; }
  std::size_t flatten_size() const { return flatten_; }
  std::size_t conv_layers() const { return conv_.size(); }

  std::vector<Parameter<T>*> parameters();
  /// Parameters and batchnorm running statistics, in checkpoint order.
  std::vector<std::pair<std::string, Tensor<T>*>> named_tensors();

  /// Hash of ReLU on/off states and pooling selections from the last forward.
  std::uint64_t activation_signature() const;

  Conv2d<T>& conv(std::size_t i) { return conv_.at(i).conv; }
  Dense<T>& head() { return head_; }

 private:
  struct ConvBlock {
    Conv2d<T> conv;
    BatchNorm<T> norm;
    Relu<T> relu;
    bool pooled = false;
    MaxPool2x2<T> pool;
    Dropout<T> dropout;
  };
  struct DenseBlock {
    Dense<T> dense;
    BatchNorm<T> norm;
    Relu<T> relu;
    Dropout<T> dropout;
  };

  void check_clips(const Tensor<T>& clips) const;
  Tensor<T> to_sequence(const Tensor<T>& features, std::size_t batch) const;

  StreamConfig config_;
  InputSpec input_;
  std::vector<BlockSize> sizes_;
  std::size_t flatten_ = 0;
  std::vector<ConvBlock> conv_;
  Lstm<T> lstm_;
  std::vector<DenseBlock> dense_;
  Dense<T> head_;
  Sigmoid<T> sigmoid_;
  std::size_t cached_batch_ = 0;
};

/// Four independent streams sharing only the input clip. Output order is
/// always (visibility, clarity, depth_gain, foreshortening).
template <typename T>
class QaNet {
 public:
  /// Stream i is initialized from rng.child(i).
  QaNet(const ModelConfig& config, const SeededRng& rng);

  const ModelConfig& config() const { return config_; }
  Stream<T>& stream(Attribute a) { return streams_[static_cast<std::size_t>(a)]; }
  const Stream<T>& stream(Attribute a) const { return streams_[static_cast<std::size_t>(a)]; }

  /// Inference on one clip [frames, channels, height, width]. With
  /// parallel_streams the four streams run on separate threads.
  QualityScores forward_clip(const Tensor<T>& clip, bool parallel_streams = true) const;
  /// Equivalent to forward_clip over each clip; all clips must share a shape.
  std::vector<QualityScores> forward_batch(const std::vector<Tensor<T>>& clips, bool parallel_streams = true) const;
  /// clips [N, frames, C, H, W] -> scores [N, 4].
  Tensor<T> infer_batch(const Tensor<T>& clips, bool parallel_streams = true) const;

  Tensor<T> dump_feature_map(const Tensor<T>& clip, Attribute stream, std::size_t layer) const;

  std::vector<Parameter<T>*> parameters();
  std::vector<std::pair<std::string, Tensor<T>*>> named_tensors();

 private:
  ModelConfig config_;
  std::vector<Stream<T>> streams_;
};

using QaNetModel = QaNet<float>;

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Layout: "ECHOQACK", u32 version, u32 manifest length, manifest JSON,
/// u32 tensor count, then per tensor u32 name length, name, tensor record.
/// All integers little-endian; tensors use write_tensor's format.
void save_checkpoint(const QaNetModel& model, const std::filesystem::path& path);
QaNetModel load_checkpoint(const std::filesystem::path& path);
/// FNV-1a of the checkpoint bytes, as 16 hex digits.
std::string checkpoint_id(const std::filesystem::path& path);

}  // namespace echoqa
