#include "echoqa/qanet.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace echoqa {

using ojson = nlohmann::ordered_json;

namespace {

constexpr std::array<std::string_view, 4> kNames = {"visibility", "clarity", "depth_gain", "foreshortening"};
constexpr std::array<std::string_view, 4> kLabels = {"VS", "LC", "DG", "FS"};

std::uint64_t fnv1a(std::uint64_t hash, const void* data, std::size_t size) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    hash ^= bytes[i];
    hash *= 0x100000001B3ULL;
  }
  return hash;
}

constexpr std::uint64_t kFnvOffset = 0xCBF29CE484222325ULL;

}  // namespace

std::string_view attribute_name(Attribute a) { return kNames.at(static_cast<std::size_t>(a)); }
std::string_view attribute_label(Attribute a) { return kLabels.at(static_cast<std::size_t>(a)); }

Attribute parse_attribute(std::string_view name) {
  for (std::size_t i = 0; i < kNames.size(); ++i)
    if (name == kNames[i] || name == kLabels[i]) return kAttributes[i];
  throw std::invalid_argument("unknown attribute '" + std::string(name) + "'");
}

// ---------------------------------------------------------------- configs

StreamConfig StreamConfig::standard(Attribute attribute) {
  StreamConfig c;
  c.attribute = attribute;
  if (attribute == Attribute::clarity) {
    c.conv_channels = {32, 32, 64};
    c.pool_after = {true, false, true};
  } else {
    c.conv_channels = {32, 32, 32, 64};
    c.pool_after = {true, true, false, true};
  }
  return c;
}

StreamConfig StreamConfig::narrowed(std::size_t divisor) const {
  if (divisor == 0) throw std::invalid_argument("channel divisor must be positive");
  StreamConfig c = *this;
  for (auto& ch : c.conv_channels) ch = std::max<std::size_t>(1, ch / divisor);
  return c;
}

void StreamConfig::validate() const {
  if (conv_channels.empty()) throw std::invalid_argument("stream needs at least one conv layer");
  if (pool_after.size() != conv_channels.size())
    throw std::invalid_argument("pool plan must have one entry per conv layer");
  for (auto ch : conv_channels)
    if (ch == 0) throw std::invalid_argument("conv channel counts must be positive");
  if (lstm_hidden == 0) throw std::invalid_argument("LSTM hidden size must be positive");
  for (auto w : dense_widths)
    if (w == 0) throw std::invalid_argument("dense widths must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must be in [0, 1)");
}

ModelConfig ModelConfig::standard(InputSpec input) {
  ModelConfig m;
  m.input = input;
  for (std::size_t i = 0; i < 4; ++i) m.streams[i] = StreamConfig::standard(kAttributes[i]);
  return m;
}

ModelConfig ModelConfig::reduced(InputSpec input, std::size_t channel_divisor) {
  ModelConfig m = standard(input);
  for (auto& s : m.streams) s = s.narrowed(channel_divisor);
  return m;
}

std::string ModelConfig::to_json() const {
  ojson j;
  j["input"] = {{"frames", input.frames}, {"channels", input.channels}, {"height", input.height}, {"width", input.width}};
  j["streams"] = ojson::array();
  for (const auto& s : streams) {
    ojson pools = ojson::array();
    for (bool p : s.pool_after) pools.push_back(p);
    j["streams"].push_back({{"attribute", attribute_name(s.attribute)},
                            {"conv_channels", s.conv_channels},
                            {"pool_after", pools},
                            {"lstm_hidden", s.lstm_hidden},
                            {"dense_widths", s.dense_widths},
                            {"dropout", s.dropout}});
  }
  j["aggregate_weights"] = aggregate_weights;
  j["zero_head"] = zero_head;
  return j.dump();
}

ModelConfig ModelConfig::from_json(std::string_view text) {
  const auto j = ojson::parse(text);
  ModelConfig m;
  const auto& in = j.at("input");
  m.input = {in.at("frames").get<std::size_t>(), in.at("channels").get<std::size_t>(),
             in.at("height").get<std::size_t>(), in.at("width").get<std::size_t>()};
  const auto& streams = j.at("streams");
  if (streams.size() != 4) throw std::invalid_argument("model config needs exactly four streams");
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& s = streams[i];
    StreamConfig c;
    c.attribute = parse_attribute(s.at("attribute").get<std::string>());
    c.conv_channels = s.at("conv_channels").get<std::vector<std::size_t>>();
    for (const auto& p : s.at("pool_after")) c.pool_after.push_back(p.get<bool>());
    c.lstm_hidden = s.at("lstm_hidden").get<std::size_t>();
    c.dense_widths = s.at("dense_widths").get<std::vector<std::size_t>>();
    c.dropout = s.at("dropout").get<double>();
    m.streams[i] = c;
  }
  m.aggregate_weights = j.at("aggregate_weights").get<std::array<double, 4>>();
  m.zero_head = j.at("zero_head").get<bool>();
  return m;
}

std::vector<BlockSize> size_chain(const StreamConfig& config, const InputSpec& input) {
  config.validate();
  std::vector<BlockSize> chain;
  std::size_t h = input.height, w = input.width;
  for (std::size_t i = 0; i < config.conv_channels.size(); ++i) {
    if (h < 3 || w < 3)
      throw std::invalid_argument("spatial size too small: conv layer " + std::to_string(i + 1) + " sees " +
                                  std::to_string(h) + "x" + std::to_string(w));
    BlockSize b{config.conv_channels[i], h - 2, w - 2, h - 2, w - 2, config.pool_after[i]};
    if (b.pooled) {
      if (b.conv_h < 2 || b.conv_w < 2)
        throw std::invalid_argument("spatial size too small: pooling after conv layer " + std::to_string(i + 1));
      b.out_h = b.conv_h / 2;
      b.out_w = b.conv_w / 2;
    }
    h = b.out_h;
    w = b.out_w;
    chain.push_back(b);
  }
  return chain;
}

std::size_t flatten_size(const StreamConfig& config, const InputSpec& input) {
  const auto chain = size_chain(config, input);
  return chain.back().channels * chain.back().out_h * chain.back().out_w;
}

QualityScores QualityScores::from_attributes(const std::array<double, 4>& v, const std::array<double, 4>& w) {
  QualityScores s{v[0], v[1], v[2], v[3], 0.0};
  const double wsum = w[0] + w[1] + w[2] + w[3];
  s.aggregate = (w[0] * v[0] + w[1] * v[1] + w[2] * v[2] + w[3] * v[3]) / wsum;
  return s;
}

// ---------------------------------------------------------------- Stream

template <typename T>
Stream<T>::Stream(const StreamConfig& config, const InputSpec& input, SeededRng& rng, bool zero_head)
    : config_(config), input_(input), sizes_(size_chain(config, input)) {
  if (input.frames == 0 || input.channels == 0) throw std::invalid_argument("input spec needs frames and channels");
  flatten_ = sizes_.back().channels * sizes_.back().out_h * sizes_.back().out_w;
  std::size_t in_ch = input.channels;
  for (std::size_t i = 0; i < config.conv_channels.size(); ++i) {
    ConvBlock block{Conv2d<T>(in_ch, config.conv_channels[i], 3, 1, rng), BatchNorm<T>(config.conv_channels[i]),
                    Relu<T>{}, static_cast<bool>(config.pool_after[i]), MaxPool2x2<T>{}, Dropout<T>(config.dropout)};
    conv_.push_back(std::move(block));
    in_ch = config.conv_channels[i];
  }
  lstm_ = Lstm<T>(flatten_, config.lstm_hidden, rng);
  std::size_t width = config.lstm_hidden;
  for (std::size_t w : config.dense_widths) {
    dense_.push_back(DenseBlock{Dense<T>(width, w, rng), BatchNorm<T>(w), Relu<T>{}, Dropout<T>(config.dropout)});
    width = w;
  }
  head_ = Dense<T>(width, 1, rng, zero_head);
}

template <typename T>
void Stream<T>::check_clips(const Tensor<T>& clips) const {
  if (clips.rank() != 5 || clips.dim(1) != input_.frames || clips.dim(2) != input_.channels ||
      clips.dim(3) != input_.height || clips.dim(4) != input_.width)
    throw std::invalid_argument("clip batch " + shape_string(clips.shape()) + " does not match model input [N," +
                                std::to_string(input_.frames) + "," + std::to_string(input_.channels) + "," +
                                std::to_string(input_.height) + "," + std::to_string(input_.width) + "]");
}

// [N * frames, F] (clip-major) -> [frames, N, F]
template <typename T>
Tensor<T> Stream<T>::to_sequence(const Tensor<T>& features, std::size_t batch) const {
  const std::size_t frames = input_.frames, f = flatten_;
  Tensor<T> seq({frames, batch, f});
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t t = 0; t < frames; ++t)
      std::copy_n(features.data() + (n * frames + t) * f, f, seq.data() + (t * batch + n) * f);
  return seq;
}

template <typename T>
Tensor<T> Stream<T>::forward(const Tensor<T>& clips, Mode mode, SeededRng& rng) {
  check_clips(clips);
  const std::size_t n = clips.dim(0);
  cached_batch_ = n;
  Tensor<T> x = clips.reshaped({n * input_.frames, input_.channels, input_.height, input_.width});
  for (auto& b : conv_) {
    x = b.conv.forward(x);
    x = b.norm.forward(x, mode);
    x = b.relu.forward(x);
    if (b.pooled) x = b.pool.forward(x);
    x = b.dropout.forward(x, mode, rng);
  }
  Tensor<T> h = lstm_.forward(to_sequence(std::move(x).reshaped({n * input_.frames, flatten_}), n));
  for (auto& b : dense_) {
    h = b.dense.forward(h);
    h = b.norm.forward(h, mode);
    h = b.relu.forward(h);
    h = b.dropout.forward(h, mode, rng);
  }
  return sigmoid_.forward(head_.forward(h)).reshaped({n});
}

template <typename T>
Tensor<T> Stream<T>::infer_logits(const Tensor<T>& clips) const {
  check_clips(clips);
  const std::size_t n = clips.dim(0);
  Tensor<T> x = clips.reshaped({n * input_.frames, input_.channels, input_.height, input_.width});
  for (const auto& b : conv_) {
    x = b.relu.infer(b.norm.infer(b.conv.infer(x)));
    if (b.pooled) x = b.pool.infer(x);
  }
  Tensor<T> h = lstm_.infer(to_sequence(std::move(x).reshaped({n * input_.frames, flatten_}), n));
  for (const auto& b : dense_) h = b.relu.infer(b.norm.infer(b.dense.infer(h)));
  return head_.infer(h);
}

template <typename T>
Tensor<T> Stream<T>::infer(const Tensor<T>& clips) const {
  return sigmoid_.infer(infer_logits(clips)).reshaped({clips.dim(0)});
}

template <typename T>
Tensor<T> Stream<T>::backward(const Tensor<T>& grad_scores) {
  if (cached_batch_ == 0) throw std::logic_error("Stream: backward called before forward");
  const std::size_t n = cached_batch_, frames = input_.frames, f = flatten_;
  if (grad_scores.size() != n) throw std::invalid_argument("Stream: gradient must hold one value per clip");
  Tensor<T> g = head_.backward(sigmoid_.backward(grad_scores.reshaped({n, 1})));
  for (auto it = dense_.rbegin(); it != dense_.rend(); ++it)
    g = it->dense.backward(it->norm.backward(it->relu.backward(it->dropout.backward(g))));
  const Tensor<T> seq_grad = lstm_.backward(g);
  Tensor<T> x({n * frames, f});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t t = 0; t < frames; ++t)
      std::copy_n(seq_grad.data() + (t * n + b) * f, f, x.data() + (b * frames + t) * f);
  const auto& last = sizes_.back();
  x = std::move(x).reshaped({n * frames, last.channels, last.out_h, last.out_w});
  for (auto it = conv_.rbegin(); it != conv_.rend(); ++it) {
    x = it->dropout.backward(x);
    if (it->pooled) x = it->pool.backward(x);
    x = it->conv.backward(it->norm.backward(it->relu.backward(x)));
  }
  return std::move(x).reshaped({n, frames, input_.channels, input_.height, input_.width});
}

template <typename T>
Tensor<T> Stream<T>::feature_map(const Tensor<T>& clip, std::size_t layer) const {
  if (layer >= conv_.size())
    throw std::out_of_range("conv layer " + std::to_string(layer) + " out of range (stream has " +
                            std::to_string(conv_.size()) + ")");
  if (clip.shape() != input_.clip_shape())
    throw std::invalid_argument("clip " + shape_string(clip.shape()) + " does not match model input");
  Tensor<T> x = clip;
  for (std::size_t i = 0;; ++i) {
    const auto& b = conv_[i];
    x = b.relu.infer(b.norm.infer(b.conv.infer(x)));
    if (i == layer) return x;
    if (b.pooled) x = b.pool.infer(x);
  }
}

template <typename T>
std::vector<Parameter<T>*> Stream<T>::parameters() {
  std::vector<Parameter<T>*> out;
  auto append = [&out](std::vector<Parameter<T>*> ps) { out.insert(out.end(), ps.begin(), ps.end()); };
  for (auto& b : conv_) {
    append(b.conv.parameters());
    append(b.norm.parameters());
  }
  append(lstm_.parameters());
  for (auto& b : dense_) {
    append(b.dense.parameters());
    append(b.norm.parameters());
  }
  append(head_.parameters());
  return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> Stream<T>::named_tensors() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  const std::string prefix(attribute_name(config_.attribute));
  auto add_params = [&](const std::string& scope, std::vector<Parameter<T>*> ps) {
    for (auto* p : ps) out.emplace_back(prefix + "/" + scope + "/" + p->name, &p->value);
  };
  auto add_norm = [&](const std::string& scope, BatchNorm<T>& norm) {
    add_params(scope, norm.parameters());
    for (auto& b : norm.buffers()) out.emplace_back(prefix + "/" + scope + "/" + b.name, b.value);
  };
  for (std::size_t i = 0; i < conv_.size(); ++i) {
    add_params("conv" + std::to_string(i), conv_[i].conv.parameters());
    add_norm("conv" + std::to_string(i) + "_bn", conv_[i].norm);
  }
  add_params("lstm", lstm_.parameters());
  for (std::size_t i = 0; i < dense_.size(); ++i) {
    add_params("dense" + std::to_string(i), dense_[i].dense.parameters());
    add_norm("dense" + std::to_string(i) + "_bn", dense_[i].norm);
  }
  add_params("head", head_.parameters());
  return out;
}

template <typename T>
std::uint64_t Stream<T>::activation_signature() const {
  std::uint64_t h = kFnvOffset;
  for (const auto& b : conv_) {
    const auto pattern = b.relu.active_pattern();
    h = fnv1a(h, pattern.data(), pattern.size());
    if (b.pooled) h = fnv1a(h, b.pool.argmax().data(), b.pool.argmax().size() * sizeof(std::uint32_t));
  }
  for (const auto& b : dense_) {
    const auto pattern = b.relu.active_pattern();
    h = fnv1a(h, pattern.data(), pattern.size());
  }
  return h;
}

// ---------------------------------------------------------------- QaNet

template <typename T>
QaNet<T>::QaNet(const ModelConfig& config, const SeededRng& rng) : config_(config) {
  for (std::size_t i = 0; i < 4; ++i) {
    if (config.streams[i].attribute != kAttributes[i])
      throw std::invalid_argument("stream " + std::to_string(i) + " must be " + std::string(kNames[i]));
    SeededRng stream_rng = rng.child(i);
    streams_.emplace_back(config.streams[i], config.input, stream_rng, config.zero_head);
  }
}

template <typename T>
QualityScores QaNet<T>::forward_clip(const Tensor<T>& clip, bool parallel_streams) const {
  if (clip.shape() != config_.input.clip_shape())
    throw std::invalid_argument("clip " + shape_string(clip.shape()) + " does not match model input " +
                                shape_string(config_.input.clip_shape()));
  Shape batched{1};
  batched.insert(batched.end(), clip.shape().begin(), clip.shape().end());
  const Tensor<T> one = clip.reshaped(batched);
  std::array<double, 4> values{};
#pragma omp parallel for num_threads(4) schedule(static, 1) if (parallel_streams)
  for (int s = 0; s < 4; ++s) values[s] = static_cast<double>(streams_[s].infer(one)[0]);
  return QualityScores::from_attributes(values, config_.aggregate_weights);
}

template <typename T>
std::vector<QualityScores> QaNet<T>::forward_batch(const std::vector<Tensor<T>>& clips, bool parallel_streams) const {
  std::vector<QualityScores> out;
  if (clips.empty()) return out;
  const Shape& shape = clips.front().shape();
  for (const auto& c : clips)
    if (c.shape() != shape) throw std::invalid_argument("forward_batch: ragged clip shapes");
  Shape batched{clips.size()};
  batched.insert(batched.end(), shape.begin(), shape.end());
  Tensor<T> stacked(batched);
  for (std::size_t i = 0; i < clips.size(); ++i) std::copy_n(clips[i].data(), clips[i].size(), stacked.data() + i * clips[i].size());
  const Tensor<T> scores = infer_batch(stacked, parallel_streams);
  for (std::size_t i = 0; i < clips.size(); ++i) {
    std::array<double, 4> v{};
    for (std::size_t a = 0; a < 4; ++a) v[a] = static_cast<double>(scores[i * 4 + a]);
    out.push_back(QualityScores::from_attributes(v, config_.aggregate_weights));
  }
  return out;
}

template <typename T>
Tensor<T> QaNet<T>::infer_batch(const Tensor<T>& clips, bool parallel_streams) const {
  if (clips.rank() != 5) throw std::invalid_argument("infer_batch expects [N, frames, C, H, W]");
  const std::size_t n = clips.dim(0);
  std::array<Tensor<T>, 4> per_stream;
#pragma omp parallel for num_threads(4) schedule(static, 1) if (parallel_streams)
  for (int s = 0; s < 4; ++s) per_stream[s] = streams_[s].infer(clips);
  Tensor<T> out({n, 4});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t s = 0; s < 4; ++s) out[i * 4 + s] = per_stream[s][i];
  return out;
}

template <typename T>
Tensor<T> QaNet<T>::dump_feature_map(const Tensor<T>& clip, Attribute stream, std::size_t layer) const {
  return streams_.at(static_cast<std::size_t>(stream)).feature_map(clip, layer);
}

template <typename T>
std::vector<Parameter<T>*> QaNet<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (auto& s : streams_) {
    auto ps = s.parameters();
    out.insert(out.end(), ps.begin(), ps.end());
  }
  return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> QaNet<T>::named_tensors() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  for (auto& s : streams_) {
    auto ts = s.named_tensors();
    out.insert(out.end(), ts.begin(), ts.end());
  }
  return out;
}

template class Stream<float>;
template class Stream<double>;
template class QaNet<float>;
template class QaNet<double>;

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[8] = {'E', 'C', 'H', 'O', 'Q', 'A', 'C', 'K'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                     static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
  out.write(b, 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("checkpoint truncated");
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::string get_string(std::istream& in, std::uint32_t size) {
  if (size > (1u << 26)) throw std::runtime_error("checkpoint string too long");
  std::string s(size, '\0');
  in.read(s.data(), size);
  if (!in) throw std::runtime_error("checkpoint truncated");
  return s;
}

}  // namespace

void save_checkpoint(const QaNetModel& model, const std::filesystem::path& path) {
  auto tensors = const_cast<QaNetModel&>(model).named_tensors();
  ojson manifest;
  manifest["format_version"] = kCheckpointVersion;
  manifest["dtype"] = "f32";
  manifest["model"] = ojson::parse(model.config().to_json());
  const std::string text = manifest.dump();

  std::ostringstream buf(std::ios::binary);
  buf.write(kMagic, sizeof kMagic);
  put_u32(buf, kCheckpointVersion);
  put_u32(buf, static_cast<std::uint32_t>(text.size()));
  buf.write(text.data(), static_cast<std::streamsize>(text.size()));
  put_u32(buf, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(buf, *tensor);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  const std::string bytes = buf.str();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

QaNetModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || !std::equal(magic, magic + 8, kMagic)) throw std::runtime_error("not a checkpoint: " + path.string());
  const std::uint32_t version = get_u32(in);
  if (version != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  const auto manifest = ojson::parse(get_string(in, get_u32(in)));
  if (manifest.at("dtype") != "f32") throw std::runtime_error("unsupported checkpoint dtype");
  QaNetModel model(ModelConfig::from_json(manifest.at("model").dump()), SeededRng(0));
  auto tensors = model.named_tensors();
  const std::uint32_t count = get_u32(in);
  if (count != tensors.size())
    throw std::runtime_error("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                             std::to_string(tensors.size()));
  for (auto& [name, tensor] : tensors) {
    const std::string stored = get_string(in, get_u32(in));
    if (stored != name) throw std::runtime_error("checkpoint tensor '" + stored + "' where '" + name + "' expected");
    Tensor<float> t = read_tensor<float>(in);
    if (t.shape() != tensor->shape())
      throw std::runtime_error("checkpoint tensor " + name + " has shape " + shape_string(t.shape()) + ", expected " +
                               shape_string(tensor->shape()));
    *tensor = std::move(t);
  }
  if (in.peek() != std::char_traits<char>::eof()) throw std::runtime_error("trailing bytes in checkpoint");
  return model;
}

std::string checkpoint_id(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::uint64_t h = kFnvOffset;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    h = fnv1a(h, buf, static_cast<std::size_t>(in.gcount()));
  }
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = digits[h & 0xF];
  return out;
}

}  // namespace echoqa
