// echoqa: synthesize data, train, evaluate, score clips and time inference.

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "echoqa/evaluation.hpp"
#include "echoqa/qanet.hpp"
#include "echoqa/synthgen.hpp"
#include "echoqa/text.hpp"
#include "echoqa/training.hpp"

namespace fs = std::filesystem;
using namespace echoqa;

namespace {

struct CliError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Advisory lock so two commands never write the same output directory.
class OutputLock {
 public:
  explicit OutputLock(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw CliError("cannot create output directory " + dir.string() + ": " + ec.message());
    const fs::path lock = dir / ".echoqa.lock";
    fd_ = ::open(lock.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw CliError("cannot open lock file " + lock.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw CliError("output directory " + dir.string() + " is in use by another echoqa command");
    }
  }
  ~OutputLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  int fd_ = -1;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CliError("cannot write " + path.string());
  out << text;
  if (!out) throw CliError("failed writing " + path.string());
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct Globals {
  std::uint64_t seed = 0;
  std::string out = "out";
};

// The effective configuration (flags over config file over defaults) of a
// subcommand, stored next to its outputs.
void echo_config(CLI::App& app, CLI::App* sub, const fs::path& out_dir) {
  std::istringstream lines(app.config_to_str(true, false));
  std::string line, kept;
  // Keep the global options and the options of the command that ran.
  const std::string prefix = sub->get_name() + ".";
  while (std::getline(lines, line)) {
    const auto eq = line.find('=');
    const bool global = eq != std::string::npos && line.find('.') > eq;
    if (global || line.rfind(prefix, 0) == 0) kept += line + "\n";
  }
  write_text(out_dir / (sub->get_name() + ".config.toml"), kept);
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
  std::size_t clips = 100;
  double split = 0.8;
  std::size_t size = 64;
  std::size_t frames = 3;
  double plax_fraction = 0.5;
};

int cmd_synth(const Globals& g, const SynthArgs& a, CLI::App& app, CLI::App* sub) {
  SynthDistribution dist;
  dist.height = dist.width = a.size;
  dist.frames = a.frames;
  dist.plax_fraction = a.plax_fraction;
  train_count(a.clips, a.split);  // validates before touching the output directory
  OutputLock lock(g.out);
  const auto split = generate_dataset(a.clips, dist, a.split, g.seed, g.out);
  echo_config(app, sub, g.out);
  auto count = [](const std::vector<AnnotationRecord>& rows) {
    std::array<std::size_t, 3> c{};
    for (const auto& r : rows) ++c[static_cast<std::size_t>(r.band)];
    return c;
  };
  const auto tr = count(split.train), te = count(split.test);
  std::cout << "clips: " << a.clips << " (train " << split.train.size() << ", test " << split.test.size() << ")\n"
            << "band      train  test\n";
  for (std::size_t b = 0; b < 3; ++b) {
    std::string name(band_name(static_cast<QualityBand>(b)));
    name.resize(8, ' ');
    std::cout << name << "  " << tr[b] << "  " << te[b] << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string data;
  std::string manifest;
  std::size_t epochs = 40;
  std::size_t batch = 32;
  double lr = 0.002;
  double momentum = 0.95;
  double decay = 0.1;
  std::size_t decay_every = 24;
  bool no_augment = false;
  std::size_t channel_divisor = 4;
  bool zero_head = false;
  std::size_t cv = 0;
  std::size_t checkpoint_every = 0;
};

fs::path resolve_manifest(const std::string& data, const std::string& manifest, const char* default_name) {
  if (!manifest.empty()) return manifest;
  if (!data.empty()) return fs::path(data) / default_name;
  throw CliError("either --data or --manifest is required");
}

std::vector<TrainingSample> read_samples(const fs::path& manifest) {
  const auto rows = read_manifest(manifest);
  if (rows.empty()) throw CliError("manifest " + manifest.string() + " has no clips");
  return load_samples(rows, manifest.parent_path());
}

int cmd_train(const Globals& g, const TrainArgs& a, CLI::App& app, CLI::App* sub) {
  const fs::path manifest = resolve_manifest(a.data, a.manifest, "train.jsonl");
  const auto samples = read_samples(manifest);
  const Shape& shape = samples.front().clip.shape();
  const InputSpec input{shape[0], shape[1], shape[2], shape[3]};
  ModelConfig mc = ModelConfig::reduced(input, a.channel_divisor);
  mc.zero_head = a.zero_head;

  TrainConfig tc;
  tc.epochs = a.epochs;
  tc.batch_size = a.batch;
  tc.seed = splitmix64(g.seed);
  tc.optimizer = {a.lr, a.momentum, a.decay, a.decay_every};
  tc.augment = !a.no_augment;
  if (a.cv) tc.folds = a.cv;
  tc.validate();

  OutputLock lock(g.out);
  const fs::path out(g.out);
  echo_config(app, sub, out);
  std::ofstream log(out / "train_log.jsonl", std::ios::binary | std::ios::trunc);
  std::ofstream history(out / "loss_history.jsonl", std::ios::binary | std::ios::trunc);
  if (!log || !history) throw CliError("cannot write training logs in " + out.string());
  QaNetModel model(mc, SeededRng(g.seed));
  TrainHooks hooks;
  hooks.on_batch = [&](const BatchLog& b) {
    log << JsonLine()
               .field("epoch", b.epoch)
               .field("batch", b.batch)
               .fixed("loss", b.loss)
               .shortest("lr", b.learning_rate)
               .fixed("wall_seconds", b.wall_seconds, 3)
               .str()
        << '\n';
  };
  std::size_t fold = 0;
  hooks.on_epoch = [&](std::size_t epoch, double loss) {
    JsonLine line;
    if (a.cv) line.field("fold", fold);
    history << line.field("epoch", epoch).fixed("loss", loss).str() << '\n';
    history.flush();
    std::cerr << (a.cv ? "fold " + std::to_string(fold) + " " : "") << "epoch " << epoch + 1 << "/" << a.epochs
              << " loss " << format_fixed(loss) << '\n';
    if (!a.cv && a.checkpoint_every && (epoch + 1) % a.checkpoint_every == 0)
      save_checkpoint(model, out / ("model_epoch" + std::to_string(epoch + 1) + ".ckpt"));
    if (a.cv && epoch + 1 == a.epochs) ++fold;
  };

  if (a.cv) {
    if (a.epochs == 0) ++fold;
    const auto reports = cross_validate(samples, mc, tc, hooks);
    std::string text;
    for (const auto& r : reports) {
      text += r.to_json() + "\n";
      std::cout << "fold " << r.fold << ": validation " << r.validation_ids.size() << " clips, mean accuracy "
                << format_fixed(r.mean_accuracy, 2) << "%\n";
    }
    write_text(out / "cv_folds.jsonl", text);
    return 0;
  }
  const auto result = train(model, samples, tc, hooks);
  save_checkpoint(model, out / "model.ckpt");
  std::cout << "trained " << result.epoch_loss.size() << " epochs on " << samples.size() << " clips";
  if (!result.epoch_loss.empty()) std::cout << ", final loss " << format_fixed(result.epoch_loss.back());
  std::cout << "\ncheckpoint " << (out / "model.ckpt").string() << " (" << checkpoint_id(out / "model.ckpt") << ")\n";
  return 0;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string manifest;
};

int cmd_eval(const Globals& g, const EvalArgs& a, CLI::App& app, CLI::App* sub) {
  const QaNetModel model = load_checkpoint(a.checkpoint);
  const fs::path manifest = resolve_manifest(a.data, a.manifest, "test.jsonl");
  const auto samples = read_samples(manifest);
  const Tensor<double> pred = predict(model, samples);
  Tensor<double> truth({samples.size(), 4});
  std::vector<QualityBand> bands;
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (std::size_t k = 0; k < 4; ++k) truth[i * 4 + k] = samples[i].target[k];
    bands.push_back(samples[i].band);
    ids.push_back(samples[i].clip_id);
  }
  const EvalReport report = evaluate(pred, truth, bands);
  OutputLock lock(g.out);
  echo_config(app, sub, g.out);
  write_text(fs::path(g.out) / "eval_report.jsonl", report.to_records());
  write_text(fs::path(g.out) / "eval_errors.jsonl", per_sample_errors(pred, truth, ids, bands));
  std::cout << report.to_table();
  return 0;
}

// ---------------------------------------------------------------- infer

struct InferArgs {
  std::string checkpoint;
  std::string manifest;
  std::vector<std::string> frames;
  std::string clip_id = "clip";
  std::string dump_features;
  std::string timestamp;
};

int cmd_infer(const Globals& g, const InferArgs& a, CLI::App& app, CLI::App* sub) {
  const QaNetModel model = load_checkpoint(a.checkpoint);
  const std::string ckpt_id = checkpoint_id(a.checkpoint);
  const InputSpec& in = model.config().input;

  std::vector<std::pair<std::string, Tensor<float>>> clips;
  if (!a.manifest.empty()) {
    const fs::path m(a.manifest);
    for (const auto& row : read_manifest(m)) clips.emplace_back(row.clip_id, load_clip(row, m.parent_path()));
  } else if (!a.frames.empty()) {
    AnnotationRecord row;
    row.clip_id = a.clip_id;
    row.frames = a.frames;
    clips.emplace_back(a.clip_id, load_clip(row, ""));
  } else {
    throw CliError("either --manifest or --frames is required");
  }
  if (clips.empty()) throw CliError("no clips to score");
  for (const auto& [id, clip] : clips)
    if (clip.shape() != in.clip_shape())
      throw CliError("clip " + id + " has shape " + shape_string(clip.shape()) + " (frame count and size) but the model expects " +
                     shape_string(in.clip_shape()));

  bool dump = false;
  Attribute dump_stream = Attribute::visibility;
  std::size_t dump_layer = 0;
  if (!a.dump_features.empty()) {
    const auto comma = a.dump_features.find(',');
    if (comma == std::string::npos) throw CliError("--dump-features expects stream,layer");
    dump_stream = parse_attribute(a.dump_features.substr(0, comma));
    dump_layer = std::stoul(a.dump_features.substr(comma + 1));
    dump = true;
  }

  OutputLock lock(g.out);
  echo_config(app, sub, g.out);
  const std::string stamp = a.timestamp.empty() ? utc_timestamp() : a.timestamp;
  for (const auto& [id, clip] : clips) {
    const QualityScores s = model.forward_clip(clip);
    const ScoreSidecar sidecar = ScoreSidecar::from_scores(id, s, ckpt_id, stamp);
    write_text(fs::path(g.out) / (id + ".scores.json"), sidecar.to_line() + "\n");
    std::cout << sidecar.to_line() << '\n';
    if (dump) {
      const Tensor<float> fmap = model.dump_feature_map(clip, dump_stream, dump_layer);
      const fs::path path = fs::path(g.out) / (id + "." + std::string(attribute_name(dump_stream)) + ".conv" +
                                               std::to_string(dump_layer) + ".tensor");
      std::ofstream out(path, std::ios::binary | std::ios::trunc);
      write_tensor(out, fmap);
      if (!out) throw CliError("failed writing " + path.string());
    }
  }
  return 0;
}

// ---------------------------------------------------------------- bench

struct BenchArgs {
  std::string checkpoint;
  std::size_t size = 224;
  std::size_t frames = 3;
  std::size_t iters = 30;
  std::size_t warmup = 5;
  bool sequential = false;
};

int cmd_bench(const Globals& g, const BenchArgs& a, CLI::App& app, CLI::App* sub) {
  if (a.iters < kMinIterations) throw CliError("--iters must be at least " + std::to_string(kMinIterations));
  if (a.warmup < kMinWarmup) throw CliError("--warmup must be at least " + std::to_string(kMinWarmup));
  const QaNetModel model = a.checkpoint.empty()
                               ? QaNetModel(ModelConfig::standard({a.frames, 1, a.size, a.size}), SeededRng(g.seed))
                               : load_checkpoint(a.checkpoint);
  const InputSpec& in = model.config().input;
  SynthParams params;
  params.frames = in.frames;
  params.height = in.height;
  params.width = in.width;
  SeededRng rng(g.seed);
  const Tensor<float> clip = generate_clip(params, rng).clip.to_tensor();

  const LatencyReport report = benchmark_latency(model, clip, a.warmup, a.iters);
  OutputLock lock(g.out);
  echo_config(app, sub, g.out);
  write_text(fs::path(g.out) / "latency_report.jsonl", report.to_records());
  std::cout << report.to_table();
  const auto& headline = a.sequential ? report.combined_sequential : report.combined_parallel;
  std::cout << (a.sequential ? "sequential" : "parallel") << "-stream median: " << format_fixed(headline.median, 3)
            << " ms per frame\n";
  if (!report.valid) throw CliError("latency report invalid: " + report.invalid_reason);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Echocardiogram clip quality assessment: synthesize, train, evaluate, infer, bench"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML/INI file with option values; command line flags take precedence");
  Globals g;
  app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
  app.add_option("--out", g.out, "Output directory")->capture_default_str();

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic clip dataset");
  synth->add_option("--clips", sa.clips, "Number of clips")->capture_default_str();
  synth->add_option("--split", sa.split, "Training fraction")->capture_default_str();
  synth->add_option("--size", sa.size, "Frame width and height")->capture_default_str();
  synth->add_option("--frames", sa.frames, "Frames per clip")->capture_default_str();
  synth->add_option("--plax-fraction", sa.plax_fraction, "Share of PLAX views")->capture_default_str();

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "Train the four-stream model");
  trn->add_option("--data", ta.data, "Dataset directory (reads train.jsonl)");
  trn->add_option("--manifest", ta.manifest, "Training manifest");
  trn->add_option("--epochs", ta.epochs, "Epochs")->capture_default_str();
  trn->add_option("--batch", ta.batch, "Mini-batch size")->capture_default_str();
  trn->add_option("--lr", ta.lr, "Initial learning rate")->capture_default_str();
  trn->add_option("--momentum", ta.momentum, "Momentum")->capture_default_str();
  trn->add_option("--decay", ta.decay, "Learning-rate decay factor")->capture_default_str();
  trn->add_option("--decay-every", ta.decay_every, "Epochs between decays")->capture_default_str();
  trn->add_flag("--no-augment", ta.no_augment, "Disable augmentation");
  trn->add_option("--channel-divisor", ta.channel_divisor, "Divide conv widths by this (1 = full width)")
      ->capture_default_str();
  trn->add_flag("--zero-head", ta.zero_head, "Zero-initialize the output layers");
  trn->add_option("--cv", ta.cv, "Run k-fold cross validation instead of a single training run");
  trn->add_option("--checkpoint-every", ta.checkpoint_every, "Write a checkpoint every N epochs");

  EvalArgs ea;
  auto* evl = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  evl->add_option("--checkpoint", ea.checkpoint, "Checkpoint file")->required();
  evl->add_option("--data", ea.data, "Dataset directory (reads test.jsonl)");
  evl->add_option("--manifest", ea.manifest, "Evaluation manifest");

  InferArgs ia;
  auto* inf = app.add_subcommand("infer", "Score clips and write sidecar records");
  inf->add_option("--checkpoint", ia.checkpoint, "Checkpoint file")->required();
  inf->add_option("--manifest", ia.manifest, "Score every clip in a manifest");
  inf->add_option("--frames", ia.frames, "Frame files of one clip, in order");
  inf->add_option("--clip-id", ia.clip_id, "Id for a clip given with --frames")->capture_default_str();
  inf->add_option("--dump-features", ia.dump_features, "Write a conv feature map: stream,layer (layer from 0)");
  inf->add_option("--timestamp", ia.timestamp, "Timestamp to record instead of the current time");

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "Time single-clip inference");
  bench->add_option("--checkpoint", ba.checkpoint, "Checkpoint file (default: freshly initialized full model)");
  bench->add_option("--size", ba.size, "Frame size for the fresh model")->capture_default_str();
  bench->add_option("--frames", ba.frames, "Frames per clip for the fresh model")->capture_default_str();
  bench->add_option("--iters", ba.iters, "Timed iterations (at least 30)")->capture_default_str();
  bench->add_option("--warmup", ba.warmup, "Untimed warmup iterations (at least 5)")->capture_default_str();
  bench->add_flag("--sequential", ba.sequential, "Headline the one-thread stream timing");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.get_exit_code() ? e.get_exit_code() : 2;
  }

  try {
    if (synth->parsed()) return cmd_synth(g, sa, app, synth);
    if (trn->parsed()) return cmd_train(g, ta, app, trn);
    if (evl->parsed()) return cmd_eval(g, ea, app, evl);
    if (inf->parsed()) return cmd_infer(g, ia, app, inf);
    if (bench->parsed()) return cmd_bench(g, ba, app, bench);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (char& c : msg)
      if (c == '\n') c = ' ';
    std::cerr << "error: " << msg << '\n';
    return 1;
  }
  return 1;
}
