#include <sys/wait.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "doctest.h"
#include "echoqa/evaluation.hpp"
#include "echoqa/qanet.hpp"

using namespace echoqa;
namespace fs = std::filesystem;

namespace {

struct Run {
  int status;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

const fs::path& root() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "echoqa_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

Run run(const std::string& args) {
  const auto out = root() / "stdout.txt", err = root() / "stderr.txt";
  const std::string cmd = std::string(ECHOQA_CLI_PATH) + " " + args + " > " + out.string() + " 2> " + err.string();
  const int raw = std::system(cmd.c_str());
  return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, slurp(out), slurp(err)};
}

std::string p(const fs::path& path) { return path.string(); }

void require_single_error_line(const Run& r) {
  CHECK(r.status != 0);
  CHECK(r.err.rfind("error: ", 0) == 0);
  CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
}

std::string directory_digest(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != ".echoqa.lock" &&
        e.path().extension() != ".toml") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) all += fs::relative(f, dir).string() + "\n" + slurp(f);
  return all;
}

}  // namespace

TEST_CASE("synth is deterministic and splits 80/20") {
  const auto a = root() / "synth_a", b = root() / "synth_b";
  const std::string args = " synth --clips 20 --split 0.8 --size 32 --frames 2";
  REQUIRE(run("--seed 7 --out " + p(a) + args).status == 0);
  REQUIRE(run("--seed 7 --out " + p(b) + args).status == 0);
  CHECK(directory_digest(a) == directory_digest(b));
  const auto train = slurp(a / "train.jsonl"), test = slurp(a / "test.jsonl");
  CHECK(std::count(train.begin(), train.end(), '\n') == 16);
  CHECK(std::count(test.begin(), test.end(), '\n') == 4);
  CHECK(fs::exists(a / "synth.config.toml"));
  require_single_error_line(run("--out " + p(root() / "synth_bad") + " synth --clips 1"));
}

TEST_CASE("config file values apply unless a flag overrides them") {
  const auto cfg = root() / "run.toml";
  std::ofstream(cfg) << "seed=3\n[synth]\nclips=10\nsize=24\nframes=2\n";
  const auto a = root() / "cfg_a", b = root() / "cfg_b";
  REQUIRE(run("--config " + p(cfg) + " --out " + p(a) + " synth").status == 0);
  CHECK(std::count(std::istreambuf_iterator<char>(std::ifstream(a / "train.jsonl").rdbuf()), {}, '\n') == 8);
  REQUIRE(run("--config " + p(cfg) + " --out " + p(b) + " synth --clips 5").status == 0);
  const auto echo = slurp(b / "synth.config.toml");
  CHECK(echo.find("clips=5") != std::string::npos);
  CHECK(echo.find("seed=3") != std::string::npos);
}

TEST_CASE("train, eval and infer end to end") {
  const auto data = root() / "e2e_data", model = root() / "e2e_model";
  REQUIRE(run("--seed 1 --out " + p(data) + " synth --clips 12 --size 32 --frames 2").status == 0);
  const auto tr = run("--seed 2 --out " + p(model) + " train --data " + p(data) +
                      " --epochs 2 --batch 4 --channel-divisor 8");
  REQUIRE_MESSAGE(tr.status == 0, tr.err);
  const auto ckpt = model / "model.ckpt";
  CHECK_NOTHROW(load_checkpoint(ckpt));
  const auto history = slurp(model / "loss_history.jsonl");
  CHECK(std::count(history.begin(), history.end(), '\n') == 2);
  CHECK(fs::exists(model / "train_log.jsonl"));

  const auto ev = run("--out " + p(model) + " eval --checkpoint " + p(ckpt) + " --data " + p(data));
  REQUIRE_MESSAGE(ev.status == 0, ev.err);
  const auto report = slurp(model / "eval_report.jsonl");
  CHECK(std::count(report.begin(), report.end(), '\n') == 8);

  // The summary accuracy is re-derivable from the per-sample error dump.
  std::istringstream errors(slurp(model / "eval_errors.jsonl"));
  std::string line;
  double sum = 0;
  std::size_t n = 0;
  while (std::getline(errors, line)) {
    const auto j = nlohmann::json::parse(line);
    sum += std::abs(j.at("pred_vs").get<double>() - j.at("gt_vs").get<double>());
    ++n;
  }
  const auto summary = nlohmann::json::parse(report.substr(0, report.find('\n')));
  CHECK(std::abs(summary.at("accuracy").at(0).get<double>() - (1 - sum / static_cast<double>(n)) * 100) <= 5e-7);

  const auto out = root() / "e2e_infer";
  const std::string infer = "--out " + p(out) + " infer --checkpoint " + p(ckpt) + " --manifest " + p(data / "test.jsonl") +
                            " --timestamp 2026-01-01T00:00:00Z --dump-features clarity,1";
  REQUIRE(run(infer).status == 0);
  const auto id = nlohmann::json::parse(slurp(data / "test.jsonl").substr(0, slurp(data / "test.jsonl").find('\n')))
                      .at("clip_id")
                      .get<std::string>();
  const auto first = slurp(out / (id + ".scores.json"));
  REQUIRE(run(infer).status == 0);
  CHECK(slurp(out / (id + ".scores.json")) == first);
  const auto car = ScoreSidecar::parse(first);
  CHECK(car.checkpoint_id == checkpoint_id(ckpt));
  CHECK(std::abs(car.aggregate - (car.scores[0] + car.scores[1] + car.scores[2] + car.scores[3]) / 4) < 1e-12);
  std::ifstream fmap(out / (id + ".clarity.conv1.tensor"), std::ios::binary);
  CHECK(read_tensor<float>(fmap).rank() == 4);
}

TEST_CASE("zero learning rate and zero head") {
  const auto data = root() / "zero_data", model = root() / "zero_model";
  REQUIRE(run("--out " + p(data) + " synth --clips 8 --size 32 --frames 2").status == 0);
  REQUIRE(run("--seed 4 --out " + p(model) + " train --data " + p(data) +
              " --epochs 1 --batch 4 --lr 0 --zero-head --channel-divisor 8")
              .status == 0);
  auto trained = load_checkpoint(model / "model.ckpt");
  QaNetModel fresh(trained.config(), SeededRng(4));
  const auto a = trained.parameters(), b = fresh.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->value == b[i]->value);

  const auto out = root() / "zero_infer";
  REQUIRE(run("--out " + p(out) + " infer --checkpoint " + p(model / "model.ckpt") + " --manifest " +
              p(data / "test.jsonl"))
              .status == 0);
  for (const auto& e : fs::directory_iterator(out))
    if (e.path().string().ends_with(".scores.json")) {
      const auto car = ScoreSidecar::parse(slurp(e.path()));
      for (double s : car.scores) CHECK(s == 0.5);
      CHECK(car.aggregate == 0.5);
    }
}

TEST_CASE("cross validation writes one report per fold") {
  const auto data = root() / "cv_data", model = root() / "cv_model";
  REQUIRE(run("--out " + p(data) + " synth --clips 13 --size 32 --frames 2").status == 0);
  const auto r = run("--out " + p(model) + " train --data " + p(data) + " --cv 5 --epochs 1 --batch 2 --channel-divisor 8");
  REQUIRE_MESSAGE(r.status == 0, r.err);
  const auto folds = slurp(model / "cv_folds.jsonl");
  CHECK(std::count(folds.begin(), folds.end(), '\n') == 5);
}

TEST_CASE("error paths exit nonzero with one line") {
  const auto data = root() / "err_data";
  REQUIRE(run("--out " + p(data) + " synth --clips 4 --size 32 --frames 2").status == 0);
  std::ofstream(root() / "empty.jsonl").close();
  require_single_error_line(run("--out " + p(root() / "err") + " train --manifest " + p(root() / "empty.jsonl")));
  require_single_error_line(run("--out " + p(root() / "err") + " train"));
  require_single_error_line(run("--out " + p(root() / "err") + " eval --checkpoint " + p(root() / "nope.ckpt") +
                                " --data " + p(data)));
  require_single_error_line(run("--out " + p(root() / "err") + " bench --iters 5"));
  require_single_error_line(run("--out " + p(root() / "err") + " synth --clips abc"));
  require_single_error_line(run("--out " + p(root() / "err") + " frobnicate"));

  // A checkpoint for a different frame size is rejected before scoring.
  const auto model = root() / "err_model";
  REQUIRE(run("--out " + p(model) + " train --data " + p(data) + " --epochs 0 --channel-divisor 8").status == 0);
  const auto other = root() / "err_other";
  REQUIRE(run("--out " + p(other) + " synth --clips 4 --size 40 --frames 2").status == 0);
  require_single_error_line(run("--out " + p(root() / "err") + " eval --checkpoint " + p(model / "model.ckpt") +
                                " --data " + p(other)));
  require_single_error_line(run("--out " + p(root() / "err") + " infer --checkpoint " + p(model / "model.ckpt") +
                                " --manifest " + p(other / "test.jsonl")));
}
