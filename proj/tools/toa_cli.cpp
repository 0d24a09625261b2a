// Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <Eigen/Core>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "toa/checkpoint.hpp"
#include "toa/config.hpp"
#include "toa/data.hpp"
#include "toa/evaluation.hpp"
#include "toa/gradcheck.hpp"
#include "toa/sampler.hpp"
#include "toa/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0, kExitUsage = 1, kExitRuntime = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Everything in this tool runs on one thread; TOA_THREADS only caps the GEMM backend.
void apply_thread_limit() {
  const char* v = std::getenv("TOA_THREADS");
  if (!v || !*v) return;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw UsageError("TOA_THREADS must be a positive integer");
  Eigen::setNbThreads(static_cast<int>(n));
}

toa::Dataset dataset_for(const toa::RunConfig& run, const std::string& manifest) {
  if (!manifest.empty()) return toa::read_manifest(manifest);
  return toa::make_dataset(run.data);
}

void progress_line(const char* what, std::size_t done, std::size_t total, double loss = -1) {
  if (loss >= 0)
    std::fprintf(stderr, "\r%s %zu/%zu loss %.4f", what, done, total, loss);
  else
    std::fprintf(stderr, "\r%s %zu/%zu", what, done, total);
  if (done == total) std::fputc('\n', stderr);
}

// -------------------------------------------------------------------------

struct DatasetArgs {
  std::uint64_t seed = 7;
  std::size_t train = 2000, test = 200, pretrain = 20000;
  std::string out;
};

int run_dataset_gen(const DatasetArgs& a) {
  toa::DatasetConfig cfg{a.seed, a.train, a.test, a.pretrain};
  const auto d = toa::make_dataset(cfg);
  const auto hash = toa::write_dataset(a.out, d, a.seed);
  const json snapshot = {{"seed", cfg.seed}, {"train", cfg.train}, {"test", cfg.test}, {"pretrain", cfg.pretrain}};
  toa::write_text(fs::path(a.out) / "dataset_config.json", snapshot.dump(2) + "\n");
  std::cout << json{{"manifest", (fs::path(a.out) / "manifest.jsonl").string()}, {"manifest_sha256", hash}}.dump()
            << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::string config, stage = "pretrain", out, resume, manifest;
  bool force = false;
  std::optional<std::size_t> steps;
};

int run_train(const TrainArgs& a) {
  auto run = a.config.empty() ? toa::run_config_from_json(json::object()) : toa::load_run_config(a.config);
  const auto stage = toa::parse_stage(a.stage);
  auto& cfg = stage == toa::Stage::pretrain ? run.pretrain : run.finetune;
  if (a.steps) cfg.steps = *a.steps;
  const auto data = dataset_for(run, a.manifest);

  toa::TryOnModel<float> model(run.model);
  if (!a.resume.empty()) toa::apply_checkpoint(model, toa::load_checkpoint(a.resume), a.force);
  const auto& pool = stage == toa::Stage::pretrain && !data.pretrain.empty() ? data.pretrain : data.train;

  const fs::path out(a.out);
  fs::create_directories(out);
  // The snapshot is written first so an interrupted run can be replayed.
  toa::write_text(out / "resolved_config.json", toa::to_json_value(run).dump(2) + "\n");
  const auto result = toa::train_stage(model, cfg, pool, [&](std::size_t step, double loss) {
    if ((step + 1) % 50 == 0 || step + 1 == cfg.steps) progress_line(a.stage.c_str(), step + 1, cfg.steps, loss);
  });
  const std::string stem = stage == toa::Stage::pretrain ? "pre" : "fine";
  const auto ckpt_path = out / (stem + ".toackpt");
  toa::save_checkpoint(toa::make_checkpoint(model, run, stage, cfg.steps), ckpt_path);
  toa::write_text(out / (stem + "_loss.csv"), result.log_csv);
  std::cout << json{{"checkpoint", ckpt_path.string()},
                    {"checkpoint_sha256", toa::sha256_hex(toa::serialize_checkpoint(toa::load_checkpoint(ckpt_path)))},
                    {"loss_log_sha256", toa::sha256_hex(result.log_csv)},
                    {"final_loss", result.losses.empty() ? 0.0 : result.losses.back()},
                    {"seconds", result.seconds}}
                   .dump()
            << "\n";
  return kExitOk;
}

struct SampleArgs {
  std::string ckpt, face, garment, caption, out, requests;
  std::optional<int> pose;
  std::optional<double> scale, guidance;
  std::optional<std::size_t> steps;
  std::uint64_t seed = 0;
  bool force = false;
};

int run_sample(const SampleArgs& a) {
  const auto ck = toa::load_checkpoint(a.ckpt);
  const auto run = toa::run_config_of(ck);
  toa::TryOnModel<float> model(run.model);
  toa::apply_checkpoint(model, ck, a.force);

  toa::GenerationRequest defaults;
  defaults.steps = a.steps.value_or(run.sample.steps);
  defaults.guidance = a.guidance.value_or(run.sample.guidance);
  defaults.image_scale = a.scale.value_or(run.sample.image_scale);
  defaults.seed = a.seed;

  std::vector<toa::RequestLine> lines;
  if (!a.requests.empty()) {
    lines = toa::read_request_file(a.requests, defaults);
  } else {
    if (a.face.empty() || a.garment.empty() || a.out.empty())
      throw UsageError("sample needs --face, --garment and --out (or --requests)");
    toa::RequestLine line;
    line.request = defaults;
    line.request.face = toa::read_ppm(a.face);
    line.request.garment = toa::read_ppm(a.garment);
    line.request.caption = a.caption;
    if (a.pose) {
      if (*a.pose < 0 || *a.pose >= toa::kNumPoses) throw UsageError("--pose must be in [0, 3]");
      line.request.pose = toa::pose_keypoints(*a.pose);
    }
    line.request.validate();
    line.out = a.out;
    lines.push_back(std::move(line));
  }
  json outputs = json::array();
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto img = toa::generate(model, lines[i].request);
    std::string path = lines[i].out;
    if (path.empty()) path = (fs::path(a.out.empty() ? "." : a.out) / ("sample_" + std::to_string(i) + ".ppm")).string();
    if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
    toa::write_ppm(path, img);
    outputs.push_back({{"out", path}, {"sha256", toa::image_hash(img)}});
    progress_line("sample", i + 1, lines.size());
  }
  std::cout << json{{"samples", outputs}}.dump() << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string ckpt, protocol = "unpaired", manifest, csv;
  std::optional<std::size_t> n, steps;
  std::optional<std::uint64_t> seed;
  std::optional<double> guidance;
  bool with_pose = false, with_caption = false, force = false;
};

int run_eval(const EvalArgs& a) {
  const auto ck = toa::load_checkpoint(a.ckpt);
  const auto run = toa::run_config_of(ck);
  toa::TryOnModel<float> model(run.model);
  toa::apply_checkpoint(model, ck, a.force);
  const auto data = dataset_for(run, a.manifest);

  toa::EvalOptions opt;
  opt.n = a.n.value_or(run.eval.n);
  opt.seed = a.seed.value_or(run.eval.seed);
  opt.steps = a.steps.value_or(run.sample.steps);
  opt.guidance = a.guidance.value_or(run.sample.guidance);
  opt.image_scale = run.sample.image_scale;
  opt.with_pose = a.with_pose;
  opt.with_caption = a.with_caption;
  const auto progress = [&](std::size_t done) { progress_line("eval", done, std::min(opt.n, data.test.size())); };
  toa::EvalReport report;
  if (a.protocol == "paired")
    report = toa::run_paired_eval(model, data.test, opt, progress);
  else if (a.protocol == "unpaired")
    report = toa::run_unpaired_eval(model, data.test, opt, progress);
  else
    throw UsageError("--protocol must be paired or unpaired");
  if (!a.csv.empty()) toa::write_text(a.csv, toa::eval_csv_header() + toa::eval_csv_row(report));
  std::cout << toa::to_json_value(report).dump(2) << "\n";
  return kExitOk;
}

struct GradcheckArgs {
  std::uint64_t seed = 1;
  int shapes = 10;
};

int run_gradcheck(const GradcheckArgs& a) {
  bool ok = true;
  json ops = json::array();
  for (const auto& r : toa::run_op_gradient_suite(a.seed, a.shapes)) {
    ops.push_back({{"op", r.name}, {"rel_error", r.rel_error}, {"passed", r.passed}});
    ok = ok && r.passed;
  }
  const auto full = toa::check_toa_loss_gradient(a.seed);
  const bool full_ok = full.rel_error < 1e-4;
  std::cout << json{{"ops", ops},
                    {"toa_loss", {{"rel_error", full.rel_error}, {"probes", full.probes}, {"passed", full_ok}}},
                    {"passed", ok && full_ok}}
                   .dump(2)
            << "\n";
  return ok && full_ok ? kExitOk : kExitRuntime;
}

int run_inspect(const std::string& path) {
  const auto ck = toa::load_checkpoint(path);
  json tensors = json::array();
  std::size_t total = 0, trainable = 0;
  for (const auto& r : ck.records) {
    const auto n = toa::numel(r.shape);
    total += n;
    if (r.trainable) trainable += n;
    tensors.push_back({{"name", r.name}, {"shape", r.shape}, {"dtype", toa::dtype_name(r.dtype)}, {"trainable", r.trainable}});
  }
  std::cout << json{{"header", ck.header},
                    {"tensors", tensors},
                    {"parameters", total},
                    {"trainable_parameters", trainable}}
                   .dump(2)
            << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toy try-on latent diffusion: data, training, sampling and evaluation"};
  app.require_subcommand(1);

  DatasetArgs ds;
  auto* gen = app.add_subcommand("dataset-gen", "Render train/test splits and write manifest.jsonl");
  gen->add_option("--seed", ds.seed, "dataset seed");
  gen->add_option("--train", ds.train, "train split size");
  gen->add_option("--test", ds.test, "test split size");
  gen->add_option("--pretrain", ds.pretrain, "pretraining pool size (listed, not rendered)");
  gen->add_option("--out", ds.out, "output directory")->required();

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Run one training stage and write a checkpoint");
  train->add_option("--config", tr.config, "run config JSON (defaults if omitted)");
  train->add_option("--stage", tr.stage, "pretrain or finetune")->check(CLI::IsMember({"pretrain", "finetune"}));
  train->add_option("--out", tr.out, "output directory")->required();
  train->add_option("--resume", tr.resume, "checkpoint to initialize from");
  train->add_option("--manifest", tr.manifest, "read splits from a manifest instead of the config");
  train->add_option("--steps", tr.steps, "override the stage step count");
  train->add_flag("--force", tr.force, "load a checkpoint whose config hash differs");

  SampleArgs sa;
  auto* sample = app.add_subcommand("sample", "Generate try-on images from a checkpoint");
  sample->add_option("--ckpt", sa.ckpt, "checkpoint")->required();
  sample->add_option("--face", sa.face, "face crop (PPM)");
  sample->add_option("--garment", sa.garment, "garment image (PPM)");
  sample->add_option("--caption", sa.caption, "caption (empty = none)");
  sample->add_option("--pose", sa.pose, "pose id for keypoint conditioning");
  sample->add_option("--scale", sa.scale, "image-stream scale");
  sample->add_option("--guidance", sa.guidance, "classifier-free guidance scale");
  sample->add_option("--steps", sa.steps, "sampling steps");
  sample->add_option("--seed", sa.seed, "noise seed");
  sample->add_option("--out", sa.out, "output PPM (or directory with --requests)");
  sample->add_option("--requests", sa.requests, "JSONL batch of requests");
  sample->add_flag("--force", sa.force, "ignore a config hash mismatch");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint; prints an EvalReport JSON");
  eval->add_option("--ckpt", ev.ckpt, "checkpoint")->required();
  eval->add_option("--protocol", ev.protocol, "paired or unpaired")->check(CLI::IsMember({"paired", "unpaired"}));
  eval->add_option("--n", ev.n, "number of test specs");
  eval->add_option("--seed", ev.seed, "evaluation seed");
  eval->add_option("--steps", ev.steps, "sampling steps");
  eval->add_option("--guidance", ev.guidance, "guidance scale");
  eval->add_option("--manifest", ev.manifest, "read the test split from a manifest");
  eval->add_option("--csv", ev.csv, "also write a one-row CSV");
  eval->add_flag("--with-pose", ev.with_pose, "condition on the face donor's pose and score it");
  eval->add_flag("--with-caption", ev.with_caption, "pass the garment donor's caption");
  eval->add_flag("--force", ev.force, "ignore a config hash mismatch");

  GradcheckArgs gc;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every op and the full loss");
  grad->add_option("--seed", gc.seed, "seed");
  grad->add_option("--shapes", gc.shapes, "random shapes per op");

  std::string inspect_path;
  auto* inspect = app.add_subcommand("inspect-ckpt", "Print a checkpoint's header and tensor table");
  inspect->add_option("path", inspect_path, "checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    apply_thread_limit();
    if (*gen) return run_dataset_gen(ds);
    if (*train) return run_train(tr);
    if (*sample) return run_sample(sa);
    if (*eval) return run_eval(ev);
    if (*grad) return run_gradcheck(gc);
    if (*inspect) return run_inspect(inspect_path);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
