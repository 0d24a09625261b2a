#pragma once

// Denoising losses, conditioning dropout, Adam, and the two-stage training
// schedule (corrupted pretraining, then clean fine-tuning).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "toa/checkpoint.hpp"
#include "toa/config.hpp"
#include "toa/data.hpp"
#include "toa/gradcheck.hpp"
#include "toa/hash.hpp"
#include "toa/model.hpp"
#include "toa/schedule.hpp"

namespace toa {

/// w(t) * mean((eps_pred - eps)^2), averaged over the batch with one
/// timestep per element.
template <std::floating_point T>
Tensor<T> dsm_loss(const Tensor<T>& eps_pred, const Tensor<T>& eps, std::span<const std::size_t> t,
                   const NoiseSchedule& sched) {
  if (eps_pred.shape() != eps.shape()) {
    throw DimensionError("dsm_loss: prediction " + shape_str(eps_pred.shape()) + " vs target " + shape_str(eps.shape()));
  }
  if (t.size() != eps.size(0)) throw DimensionError("dsm_loss: one timestep per batch element required");
  const auto diff = sub(eps_pred, eps);
  bool unit = true;
  std::vector<T> w(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    sched.check_step(t[i]);
    w[i] = static_cast<T>(sched.weighting[t[i]]);
    unit = unit && w[i] == T(1);
  }
  auto sq = mul(diff, diff);
  if (unit) return mean(sq);
  Shape ws(eps.dim(), 1);
  ws[0] = t.size();
  return mean(mul(sq, Tensor<T>(ws, std::move(w))));
}

template <std::floating_point T>
Tensor<T> dsm_loss(const Tensor<T>& eps_pred, const Tensor<T>& eps, std::size_t t, const NoiseSchedule& sched) {
  const std::vector<std::size_t> ts(eps.size(0), t);
  return dsm_loss(eps_pred, eps, std::span<const std::size_t>(ts), sched);
}

/// Everything random in one loss evaluation, drawn up front so the loss
/// itself is a pure function of the model and these inputs.
template <std::floating_point T>
struct LossInputs {
  Tensor<T> x0;
  std::vector<std::size_t> t;
  Tensor<T> eps;
  ConditionBatch cond;
};

struct DropoutRates {
  double face = 0.1, garment = 0.1, text = 0.1, pose = 0.5;
};

inline DropoutRates dropout_rates(const TrainConfig& c) {
  return {c.p_drop_face, c.p_drop_garment, c.p_drop_text, c.p_drop_pose};
}

/// Per element, in this order: t ~ U{0..T-1}, then the face, garment, text
/// and pose coins. The noise tensor is drawn last.
template <std::floating_point T>
LossInputs<T> draw_loss_inputs(const std::vector<TrainingSample>& samples, const DropoutRates& rates,
                               const NoiseSchedule& sched, Rng& rng) {
  if (samples.empty()) throw DimensionError("draw_loss_inputs: empty batch");
  LossInputs<T> in;
  std::vector<Image> full;
  std::uniform_int_distribution<std::size_t> step(0, sched.steps - 1);
  for (const auto& s : samples) {
    full.push_back(s.full_image);
    in.cond.faces.push_back(s.face_crop);
    in.cond.garments.push_back(s.garment_image);
    in.cond.captions.push_back(s.caption);
    in.cond.poses.push_back(s.keypoints);
    in.t.push_back(step(rng));
    in.cond.drop_face.push_back(coin(rng, rates.face));
    in.cond.drop_garment.push_back(coin(rng, rates.garment));
    in.cond.drop_text.push_back(coin(rng, rates.text));
    in.cond.drop_pose.push_back(coin(rng, rates.pose));
  }
  in.x0 = encode_latent<T>(full);
  in.eps = randn<T>(in.x0.shape(), rng);
  return in;
}

/// Full try-on objective: noisy target, conditioning through the adapter
/// and the reference net, DSM against the drawn noise.
template <std::floating_point T>
Tensor<T> toa_loss(const TryOnModel<T>& model, const LossInputs<T>& in) {
  const auto zt = forward_sample(in.x0, std::span<const std::size_t>(in.t), in.eps, model.schedule);
  const auto pred = model.predict(zt, in.t, model.condition(in.cond));
  return dsm_loss(pred, in.eps, std::span<const std::size_t>(in.t), model.schedule);
}

/// The text-conditioned objective: toa_loss with both image streams (and
/// with them the reference features) forced off.
template <std::floating_point T>
Tensor<T> ldm_loss(const TryOnModel<T>& model, LossInputs<T> in) {
  std::fill(in.cond.drop_face.begin(), in.cond.drop_face.end(), true);
  std::fill(in.cond.drop_garment.begin(), in.cond.drop_garment.end(), true);
  return toa_loss(model, in);
}

/// The unconditional path: the null conditioning fed straight to the net.
template <std::floating_point T>
Tensor<T> unconditional_loss(const TryOnModel<T>& model, const LossInputs<T>& in) {
  const auto zt = forward_sample(in.x0, std::span<const std::size_t>(in.t), in.eps, model.schedule);
  const auto pred = model.predict(zt, in.t, model.null_condition(in.t.size()));
  return dsm_loss(pred, in.eps, std::span<const std::size_t>(in.t), model.schedule);
}

/// Adam with bias correction over a fixed parameter list.
template <std::floating_point T>
class Adam {
 public:
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  explicit Adam(nn::ParamList<T> params) : params_(std::move(params)) {
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.numel(), 0.0);
      v_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  std::size_t steps() const { return step_; }
  const nn::ParamList<T>& params() const { return params_; }
  const std::vector<double>& first_moment(std::size_t i) const { return m_.at(i); }
  const std::vector<double>& second_moment(std::size_t i) const { return v_.at(i); }

  void step(double lr) {
    for (const auto& p : params_) {
      if (!p.tensor.has_grad()) throw ContractError("adam_step: parameter '" + p.name + "' has no gradient");
    }
    ++step_;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto tensor = params_[i].tensor;
      const auto g = tensor.grad();
      auto w = tensor.mutable_data();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = g[k];
        m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
        v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
        const double mhat = m[k] / c1, vhat = v[k] / c2;
        w[k] = static_cast<T>(w[k] - lr * mhat / (std::sqrt(vhat) + eps));
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  nn::ParamList<T> params_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t step_ = 0;
};

/// Exponential moving average of the trainable tensors.
template <std::floating_point T>
class Ema {
 public:
  Ema(const nn::ParamList<T>& params, double decay) : decay_(decay) {
    for (const auto& p : params) shadow_.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  }
  void update(const nn::ParamList<T>& params) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto w = params[i].tensor.data();
      for (std::size_t k = 0; k < w.size(); ++k) shadow_[i][k] = decay_ * shadow_[i][k] + (1.0 - decay_) * w[k];
    }
  }
  void copy_to(nn::ParamList<T>& params) const {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto w = params[i].tensor.mutable_data();
      for (std::size_t k = 0; k < w.size(); ++k) w[k] = static_cast<T>(shadow_[i][k]);
    }
  }

 private:
  double decay_;
  std::vector<std::vector<double>> shadow_;
};

/// One row of the loss log. Values are printed with enough digits to
/// round-trip, so the log hash pins the whole trajectory.
inline std::string loss_log_row(std::size_t step, Stage stage, double loss, double lr) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%zu,%s,%.9g,%.9g\n", step, stage_name(stage).c_str(), loss, lr);
  return buf;
}

inline constexpr const char* kLossLogHeader = "step,stage,loss,lr\n";

struct StageResult {
  std::vector<double> losses;
  std::string log_csv;  // header plus one row per step
  double seconds = 0;
};

using ProgressFn = std::function<void(std::size_t step, double loss)>;

/// Renders a training batch. Separate from the noise stream so changing the
/// diffusion draws never perturbs which samples are seen.
inline std::vector<TrainingSample> draw_training_batch(const std::vector<FigureSpec>& corpus, const TrainConfig& cfg,
                                                       Rng& data_rng) {
  if (corpus.empty()) throw DataError("training corpus is empty");
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  std::vector<TrainingSample> batch;
  for (std::size_t b = 0; b < cfg.batch_size; ++b) {
    auto s = make_sample(corpus[pick(data_rng)], data_rng, cfg.max_expand_frac);
    if (cfg.corrupt) s = corrupt_stage1(std::move(s), data_rng, cfg.corruption);
    batch.push_back(std::move(s));
  }
  return batch;
}

/// Trains every trainable tensor of `model` in place for `cfg.steps` steps.
template <std::floating_point T>
StageResult train_stage(TryOnModel<T>& model, const TrainConfig& cfg, const std::vector<FigureSpec>& corpus,
                        const ProgressFn& progress = {}) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  Rng data_rng(split_seed(cfg.seed, "data"));
  Rng noise_rng(split_seed(cfg.seed, "noise"));
  auto params = model.trainable();
  Adam<T> adam(params);
  std::optional<Ema<T>> ema;
  if (cfg.ema) ema.emplace(params, cfg.ema_decay);
  const auto rates = dropout_rates(cfg);

  StageResult result;
  result.log_csv = kLossLogHeader;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto batch = draw_training_batch(corpus, cfg, data_rng);
    const auto inputs = draw_loss_inputs<T>(batch, rates, model.schedule, noise_rng);
    Tape<T>::active().clear();
    adam.zero_grad();
    auto loss = toa_loss(model, inputs);
    loss.backward();
    Tape<T>::active().clear();
    adam.step(cfg.learning_rate);
    if (ema) ema->update(params);
    const double value = static_cast<double>(loss.item());
    result.losses.push_back(value);
    result.log_csv += loss_log_row(step, cfg.stage, value, cfg.learning_rate);
    if (progress) progress(step, value);
  }
  if (ema) ema->copy_to(params);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

struct TwoStageResult {
  Checkpoint pretrain_checkpoint, finetune_checkpoint;
  StageResult pretrain, finetune;
};

/// Stage 1 from scratch on the corrupted pretraining pool, then stage 2 on
/// the clean training split starting from a reload of the stage-1
/// checkpoint. With `skip_pretrain` stage 2 starts cold from the init.
template <std::floating_point T>
TwoStageResult run_two_stage(const RunConfig& run, const Dataset& data, bool skip_pretrain = false,
                             const ProgressFn& progress = {}) {
  TwoStageResult r;
  TryOnModel<T> model(run.model);
  if (!skip_pretrain) {
    const auto& pool = data.pretrain.empty() ? data.train : data.pretrain;
    r.pretrain = train_stage(model, run.pretrain, pool, progress);
    r.pretrain_checkpoint = make_checkpoint(model, run, Stage::pretrain, run.pretrain.steps);
    // Reload through the file format so stage 2 sees exactly what was saved.
    TryOnModel<T> resumed(run.model);
    apply_checkpoint(resumed, parse_checkpoint(serialize_checkpoint(r.pretrain_checkpoint)));
    model = std::move(resumed);
  }
  r.finetune = train_stage(model, run.finetune, data.train, progress);
  r.finetune_checkpoint = make_checkpoint(model, run, Stage::finetune, run.finetune.steps);
  return r;
}

/// Smallest model that still exercises every block: used for gradient
/// checks and fast tests.
inline ModelConfig tiny_model_config() {
  ModelConfig c;
  c.encoder.width = 16;
  c.encoder.blocks = 1;
  c.encoder.heads = 2;
  c.encoder.input_res = 8;
  c.adapter.image_width = 16;
  c.adapter.text_width = 16;
  c.adapter.tokens = 2;
  c.adapter.depth = 1;
  c.adapter.heads = 2;
  c.unet.widths = {4, 8, 8};
  c.unet.time_width = 8;
  c.unet.context_width = 16;
  c.unet.heads = 2;
  c.unet.groups = 2;
  return c;
}

struct ModelGradCheck {
  double rel_error = 0;
  std::size_t probes = 0;
  std::size_t tensors = 0;
};

/// Backprop through the whole try-on loss versus central differences, in
/// double, on one sample. `probes_per_tensor` random coordinates of every
/// trainable tensor are compared; the error is over the stacked vectors.
inline ModelGradCheck check_toa_loss_gradient(std::uint64_t seed, std::size_t probes_per_tensor = 2, double eps = 1e-5) {
  auto cfg = tiny_model_config();
  cfg.init_seed = seed;
  TryOnModel<double> model(cfg);
  Rng rng(split_seed(seed, "gradcheck"));
  const auto sample = make_sample(FigureSpec::from_index(std::uniform_int_distribution<std::uint64_t>(
                                      0, FigureSpec::space_size() - 1)(rng)),
                                  rng, 0.5);
  const auto inputs = draw_loss_inputs<double>({sample}, DropoutRates{0, 0, 0, 0}, model.schedule, rng);

  Tape<double>::active().clear();
  auto params = model.trainable();
  for (auto& p : params) p.tensor.zero_grad();
  toa_loss(model, inputs).backward();
  Tape<double>::active().clear();

  ModelGradCheck out;
  std::vector<double> analytic, numeric;
  NoGradGuard no_grad;
  for (auto& p : params) {
    auto values = p.tensor.mutable_data();
    const auto grad = p.tensor.grad();
    std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
    for (std::size_t k = 0; k < probes_per_tensor; ++k) {
      const std::size_t i = pick(rng);
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = toa_loss(model, inputs).item();
      values[i] = saved - eps;
      const double down = toa_loss(model, inputs).item();
      values[i] = saved;
      analytic.push_back(grad.empty() ? 0.0 : grad[i]);
      numeric.push_back((up - down) / (2 * eps));
    }
    ++out.tensors;
  }
  out.probes = analytic.size();
  out.rel_error = relative_error<double>(analytic, numeric);
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write " + path.string());
  out << text;
}

}  // namespace toa
