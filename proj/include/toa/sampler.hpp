#pragma once

// Classifier-free-guided ancestral sampling. Conditioning (adapter tokens
// and reference features) is computed once per request batch and reused at
// every step; each request owns its RNG stream, so results do not depend on
// which other requests share the batch except through floating-point
// blocking in the batched kernels.

#include <algorithm>
#include <filesystem>
#include <set>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "toa/data.hpp"
#include "toa/model.hpp"
#include "toa/schedule.hpp"

namespace toa {

struct GenerationRequest {
  Image face;
  Image garment;
  std::string caption;          // empty = null text
  std::vector<Keypoint> pose;   // empty = no pose control
  bool drop_face = false;       // zero the face stream
  bool drop_garment = false;    // zero the garment stream and reference features
  double guidance = 3.0;
  double image_scale = 1.0;
  std::uint64_t seed = 0;
  std::size_t steps = 100;
  bool clip_x0 = true;          // clamp the data estimate to the latent range each step

  void validate() const {
    if (!std::isfinite(guidance) || guidance < 0) throw ConfigError("guidance scale must be finite and >= 0");
    if (!std::isfinite(image_scale)) throw ConfigError("image scale must be finite");
    if (face.channels != 3 || garment.channels != 3) throw FormatError("request images must have 3 channels");
    if (steps == 0) throw ConfigError("sampling needs at least one step");
  }
};

/// eps_uncond + g (eps_cond - eps_uncond).
template <std::floating_point T>
Tensor<T> cfg_noise(const Tensor<T>& eps_cond, const Tensor<T>& eps_uncond, double g) {
  if (eps_cond.shape() != eps_uncond.shape()) throw DimensionError("cfg_noise: branch shapes differ");
  if (g == 1.0) return eps_cond.detach();
  if (g == 0.0) return eps_uncond.detach();
  const auto c = eps_cond.data(), u = eps_uncond.data();
  std::vector<T> out(c.size());
  const T gt = static_cast<T>(g);
  for (std::size_t i = 0; i < c.size(); ++i) out[i] = u[i] + gt * (c[i] - u[i]);
  return Tensor<T>(eps_cond.shape(), std::move(out));
}

/// Per-element guidance scales, one per batch element.
template <std::floating_point T>
Tensor<T> cfg_noise(const Tensor<T>& eps_cond, const Tensor<T>& eps_uncond, const std::vector<double>& g) {
  if (eps_cond.shape() != eps_uncond.shape()) throw DimensionError("cfg_noise: branch shapes differ");
  if (g.size() != eps_cond.size(0)) throw DimensionError("cfg_noise: one guidance scale per element required");
  const std::size_t per = eps_cond.numel() / g.size();
  const auto c = eps_cond.data(), u = eps_uncond.data();
  std::vector<T> out(c.size());
  for (std::size_t b = 0; b < g.size(); ++b) {
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      out[i] = g[b] == 1.0 ? c[i] : g[b] == 0.0 ? u[i] : static_cast<T>(u[i] + g[b] * (c[i] - u[i]));
    }
  }
  return Tensor<T>(eps_cond.shape(), std::move(out));
}

/// A strided subsequence of a schedule for sampling with fewer steps: the
/// kept timesteps and the schedule whose betas chain their alpha_bar values.
/// With steps == T this is the original schedule.
struct SamplingPlan {
  std::vector<std::size_t> timesteps;  // model timestep for each plan step
  NoiseSchedule schedule;
};

inline SamplingPlan make_sampling_plan(const NoiseSchedule& sched, std::size_t steps) {
  if (steps == 0 || steps > sched.steps) {
    throw ConfigError("sampling steps must lie in [1, " + std::to_string(sched.steps) + "]");
  }
  SamplingPlan plan;
  if (steps == sched.steps) {
    for (std::size_t t = 0; t < steps; ++t) plan.timesteps.push_back(t);
    plan.schedule = sched;
    return plan;
  }
  for (std::size_t i = 0; i < steps; ++i) {
    const double pos = steps == 1 ? double(sched.steps - 1) : double(i) * double(sched.steps - 1) / double(steps - 1);
    plan.timesteps.push_back(static_cast<std::size_t>(std::lround(pos)));
  }
  std::vector<double> betas;
  double prev = 1.0;
  for (auto t : plan.timesteps) {
    betas.push_back(1.0 - sched.alpha_bar[t] / prev);
    prev = sched.alpha_bar[t];
  }
  plan.schedule = NoiseSchedule::from_betas(std::move(betas), sched.mode);
  return plan;
}

template <std::floating_point T>
ConditionBatch condition_batch(const std::vector<GenerationRequest>& reqs) {
  ConditionBatch b;
  for (const auto& r : reqs) {
    r.validate();
    b.faces.push_back(r.face);
    b.garments.push_back(r.garment);
    b.captions.push_back(r.caption);
    b.poses.push_back(r.pose);
    b.drop_face.push_back(r.drop_face);
    b.drop_garment.push_back(r.drop_garment);
  }
  b.resize_flags();
  return b;
}

/// Generates one image per request. Requests in one call must agree on the
/// step count; guidance and image scale may differ per request.
template <std::floating_point T>
std::vector<Image> generate_batch(const TryOnModel<T>& model, const std::vector<GenerationRequest>& reqs) {
  if (reqs.empty()) return {};
  NoGradGuard no_grad;
  const std::size_t B = reqs.size(), R = model.cfg.unet.resolution;
  const std::size_t steps = reqs.front().steps;
  for (const auto& r : reqs)
    if (r.steps != steps || r.clip_x0 != reqs.front().clip_x0)
      throw ConfigError("requests in one batch must share the step count and clipping mode");
  const auto plan = make_sampling_plan(model.schedule, steps);

  auto cond = model.condition(condition_batch<T>(reqs));
  const auto uncond = model.null_condition(B);
  std::vector<double> guidance;
  bool same_scale = true;
  for (const auto& r : reqs) {
    guidance.push_back(r.guidance);
    same_scale = same_scale && r.image_scale == reqs.front().image_scale;
  }
  if (!same_scale) throw ConfigError("requests in one batch must share the image scale");
  cond.image_scale = reqs.front().image_scale;

  std::vector<Rng> rngs;
  for (const auto& r : reqs) rngs.emplace_back(r.seed);
  const std::size_t per = 3 * R * R;
  auto draw = [&] {
    std::vector<T> v(B * per);
    for (std::size_t b = 0; b < B; ++b) {
      const auto n = randn<T>({1, 3, R, R}, rngs[b]);
      std::copy(n.data().begin(), n.data().end(), v.begin() + static_cast<std::ptrdiff_t>(b * per));
    }
    return Tensor<T>({B, 3, R, R}, std::move(v));
  };

  auto z = draw();
  for (std::size_t i = steps; i-- > 0;) {
    const std::vector<std::size_t> t(B, plan.timesteps[i]);
    const auto eps_c = model.predict(z, t, cond);
    const bool need_uncond = std::any_of(guidance.begin(), guidance.end(), [](double g) { return g != 1.0; });
    const auto eps = need_uncond ? cfg_noise(eps_c, model.predict(z, t, uncond), guidance) : eps_c;
    const auto noise = i > 0 ? draw() : Tensor<T>(z.shape(), T(0));
    z = reqs.front().clip_x0 ? reverse_step_clipped(z, i, eps, noise, plan.schedule)
                             : reverse_step(z, i, eps, noise, plan.schedule);
  }
  std::vector<Image> out;
  for (std::size_t b = 0; b < B; ++b) out.push_back(decode_latent(z, b));
  return out;
}

template <std::floating_point T>
Image generate(const TryOnModel<T>& model, const GenerationRequest& req) {
  return generate_batch(model, std::vector<GenerationRequest>{req}).front();
}

/// Same path as `generate`; kept as a separate entry point because the
/// keypoints are the one input the caller must supply in pose mode.
template <std::floating_point T>
Image generate_with_pose(const TryOnModel<T>& model, GenerationRequest req, std::vector<Keypoint> keypoints) {
  req.pose = std::move(keypoints);
  return generate(model, req);
}

/// One line of a batch request file. Image paths are relative to `base`.
/// Keys: face, garment (PPM paths), caption, pose_id or keypoints
/// ([[x, y, "head"|"body"], ...]), guidance, image_scale, seed, steps, out.
struct RequestLine {
  GenerationRequest request;
  std::string out;
};

inline RequestLine parse_request_line(const nlohmann::json& j, const std::filesystem::path& base, const GenerationRequest& defaults) {
  static const std::set<std::string> allowed{"face", "garment", "caption", "pose_id", "keypoints", "guidance",
                                             "image_scale", "seed", "steps", "out"};
  if (!j.is_object()) throw FormatError("request line is not a JSON object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw FormatError("request has unknown key '" + k + "'");
  if (!j.contains("face") || !j.contains("garment")) throw FormatError("request needs face and garment paths");
  RequestLine line;
  auto& r = line.request;
  r = defaults;
  r.face = read_ppm((base / j["face"].get<std::string>()).string());
  r.garment = read_ppm((base / j["garment"].get<std::string>()).string());
  r.caption = j.value("caption", std::string());
  if (j.contains("pose_id")) r.pose = pose_keypoints(j["pose_id"].get<int>());
  if (j.contains("keypoints")) {
    r.pose.clear();
    for (const auto& k : j["keypoints"]) {
      const auto group = k.at(2).get<std::string>();
      if (group != "head" && group != "body") throw FormatError("keypoint group must be head or body");
      r.pose.push_back({k.at(0).get<float>(), k.at(1).get<float>(), group == "head" ? KeypointGroup::head : KeypointGroup::body});
    }
  }
  r.guidance = j.value("guidance", r.guidance);
  r.image_scale = j.value("image_scale", r.image_scale);
  r.seed = j.value("seed", r.seed);
  r.steps = j.value("steps", r.steps);
  line.out = j.value("out", std::string());
  r.validate();
  return line;
}

inline std::vector<RequestLine> read_request_file(const std::filesystem::path& path, const GenerationRequest& defaults) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open request file " + path.string());
  std::vector<RequestLine> out;
  std::string text;
  std::size_t lineno = 0;
  while (std::getline(in, text)) {
    ++lineno;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse_request_line(nlohmann::json::parse(text), path.parent_path(), defaults));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace toa
