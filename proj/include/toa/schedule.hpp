#pragma once

// Discrete variance-preserving noise schedule, the forward perturbation
// kernel x_t = a_t x_0 + sigma_t eps, and the ancestral reverse step.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "toa/tensor.hpp"

namespace toa {

enum class ScheduleKind { linear };
enum class PosteriorVariance { beta_tilde, beta };

struct NoiseSchedule {
  std::size_t steps = 0;
  std::vector<double> beta;
  std::vector<double> alpha_bar;
  std::vector<double> a;      // sqrt(alpha_bar)
  std::vector<double> sigma;  // sqrt(1 - alpha_bar)
  std::vector<double> posterior_var;
  std::vector<double> weighting;
  PosteriorVariance mode = PosteriorVariance::beta_tilde;

  /// Fills every derived array from per-step variances.
  static NoiseSchedule from_betas(std::vector<double> betas, PosteriorVariance mode = PosteriorVariance::beta_tilde) {
    NoiseSchedule s;
    s.steps = betas.size();
    s.mode = mode;
    s.beta = std::move(betas);
    s.alpha_bar.resize(s.steps);
    s.a.resize(s.steps);
    s.sigma.resize(s.steps);
    s.posterior_var.resize(s.steps);
    s.weighting.assign(s.steps, 1.0);
    double prod = 1.0;
    for (std::size_t t = 0; t < s.steps; ++t) {
      if (!(s.beta[t] >= 0.0 && s.beta[t] < 1.0)) throw ConfigError("schedule: beta must lie in [0, 1)");
      prod *= 1.0 - s.beta[t];
      s.alpha_bar[t] = prod;
      s.a[t] = std::sqrt(prod);
      s.sigma[t] = std::sqrt(1.0 - prod);
    }
    for (std::size_t t = 0; t < s.steps; ++t) {
      if (mode == PosteriorVariance::beta) {
        s.posterior_var[t] = s.beta[t];
      } else if (t == 0 || s.alpha_bar[t] == 1.0) {
        s.posterior_var[t] = 0.0;
      } else {
        s.posterior_var[t] = (1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]) * s.beta[t];
      }
    }
    return s;
  }

  void check_step(std::size_t t) const {
    if (t >= steps) {
      throw RangeError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps) + ")");
    }
  }
};

/// Linear betas from 1e-4 to 0.02, rescaled by 1000/T so short schedules
/// reach roughly the same terminal noise level as the 1000-step original.
inline NoiseSchedule make_schedule(std::size_t steps, ScheduleKind kind = ScheduleKind::linear,
                                   PosteriorVariance mode = PosteriorVariance::beta_tilde) {
  if (steps < 2) throw ConfigError("schedule needs at least 2 steps, got " + std::to_string(steps));
  std::vector<double> betas(steps);
  switch (kind) {
    case ScheduleKind::linear: {
      const double rescale = 1000.0 / static_cast<double>(steps);
      const double lo = 1e-4 * rescale, hi = 0.02 * rescale;
      for (std::size_t t = 0; t < steps; ++t) {
        const double b = lo + (hi - lo) * static_cast<double>(t) / static_cast<double>(steps - 1);
        betas[t] = std::clamp(b, 1e-12, 1.0 - 1e-6);
      }
      break;
    }
  }
  return NoiseSchedule::from_betas(std::move(betas), mode);
}

/// a_t x0 + sigma_t eps for a single timestep.
template <std::floating_point T>
Tensor<T> forward_sample(const Tensor<T>& x0, std::size_t t, const Tensor<T>& eps, const NoiseSchedule& sched) {
  sched.check_step(t);
  if (x0.shape() != eps.shape()) {
    throw DimensionError("forward_sample: x0 " + shape_str(x0.shape()) + " vs eps " + shape_str(eps.shape()));
  }
  return add(scale(x0, static_cast<T>(sched.a[t])), scale(eps, static_cast<T>(sched.sigma[t])));
}

/// Per-element timesteps along the leading (batch) axis.
template <std::floating_point T>
Tensor<T> forward_sample(const Tensor<T>& x0, std::span<const std::size_t> t, const Tensor<T>& eps,
                         const NoiseSchedule& sched) {
  if (x0.shape() != eps.shape()) {
    throw DimensionError("forward_sample: x0 " + shape_str(x0.shape()) + " vs eps " + shape_str(eps.shape()));
  }
  if (t.size() != x0.size(0)) throw DimensionError("forward_sample: one timestep per batch element required");
  Shape coef_shape(x0.dim(), 1);
  coef_shape[0] = t.size();
  std::vector<T> a(t.size()), s(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    sched.check_step(t[i]);
    a[i] = static_cast<T>(sched.a[t[i]]);
    s[i] = static_cast<T>(sched.sigma[t[i]]);
  }
  return add(mul(x0, Tensor<T>(coef_shape, std::move(a))), mul(eps, Tensor<T>(coef_shape, std::move(s))));
}

/// One ancestral step x_t -> x_{t-1}. `noise` is ignored at t = 0.
template <std::floating_point T>
Tensor<T> reverse_step(const Tensor<T>& xt, std::size_t t, const Tensor<T>& eps_pred, const Tensor<T>& noise,
                       const NoiseSchedule& sched) {
  sched.check_step(t);
  if (xt.shape() != eps_pred.shape() || xt.shape() != noise.shape()) {
    throw DimensionError("reverse_step: shapes differ " + shape_str(xt.shape()) + ", " + shape_str(eps_pred.shape()) +
                         ", " + shape_str(noise.shape()));
  }
  const double b = sched.beta[t];
  const double eps_coef = b == 0.0 ? 0.0 : b / sched.sigma[t];
  const double inv_sqrt_alpha = 1.0 / std::sqrt(1.0 - b);
  const T ce = static_cast<T>(eps_coef * inv_sqrt_alpha);
  const T cx = static_cast<T>(inv_sqrt_alpha);
  const auto& x = xt.data();
  const auto& e = eps_pred.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = cx * x[i] - ce * e[i];
  if (t > 0 && sched.posterior_var[t] > 0.0) {
    const T cn = static_cast<T>(std::sqrt(sched.posterior_var[t]));
    const auto& n = noise.data();
    for (std::size_t i = 0; i < x.size(); ++i) out[i] += cn * n[i];
  }
  detail::check_finite(out, "reverse_step");
  return Tensor<T>(xt.shape(), std::move(out));
}

/// Ancestral step through the clamped data estimate: x0 = (x_t - sigma eps) / a
/// is clipped to [lo, hi] and fed to the posterior mean. Without clipping this
/// equals reverse_step; with it, early high-noise errors cannot push the
/// trajectory outside the data range.
template <std::floating_point T>
Tensor<T> reverse_step_clipped(const Tensor<T>& xt, std::size_t t, const Tensor<T>& eps_pred, const Tensor<T>& noise,
                               const NoiseSchedule& sched, double lo = -1.0, double hi = 1.0) {
  sched.check_step(t);
  if (xt.shape() != eps_pred.shape() || xt.shape() != noise.shape()) {
    throw DimensionError("reverse_step_clipped: shapes differ " + shape_str(xt.shape()) + ", " +
                         shape_str(eps_pred.shape()) + ", " + shape_str(noise.shape()));
  }
  if (!(lo < hi)) throw ConfigError("reverse_step_clipped: empty clip range");
  const double ab = sched.alpha_bar[t], ab_prev = t > 0 ? sched.alpha_bar[t - 1] : 1.0, b = sched.beta[t];
  const double c0 = std::sqrt(ab_prev) * b / (1.0 - ab);
  const double cz = std::sqrt(1.0 - b) * (1.0 - ab_prev) / (1.0 - ab);
  const double inv_a = 1.0 / sched.a[t], sig = sched.sigma[t];
  const double cn = t > 0 ? std::sqrt(sched.posterior_var[t]) : 0.0;
  const auto& x = xt.data();
  const auto& e = eps_pred.data();
  const auto& n = noise.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = std::clamp((x[i] - sig * e[i]) * inv_a, lo, hi);
    out[i] = static_cast<T>(c0 * x0 + cz * x[i] + cn * n[i]);
  }
  detail::check_finite(out, "reverse_step_clipped");
  return Tensor<T>(xt.shape(), std::move(out));
}

}  // namespace toa
