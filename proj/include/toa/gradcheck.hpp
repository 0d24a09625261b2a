#pragma once

// Central finite-difference oracle and the per-op gradient suite built on it.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "toa/rng.hpp"
#include "toa/tensor.hpp"

namespace toa {

/// d f / d x by central differences, one element at a time. `f` must be pure.
template <std::floating_point T, class F>
Tensor<T> finite_difference_gradient(F&& f, const Tensor<T>& x, T eps) {
  NoGradGuard no_grad;
  Tensor<T> probe = x.detach();
  std::vector<T> g(x.numel());
  auto values = probe.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const T saved = values[i];
    values[i] = saved + eps;
    const T up = f(probe).item();
    values[i] = saved - eps;
    const T down = f(probe).item();
    values[i] = saved;
    g[i] = (up - down) / (T(2) * eps);
  }
  return Tensor<T>(x.shape(), std::move(g));
}

/// ||a - b|| / (||a|| + ||b||), 0 when both vanish.
template <class T>
double relative_error(std::span<const T> a, std::span<const T> b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (double(a[i]) - double(b[i])) * (double(a[i]) - double(b[i]));
    na += double(a[i]) * double(a[i]);
    nb += double(b[i]) * double(b[i]);
  }
  const double denom = std::sqrt(na) + std::sqrt(nb);
  return denom == 0 ? 0.0 : std::sqrt(diff) / denom;
}

struct GradCheckResult {
  std::string name;
  double rel_error = 0;
  bool passed = false;
};

using TensorFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Contracts the output of `f` against a fixed random probe so every output
/// element contributes, then compares backward() against finite differences
/// for each input. Returns the worst relative error over all inputs.
inline double check_gradients(const TensorFn& f, std::vector<Tensor<double>> inputs, Rng& rng, double eps = 1e-5) {
  Tensor<double> probe;
  {
    NoGradGuard no_grad;
    probe = randn<double>(f(inputs).shape(), rng);
  }
  auto objective = [&](const std::vector<Tensor<double>>& in) { return sum(mul(f(in), probe)); };

  for (auto& t : inputs) t.set_requires_grad(true);
  Tape<double>::active().clear();
  objective(inputs).backward();

  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::vector<double> analytic(inputs[k].grad().begin(), inputs[k].grad().end());
    if (analytic.empty()) analytic.assign(inputs[k].numel(), 0.0);
    auto numeric = finite_difference_gradient<double>(
        [&](const Tensor<double>& xk) {
          auto copy = inputs;
          copy[k] = xk;
          return objective(copy);
        },
        inputs[k], eps);
    worst = std::max(worst, relative_error<double>(analytic, numeric.data()));
  }
  return worst;
}

namespace detail {
inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}
}  // namespace detail

/// Runs every differentiable op on `shapes_per_op` random shapes each.
inline std::vector<GradCheckResult> run_op_gradient_suite(std::uint64_t seed, int shapes_per_op = 10,
                                                          double tolerance = 1e-4) {
  Rng rng(seed);
  std::vector<GradCheckResult> results;
  auto run = [&](const std::string& name, auto make_case) {
    double worst = 0;
    for (int i = 0; i < shapes_per_op; ++i) {
      auto [fn, inputs] = make_case();
      worst = std::max(worst, check_gradients(fn, inputs, rng));
    }
    results.push_back({name, worst, worst < tolerance});
  };
  using detail::pick;
  using D = double;

  run("matmul", [&] {
    const std::size_t b = pick(rng, 1, 3), p = pick(rng, 1, 4), q = pick(rng, 1, 5), r = pick(rng, 1, 4);
    const bool shared_rhs = pick(rng, 0, 1) == 1;
    std::vector<Tensor<D>> in{randn<D>({b, p, q}, rng), shared_rhs ? randn<D>({q, r}, rng) : randn<D>({b, q, r}, rng)};
    return std::pair{TensorFn([](const auto& x) { return matmul(x[0], x[1]); }), in};
  });
  run("add", [&] {
    const std::size_t a = pick(rng, 1, 3), b = pick(rng, 1, 4), c = pick(rng, 1, 4);
    std::vector<Tensor<D>> in{randn<D>({a, b, c}, rng), randn<D>({1, b, 1}, rng)};
    return std::pair{TensorFn([](const auto& x) { return add(x[0], x[1]); }), in};
  });
  run("sub", [&] {
    const std::size_t a = pick(rng, 1, 3), b = pick(rng, 1, 4);
    std::vector<Tensor<D>> in{randn<D>({a, b}, rng), randn<D>({b}, rng)};
    return std::pair{TensorFn([](const auto& x) { return sub(x[0], x[1]); }), in};
  });
  run("mul", [&] {
    const std::size_t a = pick(rng, 1, 3), b = pick(rng, 1, 4), c = pick(rng, 1, 4);
    std::vector<Tensor<D>> in{randn<D>({a, b, c}, rng), randn<D>({a, 1, c}, rng)};
    return std::pair{TensorFn([](const auto& x) { return mul(x[0], x[1]); }), in};
  });
  run("conv2d", [&] {
    const std::size_t b = pick(rng, 1, 2), c = pick(rng, 1, 3), o = pick(rng, 1, 3);
    const std::size_t k = pick(rng, 0, 1) ? 3 : 1;
    const std::size_t stride = k == 3 ? pick(rng, 1, 2) : 1;
    const std::size_t pad = k / 2;
    const std::size_t h = pick(rng, 2, 5) * stride, w = pick(rng, 2, 5) * stride;
    std::vector<Tensor<D>> in{randn<D>({b, c, h, w}, rng), randn<D>({o, c, k, k}, rng)};
    return std::pair{TensorFn([stride, pad](const auto& x) { return conv2d(x[0], x[1], stride, pad); }), in};
  });
  run("softmax", [&] {
    const std::size_t a = pick(rng, 1, 3), b = pick(rng, 2, 5), c = pick(rng, 1, 3);
    const std::ptrdiff_t axis = static_cast<std::ptrdiff_t>(pick(rng, 0, 2));
    std::vector<Tensor<D>> in{randn<D>({a, b, c}, rng)};
    return std::pair{TensorFn([axis](const auto& x) { return softmax(x[0], axis); }), in};
  });
  run("layer_norm", [&] {
    const std::size_t a = pick(rng, 1, 4), n = pick(rng, 2, 8);
    std::vector<Tensor<D>> in{randn<D>({a, n}, rng)};
    return std::pair{TensorFn([](const auto& x) { return layer_norm(x[0]); }), in};
  });
  run("silu", [&] {
    std::vector<Tensor<D>> in{randn<D>({pick(rng, 1, 4), pick(rng, 1, 6)}, rng, 2.0)};
    return std::pair{TensorFn([](const auto& x) { return silu(x[0]); }), in};
  });
  run("scale", [&] {
    const D factor = std::uniform_real_distribution<D>(-3, 3)(rng);
    std::vector<Tensor<D>> in{randn<D>({pick(rng, 1, 4), pick(rng, 1, 6)}, rng)};
    return std::pair{TensorFn([factor](const auto& x) { return scale(x[0], factor); }), in};
  });
  run("reshape", [&] {
    const std::size_t a = pick(rng, 1, 4), b = pick(rng, 1, 4);
    std::vector<Tensor<D>> in{randn<D>({a, b, 2}, rng)};
    return std::pair{TensorFn([a, b](const auto& x) { return reshape(x[0], {2 * b, a}); }), in};
  });
  run("permute", [&] {
    std::vector<Tensor<D>> in{randn<D>({pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3)}, rng)};
    return std::pair{TensorFn([](const auto& x) { return permute(x[0], {2, 0, 1}); }), in};
  });
  run("concat", [&] {
    const std::size_t a = pick(rng, 1, 3), b = pick(rng, 1, 3);
    std::vector<Tensor<D>> in{randn<D>({a, b, 2}, rng), randn<D>({a, pick(rng, 1, 3), 2}, rng)};
    return std::pair{TensorFn([](const auto& x) { return concat<D>({x[0], x[1]}, 1); }), in};
  });
  run("slice", [&] {
    const std::size_t n = pick(rng, 2, 6);
    const std::size_t lo = pick(rng, 0, n - 2);
    std::vector<Tensor<D>> in{randn<D>({2, n, 3}, rng)};
    return std::pair{TensorFn([lo, n](const auto& x) { return slice(x[0], 1, lo, n); }), in};
  });
  run("sum", [&] {
    std::vector<Tensor<D>> in{randn<D>({pick(rng, 1, 4), pick(rng, 1, 4)}, rng)};
    return std::pair{TensorFn([](const auto& x) { return sum(x[0]); }), in};
  });
  run("mean", [&] {
    std::vector<Tensor<D>> in{randn<D>({pick(rng, 1, 4), pick(rng, 1, 4)}, rng)};
    return std::pair{TensorFn([](const auto& x) { return mean(x[0]); }), in};
  });
  run("scaled_dot_attention", [&] {
    const std::size_t b = pick(rng, 1, 2), h = pick(rng, 1, 2), s = pick(rng, 1, 4), t = pick(rng, 1, 4),
                      d = pick(rng, 1, 4);
    std::vector<Tensor<D>> in{randn<D>({b, h, s, d}, rng), randn<D>({b, h, t, d}, rng), randn<D>({b, h, t, d}, rng)};
    return std::pair{TensorFn([](const auto& x) { return scaled_dot_attention(x[0], x[1], x[2]); }), in};
  });
  return results;
}

}  // namespace toa
