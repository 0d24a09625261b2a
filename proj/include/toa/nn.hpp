#pragma once

// Parameterized building blocks shared by the encoders, adapter and U-Nets.
// Every block lists its tensors through `collect`, which is how the optimizer
// and the checkpoint code find them.

#include <cmath>
#include <string>
#include <vector>

#include "toa/rng.hpp"
#include "toa/tensor.hpp"

namespace toa::nn {

template <std::floating_point T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;
};

template <std::floating_point T>
using ParamList = std::vector<NamedParam<T>>;

template <std::floating_point T>
Tensor<T> param(const Shape& shape, Rng& rng, T stddev) {
  return randn<T>(shape, rng, stddev).set_requires_grad(true);
}

template <std::floating_point T>
Tensor<T> constant_param(const Shape& shape, T value) {
  return Tensor<T>(shape, value, true);
}

template <std::floating_point T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out], undefined when the layer is bias-free

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true, T gain = T(1))
      : weight(param<T>({in, out}, rng, gain / std::sqrt(static_cast<T>(in)))) {
    if (with_bias) bias = constant_param<T>({out}, T(0));
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto y = matmul(x, weight);
    return bias.defined() ? add(y, bias) : y;
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
  }
};

/// Layer norm over the last axis with learned gain and bias.
template <std::floating_point T>
struct LayerNorm {
  Tensor<T> gain, bias;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t width) : gain(constant_param<T>({width}, T(1))), bias(constant_param<T>({width}, T(0))) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return add(mul(layer_norm(x), gain), bias); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".bias", bias});
  }
};

/// Group norm on [B, C, H, W], composed from reshape + layer_norm.
template <std::floating_point T>
struct GroupNorm {
  std::size_t groups = 1;
  Tensor<T> gain, bias;  // [1, C, 1, 1]

  GroupNorm() = default;
  GroupNorm(std::size_t groups_, std::size_t channels)
      : groups(groups_),
        gain(constant_param<T>({1, channels, 1, 1}, T(1))),
        bias(constant_param<T>({1, channels, 1, 1}, T(0))) {
    if (channels % groups != 0) throw ConfigError("group norm: channels must divide into groups");
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    const auto& s = x.shape();
    auto grouped = reshape(x, {s[0], groups, s[1] / groups * s[2] * s[3]});
    return add(mul(reshape(layer_norm(grouped), s), gain), bias);
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".bias", bias});
  }
};

template <std::floating_point T>
struct Conv2d {
  Tensor<T> kernel;  // [out, in, k, k]
  Tensor<T> bias;    // [1, out, 1, 1]
  std::size_t stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t k, Rng& rng, std::size_t stride_ = 1, T gain = T(1))
      : kernel(param<T>({out, in, k, k}, rng, gain / std::sqrt(static_cast<T>(in * k * k)))),
        bias(constant_param<T>({1, out, 1, 1}, T(0))),
        stride(stride_),
        pad(k / 2) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return add(conv2d(x, kernel, stride, pad), bias); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".kernel", kernel});
    out.push_back({prefix + ".bias", bias});
  }
};

/// [B, S, heads*d] -> [B, heads, S, d]
template <std::floating_point T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  const auto& s = x.shape();
  if (s.back() % heads != 0) throw DimensionError("split_heads: width " + std::to_string(s.back()) + " not divisible by heads");
  return permute(reshape(x, {s[0], s[1], heads, s[2] / heads}), {0, 2, 1, 3});
}

/// [B, heads, S, d] -> [B, S, heads*d]
template <std::floating_point T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  const auto& s = x.shape();
  return reshape(permute(x, {0, 2, 1, 3}), {s[0], s[2], s[1] * s[3]});
}

/// Multi-head attention of `queries` [B,S,dq] over `context` [B,T,dc] with
/// bias-free projections, so an all-zero context yields an all-zero output.
template <std::floating_point T>
struct Attention {
  std::size_t heads = 1;
  Linear<T> to_q, to_k, to_v;

  Attention() = default;
  Attention(std::size_t query_width, std::size_t context_width, std::size_t inner, std::size_t heads_, Rng& rng)
      : heads(heads_),
        to_q(query_width, inner, rng, false),
        to_k(context_width, inner, rng, false),
        to_v(context_width, inner, rng, false) {}

  Tensor<T> operator()(const Tensor<T>& queries, const Tensor<T>& context) const {
    return attend(to_q(queries), context);
  }

  /// Attention with an already projected query, used when several key/value
  /// streams share one query projection.
  Tensor<T> attend(const Tensor<T>& projected_q, const Tensor<T>& context) const {
    return merge_heads(scaled_dot_attention(split_heads(projected_q, heads), split_heads(to_k(context), heads),
                                            split_heads(to_v(context), heads)));
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    to_q.collect(prefix + ".to_q", out);
    to_k.collect(prefix + ".to_k", out);
    to_v.collect(prefix + ".to_v", out);
  }
};

/// Marks every tensor of a parameter list frozen (no gradient, excluded from
/// optimization but still checkpointed).
template <std::floating_point T>
void freeze(ParamList<T>& params) {
  for (auto& p : params) {
    p.trainable = false;
    p.tensor.set_requires_grad(false);
  }
}

}  // namespace toa::nn
