#pragma once

// Image-prompt adapter: resamplers that turn encoder hidden states into a few
// prompt-width tokens, and decoupled cross-attention that fuses text, face
// and garment token streams with one shared query projection.

#include <string>
#include <vector>

#include "toa/nn.hpp"

namespace toa {

struct AdapterConfig {
  std::size_t image_width = 64;  // M
  std::size_t text_width = 64;   // m
  std::size_t tokens = 8;        // n
  std::size_t depth = 2;
  std::size_t heads = 4;
  bool share_resampler = false;
  bool inject_once = false;  // feed the hidden state to the first layer only
};

/// Learned latent queries attending over [hidden, latents] at each layer,
/// with pre-norm and residuals, then a feed-forward to the prompt width.
template <std::floating_point T>
struct Resampler {
  struct Layer {
    nn::LayerNorm<T> ln_context, ln_latents;
    nn::Attention<T> attn;
    nn::Linear<T> out;
  };

  std::size_t image_width = 0;
  bool inject_once = false;
  Tensor<T> latents;  // [n, m]
  nn::Linear<T> proj_in;
  std::vector<Layer> layers;
  nn::Linear<T> ff1, ff2;
  nn::LayerNorm<T> ln_out;

  Resampler() = default;
  Resampler(const AdapterConfig& cfg, Rng& rng)
      : image_width(cfg.image_width),
        inject_once(cfg.inject_once),
        latents(nn::param<T>({cfg.tokens, cfg.text_width}, rng, T(1) / std::sqrt(static_cast<T>(cfg.text_width)))),
        proj_in(cfg.image_width, cfg.text_width, rng) {
    const std::size_t m = cfg.text_width;
    for (std::size_t l = 0; l < cfg.depth; ++l) {
      layers.push_back({nn::LayerNorm<T>(m), nn::LayerNorm<T>(m), nn::Attention<T>(m, m, m, cfg.heads, rng),
                        nn::Linear<T>(m, m, rng)});
    }
    ff1 = nn::Linear<T>(m, m, rng);
    ff2 = nn::Linear<T>(m, m, rng);
    ln_out = nn::LayerNorm<T>(m);
  }

  /// [B, N, M] -> [B, n, m] for any N.
  Tensor<T> operator()(const Tensor<T>& hidden) const {
    if (hidden.dim() != 3 || hidden.size(2) != image_width) {
      throw DimensionError("resampler expects [B,N," + std::to_string(image_width) + "] hidden states, got " +
                           shape_str(hidden.shape()));
    }
    const std::size_t B = hidden.size(0);
    const auto context = proj_in(hidden);
    auto x = add(Tensor<T>({B, 1, 1}, T(0)), latents);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& layer = layers[l];
      const auto q = layer.ln_latents(x);
      const auto kv = (inject_once && l > 0) ? q : concat<T>({layer.ln_context(context), q}, 1);
      x = add(x, layer.out(layer.attn(q, kv)));
    }
    return ln_out(ff2(silu(ff1(x))));
  }

  void collect(const std::string& prefix, nn::ParamList<T>& out) const {
    out.push_back({prefix + ".latents", latents});
    proj_in.collect(prefix + ".proj_in", out);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto pre = prefix + ".layer" + std::to_string(l);
      layers[l].ln_context.collect(pre + ".ln_context", out);
      layers[l].ln_latents.collect(pre + ".ln_latents", out);
      layers[l].attn.collect(pre + ".attn", out);
      layers[l].out.collect(pre + ".out", out);
    }
    ff1.collect(prefix + ".ff1", out);
    ff2.collect(prefix + ".ff2", out);
    ln_out.collect(prefix + ".ln_out", out);
  }
};

template <std::floating_point T>
struct AdapterOutput {
  Tensor<T> face;     // [B, n, m]
  Tensor<T> garment;  // [B, n, m]
};

/// Face and garment resamplers; with share_resampler both streams use `face`.
template <std::floating_point T>
struct TryOnAdapter {
  AdapterConfig cfg;
  Resampler<T> face, garment;

  TryOnAdapter() = default;
  TryOnAdapter(const AdapterConfig& c, Rng& rng) : cfg(c), face(c, rng) {
    if (!c.share_resampler) garment = Resampler<T>(c, rng);
  }

  const Resampler<T>& garment_resampler() const { return cfg.share_resampler ? face : garment; }

  AdapterOutput<T> operator()(const Tensor<T>& face_hidden, const Tensor<T>& garment_hidden) const {
    return {face(face_hidden), garment_resampler()(garment_hidden)};
  }

  void collect(const std::string& prefix, nn::ParamList<T>& out) const {
    face.collect(prefix + (cfg.share_resampler ? ".resampler" : ".face"), out);
    if (!cfg.share_resampler) garment.collect(prefix + ".garment", out);
  }
};

/// Zeroes the selected streams for every batch element.
template <std::floating_point T>
AdapterOutput<T> drop_image_conditioning(const AdapterOutput<T>& in, bool drop_face, bool drop_garment) {
  AdapterOutput<T> out = in;
  if (drop_face) out.face = Tensor<T>(in.face.shape(), T(0));
  if (drop_garment) out.garment = Tensor<T>(in.garment.shape(), T(0));
  return out;
}

/// Per-element variant: stream b is zeroed where the mask is true. Kept
/// elements pass through unchanged and stay on the tape.
template <std::floating_point T>
AdapterOutput<T> drop_image_conditioning(const AdapterOutput<T>& in, const std::vector<bool>& drop_face,
                                         const std::vector<bool>& drop_garment) {
  auto keep = [](const std::vector<bool>& drop) {
    std::vector<T> k(drop.size());
    for (std::size_t i = 0; i < drop.size(); ++i) k[i] = drop[i] ? T(0) : T(1);
    return Tensor<T>({drop.size(), 1, 1}, std::move(k));
  };
  if (drop_face.size() != in.face.size(0) || drop_garment.size() != in.garment.size(0)) {
    throw DimensionError("drop masks must have one entry per batch element");
  }
  return {mul(in.face, keep(drop_face)), mul(in.garment, keep(drop_garment))};
}

/// Z = CA(q, text) + s * (CA(q, face) + CA(q, garment)) with one query
/// projection and bias-free per-stream key/value projections. The caller
/// applies the output projection and residual.
template <std::floating_point T>
struct DecoupledCrossAttention {
  std::size_t heads = 1, stream_width = 0;
  nn::Linear<T> to_q;
  nn::Attention<T> text, face, garment;  // their to_q is unused

  DecoupledCrossAttention() = default;
  DecoupledCrossAttention(std::size_t query_width, std::size_t stream_width_, std::size_t heads_, Rng& rng)
      : heads(heads_), stream_width(stream_width_), to_q(query_width, query_width, rng, false) {
    text = make_stream(query_width, rng);
    face = make_stream(query_width, rng);
    garment = make_stream(query_width, rng);
  }

  Tensor<T> operator()(const Tensor<T>& q_feat, const Tensor<T>& text_tokens, const AdapterOutput<T>& image,
                       T image_scale = T(1)) const {
    for (const auto* s : {&text_tokens, &image.face, &image.garment}) {
      if (s->dim() != 3 || s->size(2) != stream_width) {
        throw DimensionError("cross-attention stream width must be " + std::to_string(stream_width) + ", got " +
                             shape_str(s->shape()));
      }
    }
    const auto q = to_q(q_feat);
    const auto z_text = text.attend(q, text_tokens);
    auto z_image = add(face.attend(q, image.face), garment.attend(q, image.garment));
    if (image_scale != T(1)) z_image = scale(z_image, image_scale);
    return add(z_text, z_image);
  }

  void collect(const std::string& prefix, nn::ParamList<T>& out) const {
    to_q.collect(prefix + ".to_q", out);
    for (auto [name, a] : {std::pair{".text", &text}, std::pair{".face", &face}, std::pair{".garment", &garment}}) {
      a->to_k.collect(prefix + name + ".to_k", out);
      a->to_v.collect(prefix + name + ".to_v", out);
    }
  }

 private:
  nn::Attention<T> make_stream(std::size_t query_width, Rng& rng) {
    nn::Attention<T> a;
    a.heads = heads;
    a.to_k = nn::Linear<T>(stream_width, query_width, rng, false);
    a.to_v = nn::Linear<T>(stream_width, query_width, rng, false);
    return a;
  }
};

}  // namespace toa
