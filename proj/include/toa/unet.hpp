#pragma once

// Noise-prediction U-Net and its reference twin. Two resolution levels below
// the input, cross-attention to the decoupled token streams at 16x16 and 8x8,
// and one self-attention site at 8x8 where reference features are joined
// width-wise. Pose enters as extra input channels.

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "toa/adapter.hpp"
#include "toa/data.hpp"
#include "toa/nn.hpp"

namespace toa {

struct UNetConfig {
  std::size_t image_channels = 3;
  std::size_t pose_channels = 2;
  std::array<std::size_t, 3> widths{32, 64, 128};
  std::size_t time_width = 128;
  std::size_t context_width = 64;  // m
  std::size_t heads = 4;
  std::size_t groups = 8;
  std::size_t resolution = 32;
  bool use_reference = true;
};

// ---------------------------------------------------------------------------
// Layout helpers

/// [B, C, H, W] -> [B, H*W, C]
template <std::floating_point T>
Tensor<T> to_tokens(const Tensor<T>& x) {
  const auto& s = x.shape();
  return reshape(permute(x, {0, 2, 3, 1}), {s[0], s[2] * s[3], s[1]});
}

/// [B, H*W, C] -> [B, C, H, W]
template <std::floating_point T>
Tensor<T> from_tokens(const Tensor<T>& t, std::size_t h, std::size_t w) {
  const auto& s = t.shape();
  return permute(reshape(t, {s[0], h, w, s[2]}), {0, 3, 1, 2});
}

/// Nearest-neighbour 2x upsampling of [B, C, H, W].
template <std::floating_point T>
Tensor<T> upsample2x(const Tensor<T>& x) {
  const auto& s = x.shape();
  const std::size_t B = s[0], C = s[1], H = s[2], W = s[3];
  auto cols = reshape(x, {B, C, H, W, 1});
  cols = reshape(concat<T>({cols, cols}, 4), {B, C, H, 1, 2 * W});
  return reshape(concat<T>({cols, cols}, 3), {B, C, 2 * H, 2 * W});
}

/// Sinusoidal features of integer timesteps, [B, width].
template <std::floating_point T>
Tensor<T> timestep_features(std::span<const std::size_t> t, std::size_t width) {
  const std::size_t half = width / 2;
  std::vector<T> v(t.size() * width);
  for (std::size_t b = 0; b < t.size(); ++b)
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double arg = static_cast<double>(t[b]) * freq;
      v[b * width + i] = static_cast<T>(std::sin(arg));
      v[b * width + half + i] = static_cast<T>(std::cos(arg));
    }
  return Tensor<T>({t.size(), width}, std::move(v));
}

// ---------------------------------------------------------------------------
// Pose

template <std::floating_point T>
struct PoseMap {
  Tensor<T> map;  // [2, h, w]
  std::size_t clipped = 0;
};

/// Gaussian blobs (sigma 1.5 px), channel 0 for head keypoints and 1 for
/// body keypoints; overlapping blobs combine by max. Out-of-bounds keypoints
/// are clamped onto the border and counted.
template <std::floating_point T>
PoseMap<T> pose_map_from_keypoints(const std::vector<Keypoint>& kp, std::size_t h = kImageSize,
                                   std::size_t w = kImageSize, double sigma = 1.5) {
  PoseMap<T> out;
  std::vector<T> v(2 * h * w, T(0));
  for (const auto& k : kp) {
    double x = k.x, y = k.y;
    if (x < 0 || y < 0 || x > double(w - 1) || y > double(h - 1)) {
      ++out.clipped;
      x = std::clamp(x, 0.0, double(w - 1));
      y = std::clamp(y, 0.0, double(h - 1));
    }
    const std::size_t c = k.group == KeypointGroup::head ? 0 : 1;
    for (std::size_t py = 0; py < h; ++py)
      for (std::size_t px = 0; px < w; ++px) {
        const double d2 = (px - x) * (px - x) + (py - y) * (py - y);
        auto& cell = v[(c * h + py) * w + px];
        cell = std::max(cell, static_cast<T>(std::exp(-d2 / (2 * sigma * sigma))));
      }
  }
  out.map = Tensor<T>({2, h, w}, std::move(v));
  return out;
}

// ---------------------------------------------------------------------------
// Blocks

template <std::floating_point T>
struct ResBlock {
  nn::GroupNorm<T> norm1, norm2;
  nn::Conv2d<T> conv1, conv2;
  nn::Linear<T> time_proj;
  std::optional<nn::Conv2d<T>> skip;

  ResBlock() = default;
  ResBlock(std::size_t in, std::size_t out, const UNetConfig& cfg, Rng& rng)
      : norm1(std::min(cfg.groups, in), in),
        norm2(std::min(cfg.groups, out), out),
        conv1(in, out, 3, rng),
        conv2(out, out, 3, rng, 1, T(0.2)),
        time_proj(cfg.time_width, out, rng) {
    if (in != out) skip = nn::Conv2d<T>(in, out, 1, rng);
  }

  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& temb) const {
    auto h = conv1(silu(norm1(x)));
    const auto tp = time_proj(temb);
    h = add(h, reshape(tp, {tp.size(0), tp.size(1), 1, 1}));
    h = conv2(silu(norm2(h)));
    return add(skip ? (*skip)(x) : x, h);
  }

  void collect(const std::string& prefix, nn::ParamList<T>& out) const {
    norm1.collect(prefix + ".norm1", out);
    conv1.collect(prefix + ".conv1", out);
    time_proj.collect(prefix + ".time_proj", out);
    norm2.collect(prefix + ".norm2", out);
    conv2.collect(prefix + ".conv2", out);
    if (skip) skip->collect(prefix + ".skip", out);
  }
};

/// Pre-norm decoupled cross-attention with output projection and residual.
template <std::floating_point T>
struct CrossAttnBlock {
  nn::LayerNorm<T> norm;
  DecoupledCrossAttention<T> attn;
  nn::Linear<T> proj;

  CrossAttnBlock() = default;
  CrossAttnBlock(std::size_t channels, const UNetConfig& cfg, Rng& rng)
      : norm(channels), attn(channels, cfg.context_width, cfg.heads, rng), proj(channels, channels, rng, true, T(0.2)) {}

  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& text, const AdapterOutput<T>& image, T image_scale) const {
    const std::size_t h = x.size(2), w = x.size(3);
    const auto z = attn(norm(to_tokens(x)), text, image, image_scale);
    return add(x, from_tokens(proj(z), h, w));
  }

  void collect(const std::string& prefix, nn::ParamList<T>& out) const {
    norm.collect(prefix + ".norm", out);
    attn.collect(prefix + ".attn", out);
    proj.collect(prefix + ".proj", out);
  }
};

/// Self-attention over u1 joined width-wise with reference features u2;
/// returns the first half along width (no residual). Without u2 it is plain
/// self-attention over u1.
template <std::floating_point T>
struct RefSelfAttention {
  nn::LayerNorm<T> norm;
  nn::Attention<T> attn;
  nn::Linear<T> proj;

  RefSelfAttention() = default;
  RefSelfAttention(std::size_t channels, std::size_t heads, Rng& rng)
      : norm(channels), attn(channels, channels, channels, heads, rng), proj(channels, channels, rng, true, T(0.2)) {}

  Tensor<T> operator()(const Tensor<T>& u1, const Tensor<T>& u2 = {}) const {
    if (!u2.defined()) return plain(u1);
    if (u1.shape() != u2.shape()) {
      throw DimensionError("ref_self_attention: u1 " + shape_str(u1.shape()) + " vs u2 " + shape_str(u2.shape()));
    }
    const std::size_t h = u1.size(2), w = u1.size(3);
    const auto joined = concat<T>({u1, u2}, 3);
    const auto t = norm(to_tokens(joined));
    const auto y = from_tokens(proj(attn(t, t)), h, 2 * w);
    return slice(y, 3, 0, w);
  }

  Tensor<T> plain(const Tensor<T>& u1) const {
    const auto t = norm(to_tokens(u1));
    return from_tokens(proj(attn(t, t)), u1.size(2), u1.size(3));
  }

  void collect(const std::string& prefix, nn::ParamList<T>& out) const {
    norm.collect(prefix + ".norm", out);
    attn.collect(prefix + ".attn", out);
    proj.collect(prefix + ".proj", out);
  }
};

/// Reference features: the mid-level self-attention-site input of the
/// reference U-Net, [B, C2, 8, 8]. Undefined means "no reference".
template <std::floating_point T>
struct ReferenceFeatures {
  Tensor<T> mid;
};

/// Everything the denoiser is conditioned on besides (z_t, t).
template <std::floating_point T>
struct Conditioning {
  Tensor<T> text;               // [B, n_text, m]
  AdapterOutput<T> image;       // [B, n, m] each
  ReferenceFeatures<T> ref;
  Tensor<T> pose;               // [B, 2, H, W] or undefined
  T image_scale = T(1);
};

// ---------------------------------------------------------------------------

/// The denoiser. With `encoder_only` the module stops after the mid-level
/// ResBlock and carries no cross-attention, decoder or output layers; that
/// is the reference network's shape.
template <std::floating_point T>
class UNet {
 public:
  UNet() = default;
  UNet(const UNetConfig& cfg, Rng& rng, bool encoder_only = false) : cfg_(cfg), encoder_only_(encoder_only) {
    const auto [c0, c1, c2] = cfg.widths;
    const std::size_t tw = cfg.time_width;
    time1_ = nn::Linear<T>(c0, tw, rng);
    time2_ = nn::Linear<T>(tw, tw, rng);
    in_conv_ = nn::Conv2d<T>(cfg.image_channels + cfg.pose_channels, c0, 3, rng);
    enc0_ = ResBlock<T>(c0, c0, cfg, rng);
    down0_ = nn::Conv2d<T>(c0, c0, 3, rng, 2);
    enc1_ = ResBlock<T>(c0, c1, cfg, rng);
    if (!encoder_only) enc1_ca_ = CrossAttnBlock<T>(c1, cfg, rng);
    down1_ = nn::Conv2d<T>(c1, c1, 3, rng, 2);
    mid_ = ResBlock<T>(c1, c2, cfg, rng);
    if (encoder_only) return;
    mid_sa_ = RefSelfAttention<T>(c2, cfg.heads, rng);
    mid_ca_ = CrossAttnBlock<T>(c2, cfg, rng);
    up1_ = ResBlock<T>(c2 + c1, c1, cfg, rng);
    up1_ca_ = CrossAttnBlock<T>(c1, cfg, rng);
    up0_ = ResBlock<T>(c1 + c0, c0, cfg, rng);
    out_norm_ = nn::GroupNorm<T>(std::min(cfg.groups, c0), c0);
    out_conv_ = nn::Conv2d<T>(c0, cfg.image_channels, 3, rng, 1, T(0.1));
  }

  const UNetConfig& config() const { return cfg_; }
  bool encoder_only() const { return encoder_only_; }

  /// Reference twin: an encoder-only network whose tensors are copies of
  /// this network's current values.
  UNet reference_copy() const {
    Rng unused(0);
    UNet ref(cfg_, unused, true);
    nn::ParamList<T> mine, theirs;
    collect("net", mine);
    ref.collect("net", theirs);
    std::map<std::string, Tensor<T>> by_name;
    for (const auto& p : mine) by_name.emplace(p.name, p.tensor);
    for (auto& p : theirs) {
      const auto src = by_name.at(p.name).data();
      std::copy(src.begin(), src.end(), p.tensor.mutable_data().begin());
    }
    return ref;
  }

  Tensor<T> time_embedding(std::span<const std::size_t> t) const {
    return time2_(silu(time1_(timestep_features<T>(t, cfg_.widths[0]))));
  }

  /// Runs the reference network once on clean garments at t = 0 with zero
  /// pose and captures the self-attention-site input.
  ReferenceFeatures<T> reference_features(const Tensor<T>& garment) const {
    check_input(garment, "reference_features");
    const std::size_t B = garment.size(0), R = cfg_.resolution;
    const std::vector<std::size_t> t0(B, 0);
    const auto x = concat<T>({garment, Tensor<T>({B, cfg_.pose_channels, R, R}, T(0))}, 1);
    const auto temb = time_embedding(t0);
    auto h = enc0_(in_conv_(x), temb);
    h = enc1_(down0_(h), temb);
    return {mid_(down1_(h), temb)};
  }

  /// Predicted noise for z_t at per-element timesteps t.
  Tensor<T> forward(const Tensor<T>& zt, std::span<const std::size_t> t, const Conditioning<T>& c) const {
    if (encoder_only_) throw ContractError("denoise_forward called on an encoder-only network");
    check_input(zt, "denoise_forward");
    const std::size_t B = zt.size(0), R = cfg_.resolution;
    if (t.size() != B) throw DimensionError("denoise_forward: one timestep per batch element required");
    if (cfg_.use_reference && !c.ref.mid.defined()) {
      throw ContractError("denoise_forward: reference features required by this network");
    }
    Tensor<T> pose = c.pose.defined() ? c.pose : Tensor<T>({B, cfg_.pose_channels, R, R}, T(0));
    if (pose.shape() != Shape{B, cfg_.pose_channels, R, R}) {
      throw DimensionError("denoise_forward: pose map " + shape_str(pose.shape()));
    }
    const auto temb = time_embedding(t);
    const auto s0 = enc0_(in_conv_(concat<T>({zt, pose}, 1)), temb);
    auto s1 = enc1_(down0_(s0), temb);
    s1 = enc1_ca_(s1, c.text, c.image, c.image_scale);
    auto h = mid_(down1_(s1), temb);
    h = add(h, cfg_.use_reference ? mid_sa_(h, c.ref.mid) : mid_sa_.plain(h));
    h = mid_ca_(h, c.text, c.image, c.image_scale);
    h = up1_(concat<T>({upsample2x(h), s1}, 1), temb);
    h = up1_ca_(h, c.text, c.image, c.image_scale);
    h = up0_(concat<T>({upsample2x(h), s0}, 1), temb);
    return out_conv_(silu(out_norm_(h)));
  }

  const RefSelfAttention<T>& self_attention() const { return mid_sa_; }

  void collect(const std::string& prefix, nn::ParamList<T>& out) const {
    time1_.collect(prefix + ".time1", out);
    time2_.collect(prefix + ".time2", out);
    in_conv_.collect(prefix + ".in_conv", out);
    enc0_.collect(prefix + ".enc0", out);
    down0_.collect(prefix + ".down0", out);
    enc1_.collect(prefix + ".enc1", out);
    if (!encoder_only_) enc1_ca_.collect(prefix + ".enc1_ca", out);
    down1_.collect(prefix + ".down1", out);
    mid_.collect(prefix + ".mid", out);
    if (encoder_only_) return;
    mid_sa_.collect(prefix + ".mid_sa", out);
    mid_ca_.collect(prefix + ".mid_ca", out);
    up1_.collect(prefix + ".up1", out);
    up1_ca_.collect(prefix + ".up1_ca", out);
    up0_.collect(prefix + ".up0", out);
    out_norm_.collect(prefix + ".out_norm", out);
    out_conv_.collect(prefix + ".out_conv", out);
  }

 private:
  void check_input(const Tensor<T>& x, const char* op) const {
    const std::size_t R = cfg_.resolution;
    if (x.dim() != 4 || x.size(1) != cfg_.image_channels || x.size(2) != R || x.size(3) != R) {
      throw DimensionError(std::string(op) + ": expected [B," + std::to_string(cfg_.image_channels) + "," +
                           std::to_string(R) + "," + std::to_string(R) + "], got " + shape_str(x.shape()));
    }
  }

  UNetConfig cfg_;
  bool encoder_only_ = false;
  nn::Linear<T> time1_, time2_;
  nn::Conv2d<T> in_conv_, down0_, down1_, out_conv_;
  ResBlock<T> enc0_, enc1_, mid_, up1_, up0_;
  CrossAttnBlock<T> enc1_ca_, mid_ca_, up1_ca_;
  RefSelfAttention<T> mid_sa_;
  nn::GroupNorm<T> out_norm_;
};

}  // namespace toa
