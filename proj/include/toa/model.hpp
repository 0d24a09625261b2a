#pragma once

// The assembled try-on model: frozen image encoder, trainable text embedder,
// adapter, denoising U-Net and reference U-Net, plus the glue that turns raw
// conditioning (images, captions, keypoints, drop flags) into tensors.

#include <optional>
#include <string>
#include <vector>

#include "toa/adapter.hpp"
#include "toa/encoders.hpp"
#include "toa/schedule.hpp"
#include "toa/unet.hpp"

namespace toa {

struct ModelConfig {
  UNetConfig unet;
  AdapterConfig adapter;
  ImageEncoderConfig encoder;
  std::size_t text_length = kTextLength;
  std::size_t schedule_steps = 100;
  PosteriorVariance posterior = PosteriorVariance::beta_tilde;
  std::uint64_t init_seed = 1;
};

/// Raw conditioning for a batch. Empty `poses[b]` means no pose input.
struct ConditionBatch {
  std::vector<Image> faces;
  std::vector<Image> garments;
  std::vector<std::string> captions;
  std::vector<std::vector<Keypoint>> poses;
  std::vector<bool> drop_face, drop_garment, drop_text, drop_pose;

  std::size_t size() const { return garments.size(); }

  void validate() const {
    const std::size_t n = size();
    if (faces.size() != n || captions.size() != n || poses.size() != n || drop_face.size() != n ||
        drop_garment.size() != n || drop_text.size() != n || drop_pose.size() != n) {
      throw DimensionError("condition batch fields have inconsistent lengths");
    }
  }

  void resize_flags() {
    const std::size_t n = size();
    poses.resize(n);
    captions.resize(n);
    drop_face.resize(n, false);
    drop_garment.resize(n, false);
    drop_text.resize(n, false);
    drop_pose.resize(n, false);
  }
};

/// The identity autoencoder, up to the fixed affine map [0, 1] -> [-1, 1]
/// that centers pixel values for the diffusion.
template <std::floating_point T>
Tensor<T> encode_latent(const std::vector<Image>& images) {
  auto x = to_tensor<T>(images);
  for (auto& v : x.mutable_data()) v = T(2) * v - T(1);
  return x;
}

/// Inverse of `encode_latent`, clamped to the displayable range.
template <std::floating_point T>
Image decode_latent(const Tensor<T>& z, std::size_t b) {
  std::vector<T> v(z.data().begin(), z.data().end());
  for (auto& x : v) x = (x + T(1)) / T(2);
  return clamp01(image_from_tensor(Tensor<T>(z.shape(), std::move(v)), b));
}

template <std::floating_point T>
Tensor<T> keep_mask(const std::vector<bool>& drop, std::size_t trailing_dims) {
  Shape s(1 + trailing_dims, 1);
  s[0] = drop.size();
  std::vector<T> v(drop.size());
  for (std::size_t i = 0; i < drop.size(); ++i) v[i] = drop[i] ? T(0) : T(1);
  return Tensor<T>(s, std::move(v));
}

template <std::floating_point T>
class TryOnModel {
 public:
  ModelConfig cfg;
  Vocabulary vocab = Vocabulary::standard();
  NoiseSchedule schedule;
  ImageEncoder<T> encoder;
  TextEmbedder<T> text;
  TryOnAdapter<T> adapter;
  UNet<T> unet;
  UNet<T> reference;

  explicit TryOnModel(const ModelConfig& c = {})
      : cfg(c), schedule(make_schedule(c.schedule_steps, ScheduleKind::linear, c.posterior)), encoder(c.encoder) {
    if (c.encoder.width != c.adapter.image_width) throw ConfigError("encoder width must equal adapter image width");
    if (c.adapter.text_width != c.unet.context_width) throw ConfigError("adapter text width must equal U-Net context width");
    Rng rng(split_seed(c.init_seed, "model-init"));
    text = TextEmbedder<T>(vocab.size(), c.adapter.text_width, rng, c.text_length);
    adapter = TryOnAdapter<T>(c.adapter, rng);
    unet = UNet<T>(c.unet, rng);
    reference = unet.reference_copy();
  }

  /// Every tensor, frozen ones included, in a fixed order.
  nn::ParamList<T> parameters() const {
    nn::ParamList<T> ps;
    text.collect("text", ps);
    adapter.collect("adapter", ps);
    unet.collect("unet", ps);
    if (cfg.unet.use_reference) reference.collect("reference", ps);
    encoder.collect("image_encoder", ps);
    return ps;
  }

  nn::ParamList<T> trainable() const {
    nn::ParamList<T> out;
    for (auto& p : parameters())
      if (p.trainable) out.push_back(p);
    return out;
  }

  Tensor<T> embed_captions(const std::vector<std::string>& captions) const {
    std::vector<std::vector<int>> ids;
    for (const auto& c : captions) ids.push_back(tokenize_caption(c, vocab, cfg.text_length));
    return text(ids);
  }

  /// Conditioning with dropped streams multiplied by zero, so the graph
  /// shape is the same whatever the coins say.
  Conditioning<T> condition(const ConditionBatch& batch) const {
    batch.validate();
    const std::size_t B = batch.size(), R = cfg.unet.resolution;
    Conditioning<T> c;
    std::vector<std::string> captions(B);
    for (std::size_t b = 0; b < B; ++b) captions[b] = batch.drop_text[b] ? std::string() : batch.captions[b];
    c.text = embed_captions(captions);
    const auto out = adapter(encoder.encode(batch.faces), encoder.encode(batch.garments));
    c.image = drop_image_conditioning(out, batch.drop_face, batch.drop_garment);
    if (cfg.unet.use_reference) {
      c.ref.mid = mul(reference.reference_features(garment_tensor(batch.garments)).mid, keep_mask<T>(batch.drop_garment, 3));
    }
    std::vector<T> pose(B * cfg.unet.pose_channels * R * R, T(0));
    for (std::size_t b = 0; b < B; ++b) {
      if (batch.drop_pose[b] || batch.poses[b].empty()) continue;
      const auto pm = pose_map_from_keypoints<T>(batch.poses[b], R, R);
      const auto m = pm.map.data();
      std::copy(m.begin(), m.end(), pose.begin() + static_cast<std::ptrdiff_t>(b * m.size()));
    }
    c.pose = Tensor<T>({B, cfg.unet.pose_channels, R, R}, std::move(pose));
    return c;
  }

  /// The null branch: empty caption, zero image streams, zero reference
  /// features, no pose. Nothing here depends on the request.
  Conditioning<T> null_condition(std::size_t B) const {
    const std::size_t R = cfg.unet.resolution, n = cfg.adapter.tokens, m = cfg.adapter.text_width;
    Conditioning<T> c;
    c.text = embed_captions(std::vector<std::string>(B));
    c.image = {Tensor<T>({B, n, m}, T(0)), Tensor<T>({B, n, m}, T(0))};
    if (cfg.unet.use_reference) {
      c.ref.mid = Tensor<T>({B, cfg.unet.widths[2], R / 4, R / 4}, T(0));
    }
    c.pose = Tensor<T>({B, cfg.unet.pose_channels, R, R}, T(0));
    return c;
  }

  Tensor<T> predict(const Tensor<T>& zt, std::span<const std::size_t> t, const Conditioning<T>& c) const {
    return unet.forward(zt, t, c);
  }

  Tensor<T> garment_tensor(const std::vector<Image>& garments) const {
    const std::size_t R = cfg.unet.resolution;
    std::vector<Image> sized;
    for (const auto& g : garments) sized.push_back(g.height == R && g.width == R ? g : resize_bilinear(g, R, R));
    return to_tensor<T>(sized);
  }
};

}  // namespace toa
