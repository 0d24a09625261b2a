#pragma once

// Procedural toy try-on corpus: figure/garment rendering, the face-crop
// construction pipeline (mask-oracle segmentation + random expansion),
// template captions, stage-1 corruption, dataset splits, and the exact
// attribute readback used as the evaluation oracle.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "toa/attributes.hpp"
#include "toa/error.hpp"
#include "toa/image.hpp"
#include "toa/rng.hpp"

namespace toa {

inline constexpr std::size_t kImageSize = 32;

struct FigureSpec {
  int face_id = 0;
  int hair_color = 0;
  int top_color = 0;
  int pants_color = 0;
  Pattern top_pattern = Pattern::solid;
  int pose_id = 0;
  int background = 0;

  bool operator==(const FigureSpec&) const = default;

  void validate() const {
    auto in = [](int v, int n) { return v >= 0 && v < n; };
    const int pal = static_cast<int>(kPalette.size());
    if (!in(face_id, kNumFaces) || !in(hair_color, pal) || !in(top_color, pal) || !in(pants_color, pal) ||
        !in(static_cast<int>(top_pattern), 3) || !in(pose_id, kNumPoses) ||
        !in(background, static_cast<int>(kBackgrounds.size()))) {
      throw RangeError("figure spec attribute out of range");
    }
  }

  static constexpr std::uint64_t space_size() {
    return std::uint64_t{kNumFaces} * 8 * 8 * 8 * 3 * kNumPoses * 4;
  }

  /// Mixed-radix decoding of an index in [0, space_size()).
  static FigureSpec from_index(std::uint64_t i) {
    FigureSpec s;
    s.background = static_cast<int>(i % 4); i /= 4;
    s.pose_id = static_cast<int>(i % kNumPoses); i /= kNumPoses;
    s.top_pattern = static_cast<Pattern>(i % 3); i /= 3;
    s.pants_color = static_cast<int>(i % 8); i /= 8;
    s.top_color = static_cast<int>(i % 8); i /= 8;
    s.hair_color = static_cast<int>(i % 8); i /= 8;
    s.face_id = static_cast<int>(i);
    return s;
  }
};

inline void to_json(nlohmann::json& j, const FigureSpec& s) {
  j = {{"face_id", s.face_id},       {"hair_color", s.hair_color},
       {"top_color", s.top_color},   {"pants_color", s.pants_color},
       {"top_pattern", static_cast<int>(s.top_pattern)}, {"pose_id", s.pose_id},
       {"background", s.background}};
}

inline void from_json(const nlohmann::json& j, FigureSpec& s) {
  s.face_id = j.at("face_id");
  s.hair_color = j.at("hair_color");
  s.top_color = j.at("top_color");
  s.pants_color = j.at("pants_color");
  s.top_pattern = static_cast<Pattern>(j.at("top_pattern").get<int>());
  s.pose_id = j.at("pose_id");
  s.background = j.at("background");
  s.validate();
}

enum class KeypointGroup : int { head = 0, body = 1 };

struct Keypoint {
  float x = 0, y = 0;
  KeypointGroup group = KeypointGroup::body;
  bool operator==(const Keypoint&) const = default;
};

struct Mask {
  std::size_t height = kImageSize, width = kImageSize;
  std::vector<std::uint8_t> bits = std::vector<std::uint8_t>(kImageSize * kImageSize, 0);
  std::uint8_t& at(std::size_t y, std::size_t x) { return bits[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return bits[y * width + x]; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }
};

struct RenderedFigure {
  Image image;
  Mask face_mask;
  Mask garment_mask;
  std::vector<Keypoint> keypoints;
};

namespace layout {
// Head: rows 2..9, cols 12..19; 2-px hair ring around a 4x4 face code.
inline constexpr int kHeadTop = 2, kHeadBottom = 9, kHeadLeft = 12, kHeadRight = 19;
inline constexpr int kFaceTop = 4, kFaceLeft = 14;
inline constexpr int kTorsoTop = 10, kTorsoBottom = 21, kTorsoLeft = 11, kTorsoRight = 20;
inline constexpr int kLegsTop = 22, kLegsBottom = 30;
// Columns always covered by the torso whatever the pose offset.
inline constexpr int kTorsoCoreLeft = 13, kTorsoCoreRight = 18;

inline int pose_offset(int pose_id) {
  static constexpr int offsets[kNumPoses] = {0, -2, 2, 0};
  return offsets[pose_id];
}
inline bool arms_raised(int pose_id) { return pose_id == 3; }
}  // namespace layout

namespace detail {

inline bool pattern_is_white(Pattern p, int y, int x) {
  const int ry = y - layout::kTorsoTop;
  switch (p) {
    case Pattern::solid: return false;
    case Pattern::stripes: return ry % 3 == 2;
    case Pattern::dots: return ry % 3 == 1 && x % 3 == 1;
  }
  return false;
}

// Torso with pattern plus sleeves; `dx` shifts horizontally.
inline void draw_garment(Image& img, Mask* mask, const FigureSpec& s, int dx, bool raised) {
  const auto& color = kPalette[s.top_color].rgb;
  auto put = [&](int y, int x, bool patterned) {
    const bool white = patterned && pattern_is_white(s.top_pattern, y, x - (layout::kTorsoLeft + dx));
    img.set_rgb(y, x, white ? kWhite : color);
    if (mask) mask->at(y, x) = 1;
  };
  for (int y = layout::kTorsoTop; y <= layout::kTorsoBottom; ++y)
    for (int x = layout::kTorsoLeft + dx; x <= layout::kTorsoRight + dx; ++x) put(y, x, true);
  if (raised) {
    for (int y = 10; y <= 12; ++y) {
      for (int x = 3; x <= 10; ++x) put(y, x, false);
      for (int x = 21; x <= 28; ++x) put(y, x, false);
    }
  } else {
    for (int y = 11; y <= 20; ++y) {
      for (int x = 8 + dx; x <= 10 + dx; ++x) put(y, x, false);
      for (int x = 21 + dx; x <= 23 + dx; ++x) put(y, x, false);
    }
  }
}

}  // namespace detail

inline std::vector<Keypoint> pose_keypoints(int pose_id) {
  const float dx = static_cast<float>(layout::pose_offset(pose_id));
  std::vector<Keypoint> kp;
  kp.push_back({15.5f, 5.5f, KeypointGroup::head});
  kp.push_back({15.5f + dx, 10.0f, KeypointGroup::body});
  kp.push_back({11.0f + dx, 11.0f, KeypointGroup::body});
  kp.push_back({20.0f + dx, 11.0f, KeypointGroup::body});
  if (layout::arms_raised(pose_id)) {
    kp.push_back({3.0f, 11.0f, KeypointGroup::body});
    kp.push_back({28.0f, 11.0f, KeypointGroup::body});
  } else {
    kp.push_back({9.0f + dx, 20.0f, KeypointGroup::body});
    kp.push_back({22.0f + dx, 20.0f, KeypointGroup::body});
  }
  kp.push_back({13.0f + dx, 21.0f, KeypointGroup::body});
  kp.push_back({18.0f + dx, 21.0f, KeypointGroup::body});
  kp.push_back({13.0f + dx, 30.0f, KeypointGroup::body});
  kp.push_back({18.0f + dx, 30.0f, KeypointGroup::body});
  return kp;
}

/// Deterministic raster of a standing figure. No anti-aliasing.
inline RenderedFigure render_figure(const FigureSpec& spec) {
  spec.validate();
  RenderedFigure out;
  out.image = Image(3, kImageSize, kImageSize);
  for (std::size_t y = 0; y < kImageSize; ++y)
    for (std::size_t x = 0; x < kImageSize; ++x) out.image.set_rgb(y, x, kBackgrounds[spec.background].rgb);

  const auto code = face_codes()[spec.face_id];
  for (int y = layout::kHeadTop; y <= layout::kHeadBottom; ++y) {
    for (int x = layout::kHeadLeft; x <= layout::kHeadRight; ++x) {
      const int fy = y - layout::kFaceTop, fx = x - layout::kFaceLeft;
      const bool inner = fy >= 0 && fy < 4 && fx >= 0 && fx < 4;
      if (inner) {
        const bool feature = (code >> (fy * 4 + fx)) & 1u;
        out.image.set_rgb(y, x, feature ? kFaceFeature : kSkin);
      } else {
        out.image.set_rgb(y, x, kPalette[spec.hair_color].rgb);
      }
      out.face_mask.at(y, x) = 1;
    }
  }

  const int dx = layout::pose_offset(spec.pose_id);
  detail::draw_garment(out.image, &out.garment_mask, spec, dx, layout::arms_raised(spec.pose_id));

  for (int y = layout::kLegsTop; y <= layout::kLegsBottom; ++y) {
    for (int x : {12, 13, 14, 17, 18, 19}) out.image.set_rgb(y, x + dx, kPalette[spec.pants_color].rgb);
  }
  out.keypoints = pose_keypoints(spec.pose_id);
  return out;
}

/// The torso garment laid flat, centred on white.
inline Image render_garment_flat(const FigureSpec& spec) {
  spec.validate();
  Image img(3, kImageSize, kImageSize, 1.0f);
  detail::draw_garment(img, nullptr, spec, 0, false);
  return img;
}

/// Tight bounding box of the face mask (stands in for a segmentation model).
inline Box segment_face(const Image& full_image, const Mask& face_mask) {
  if (face_mask.height != full_image.height || face_mask.width != full_image.width) {
    throw DataError("face mask does not match image size");
  }
  Box b{static_cast<int>(face_mask.height), static_cast<int>(face_mask.width), -1, -1};
  for (std::size_t y = 0; y < face_mask.height; ++y)
    for (std::size_t x = 0; x < face_mask.width; ++x)
      if (face_mask.at(y, x)) {
        b.top = std::min(b.top, static_cast<int>(y));
        b.left = std::min(b.left, static_cast<int>(x));
        b.bottom = std::max(b.bottom, static_cast<int>(y));
        b.right = std::max(b.right, static_cast<int>(x));
      }
  if (b.bottom < 0) throw DataError("face mask is empty");
  return b;
}

/// Grows each side of `box` independently by U[0, max_expand_frac] of the
/// room left on that side, then crops. Returns the grown box.
template <class Urbg>
Box random_expand_box(const Box& box, std::size_t height, std::size_t width, Urbg& rng, double max_expand_frac) {
  if (max_expand_frac < 0.0 || max_expand_frac > 1.0) throw RangeError("max_expand_frac must lie in [0, 1]");
  auto grow = [&](int room) {
    const double u = std::generate_canonical<double, 53>(rng);
    return static_cast<int>(std::lround(u * max_expand_frac * room));
  };
  Box out = box;
  out.top -= grow(box.top);
  out.left -= grow(box.left);
  out.bottom += grow(static_cast<int>(height) - 1 - box.bottom);
  out.right += grow(static_cast<int>(width) - 1 - box.right);
  return out;
}

template <class Urbg>
Image random_expand_crop(const Image& full_image, const Box& box, Urbg& rng, double max_expand_frac) {
  return crop(full_image, random_expand_box(box, full_image.height, full_image.width, rng, max_expand_frac));
}

inline std::string caption_from_spec(const FigureSpec& spec) {
  std::string c;
  c += kPalette[spec.hair_color].name;
  c += " hair ";
  c += kPalette[spec.top_color].name;
  c += ' ';
  c += kPatternNames[static_cast<int>(spec.top_pattern)];
  c += " top ";
  c += kPalette[spec.pants_color].name;
  c += " pants";
  return c;
}

struct TrainingSample {
  FigureSpec spec;
  Image full_image;
  Image garment_image;
  Image face_crop;
  Box face_box;  // segmentation box before expansion
  Box crop_box;  // box the face crop was cut from
  std::string caption;
  std::vector<Keypoint> keypoints;
  Mask face_mask, garment_mask;
};

/// One clean sample: render, segment, expand-crop the face, caption.
template <class Urbg>
TrainingSample make_sample(const FigureSpec& spec, Urbg& rng, double max_expand_frac) {
  auto fig = render_figure(spec);
  TrainingSample s;
  s.spec = spec;
  s.face_box = segment_face(fig.image, fig.face_mask);
  s.crop_box = random_expand_box(s.face_box, fig.image.height, fig.image.width, rng, max_expand_frac);
  s.face_crop = crop(fig.image, s.crop_box);
  s.full_image = std::move(fig.image);
  s.garment_image = render_garment_flat(spec);
  s.caption = caption_from_spec(spec);
  s.keypoints = std::move(fig.keypoints);
  s.face_mask = std::move(fig.face_mask);
  s.garment_mask = std::move(fig.garment_mask);
  return s;
}

/// Low-quality-data simulation for the pretraining stage.
struct CorruptionConfig {
  double p_jitter = 0.5;           // shift each crop side by up to +-2 px
  double p_drop_pixels = 0.5;      // blank a fraction of garment pixels
  double drop_fraction = 0.1;
  double p_noise = 0.5;            // additive Gaussian noise on both condition images
  double noise_sigma = 0.05;
  double p_caption_drop = 0.2;     // caption replaced by ""

  static CorruptionConfig none() { return {0, 0, 0.1, 0, 0.05, 0}; }
};

inline void to_json(nlohmann::json& j, const CorruptionConfig& c) {
  j = {{"p_jitter", c.p_jitter},   {"p_drop_pixels", c.p_drop_pixels}, {"drop_fraction", c.drop_fraction},
       {"p_noise", c.p_noise},     {"noise_sigma", c.noise_sigma},     {"p_caption_drop", c.p_caption_drop}};
}

inline TrainingSample corrupt_stage1(TrainingSample sample, Rng& rng, const CorruptionConfig& cfg = {}) {
  if (coin(rng, cfg.p_jitter)) {
    std::uniform_int_distribution<int> shift(-2, 2);
    const int h = static_cast<int>(sample.full_image.height), w = static_cast<int>(sample.full_image.width);
    Box b = sample.crop_box;
    b.top = std::clamp(b.top + shift(rng), 0, h - 1);
    b.left = std::clamp(b.left + shift(rng), 0, w - 1);
    b.bottom = std::clamp(b.bottom + shift(rng), b.top, h - 1);
    b.right = std::clamp(b.right + shift(rng), b.left, w - 1);
    sample.crop_box = b;
    sample.face_crop = crop(sample.full_image, b);
  }
  if (coin(rng, cfg.p_drop_pixels)) {
    auto& g = sample.garment_image;
    for (std::size_t y = 0; y < g.height; ++y)
      for (std::size_t x = 0; x < g.width; ++x) {
        const bool is_white = g.at(0, y, x) == 1.0f && g.at(1, y, x) == 1.0f && g.at(2, y, x) == 1.0f;
        if (!is_white && coin(rng, cfg.drop_fraction)) g.set_rgb(y, x, kWhite);
      }
  }
  if (coin(rng, cfg.p_noise)) {
    std::normal_distribution<double> n(0.0, cfg.noise_sigma);
    for (auto& v : sample.garment_image.pixels) v += static_cast<float>(n(rng));
    for (auto& v : sample.face_crop.pixels) v += static_cast<float>(n(rng));
  }
  if (coin(rng, cfg.p_caption_drop)) sample.caption.clear();
  return sample;
}

// ---------------------------------------------------------------------------
// Splits

struct DatasetConfig {
  std::uint64_t seed = 7;
  std::size_t train = 2000;
  std::size_t test = 200;
  std::size_t pretrain = 20000;
};

struct Dataset {
  std::vector<FigureSpec> train, test, pretrain;
};

/// Train and test are sampled without replacement and are disjoint; the
/// pretraining pool excludes the test specs.
inline Dataset make_dataset(const DatasetConfig& cfg) {
  const std::uint64_t space = FigureSpec::space_size();
  if (cfg.train + cfg.test > space) throw ConfigError("dataset larger than the spec space");
  Rng rng(split_seed(cfg.seed, "dataset-specs"));
  std::uniform_int_distribution<std::uint64_t> pick(0, space - 1);
  std::set<std::uint64_t> used, test_ids;
  Dataset d;
  while (d.train.size() < cfg.train) {
    const auto i = pick(rng);
    if (used.insert(i).second) d.train.push_back(FigureSpec::from_index(i));
  }
  while (d.test.size() < cfg.test) {
    const auto i = pick(rng);
    if (used.insert(i).second) {
      test_ids.insert(i);
      d.test.push_back(FigureSpec::from_index(i));
    }
  }
  Rng pre_rng(split_seed(cfg.seed, "dataset-pretrain"));
  while (d.pretrain.size() < cfg.pretrain) {
    const auto i = pick(pre_rng);
    if (!test_ids.count(i)) d.pretrain.push_back(FigureSpec::from_index(i));
  }
  return d;
}

/// Per-sample RNG stream for split `split`, element `index`.
inline std::uint64_t sample_seed(std::uint64_t seed, std::string_view split, std::size_t index) {
  return split_seed(split_seed(seed, split), index);
}

inline double default_expand_frac(std::string_view split) { return split == "pretrain" ? 1.0 : 0.5; }

/// Renders train and test samples to `dir` as PPM files and writes
/// `manifest.jsonl`. Pretraining specs are listed without files since they are
/// re-rendered on the fly. Returns the SHA-256 of the manifest.
inline std::string write_dataset(const std::filesystem::path& dir, const Dataset& d, std::uint64_t seed) {
  std::filesystem::create_directories(dir / "images");
  std::string manifest;
  auto emit = [&](std::string_view split, const std::vector<FigureSpec>& specs, bool with_files) {
    for (std::size_t i = 0; i < specs.size(); ++i) {
      nlohmann::json line = {{"split", split}, {"index", i}, {"spec", specs[i]}};
      if (with_files) {
        Rng rng(sample_seed(seed, split, i));
        const auto s = make_sample(specs[i], rng, default_expand_frac(split));
        const std::string stem = std::string(split) + "_" + std::to_string(i);
        const std::string full = "images/" + stem + "_full.ppm", garment = "images/" + stem + "_garment.ppm",
                          face = "images/" + stem + "_face.ppm";
        write_ppm((dir / full).string(), s.full_image);
        write_ppm((dir / garment).string(), s.garment_image);
        write_ppm((dir / face).string(), s.face_crop);
        nlohmann::json kp = nlohmann::json::array();
        for (const auto& k : s.keypoints) kp.push_back({k.x, k.y, static_cast<int>(k.group)});
        line["full_image"] = full;
        line["garment_image"] = garment;
        line["face_crop"] = face;
        line["caption"] = s.caption;
        line["keypoints"] = kp;
        line["crop_box"] = {s.crop_box.top, s.crop_box.left, s.crop_box.bottom, s.crop_box.right};
      } else {
        line["caption"] = caption_from_spec(specs[i]);
      }
      manifest += line.dump();
      manifest += '\n';
    }
  };
  emit("train", d.train, true);
  emit("test", d.test, true);
  emit("pretrain", d.pretrain, false);
  std::ofstream out(dir / "manifest.jsonl", std::ios::binary);
  out << manifest;
  if (!out) throw DataError("cannot write manifest in " + dir.string());
  return sha256_hex(manifest);
}

/// Reads the spec lists back from a manifest written by write_dataset.
inline Dataset read_manifest(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot open manifest " + file.string());
  Dataset d;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto split = j.at("split").get<std::string>();
      auto spec = j.at("spec").get<FigureSpec>();
      if (split == "train") d.train.push_back(spec);
      else if (split == "test") d.test.push_back(spec);
      else if (split == "pretrain") d.pretrain.push_back(spec);
      else throw DataError("unknown split '" + split + "'");
    } catch (const nlohmann::json::exception& e) {
      throw DataError("manifest line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Attribute readback oracle

struct Attributes {
  int top_color = -1;
  int pants_color = -1;
  int hair_color = -1;
  int face_id = -1;
  int pose_id = -1;
};

namespace detail {

inline float dist2(const Image& img, std::size_t y, std::size_t x, const float (&rgb)[3]) {
  float d = 0;
  for (std::size_t c = 0; c < 3; ++c) {
    const float e = img.at(c, y, x) - rgb[c];
    d += e * e;
  }
  return d;
}

// Index into kPalette of the nearest reference colour, or -1 if the pixel is
// closer to a non-palette reference (white, skin, face feature, background).
inline int nearest_palette(const Image& img, std::size_t y, std::size_t x) {
  int best = -1;
  float best_d = dist2(img, y, x, kWhite);
  for (const auto* ref : {&kSkin, &kFaceFeature}) best_d = std::min(best_d, dist2(img, y, x, *ref));
  for (const auto& bg : kBackgrounds) best_d = std::min(best_d, dist2(img, y, x, bg.rgb));
  for (std::size_t k = 0; k < kPalette.size(); ++k) {
    const float d = dist2(img, y, x, kPalette[k].rgb);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(k);
    }
  }
  return best;
}

inline bool is_background(const Image& img, std::size_t y, std::size_t x) {
  float bg = 1e9f;
  for (const auto& b : kBackgrounds) bg = std::min(bg, dist2(img, y, x, b.rgb));
  float other = std::min({dist2(img, y, x, kWhite), dist2(img, y, x, kSkin), dist2(img, y, x, kFaceFeature)});
  for (const auto& p : kPalette) other = std::min(other, dist2(img, y, x, p.rgb));
  return bg < other;
}

template <class Cells>
int majority_palette(const Image& img, const Cells& cells) {
  std::array<int, kPalette.size()> votes{};
  for (auto [y, x] : cells) {
    const int k = nearest_palette(img, y, x);
    if (k >= 0) ++votes[k];
  }
  const auto it = std::max_element(votes.begin(), votes.end());
  return *it == 0 ? -1 : static_cast<int>(it - votes.begin());
}

inline Mask silhouette(int pose_id) {
  FigureSpec s;
  s.pose_id = pose_id;
  auto fig = render_figure(s);
  Mask m = fig.garment_mask;
  const int dx = layout::pose_offset(pose_id);
  for (int y = layout::kLegsTop; y <= layout::kLegsBottom; ++y)
    for (int x : {12, 13, 14, 17, 18, 19}) m.at(y, x + dx) = 1;
  return m;
}

}  // namespace detail

/// Region-majority colour classifier plus face-code and silhouette matching.
/// Exact on clean renders; the same rules judge generated images.
inline Attributes read_attributes(const Image& img) {
  if (img.channels != 3 || img.height != kImageSize || img.width != kImageSize) {
    throw DimensionError("attribute oracle expects 3x32x32 images");
  }
  using Cell = std::pair<std::size_t, std::size_t>;
  Attributes a;
  std::vector<Cell> torso, legs, hair;
  for (int y = layout::kTorsoTop; y <= layout::kTorsoBottom; ++y)
    for (int x = layout::kTorsoCoreLeft; x <= layout::kTorsoCoreRight; ++x) torso.emplace_back(y, x);
  for (int y = layout::kLegsTop; y <= layout::kLegsBottom; ++y)
    for (int x = 10; x <= 21; ++x) legs.emplace_back(y, x);
  for (int y = layout::kHeadTop; y <= layout::kHeadBottom; ++y)
    for (int x = layout::kHeadLeft; x <= layout::kHeadRight; ++x) {
      const bool inner = y >= layout::kFaceTop && y < layout::kFaceTop + 4 && x >= layout::kFaceLeft &&
                         x < layout::kFaceLeft + 4;
      if (!inner) hair.emplace_back(y, x);
    }
  a.top_color = detail::majority_palette(img, torso);
  a.pants_color = detail::majority_palette(img, legs);
  a.hair_color = detail::majority_palette(img, hair);

  std::uint16_t word = 0;
  for (int fy = 0; fy < 4; ++fy)
    for (int fx = 0; fx < 4; ++fx) {
      const std::size_t y = layout::kFaceTop + fy, x = layout::kFaceLeft + fx;
      if (detail::dist2(img, y, x, kFaceFeature) < detail::dist2(img, y, x, kSkin)) word |= 1u << (fy * 4 + fx);
    }
  int best = kNumFaces;
  for (int f = 0; f < kNumFaces; ++f) {
    const int d = std::popcount(static_cast<std::uint16_t>(word ^ face_codes()[f]));
    if (d < best) {
      best = d;
      a.face_id = f;
    }
  }
  // Reject decodes beyond the code's correction radius.
  if (best > (kFaceCodeMinDistance - 1) / 2) a.face_id = -1;

  static const auto silhouettes = [] {
    std::array<Mask, kNumPoses> s;
    for (int p = 0; p < kNumPoses; ++p) s[p] = detail::silhouette(p);
    return s;
  }();
  int best_score = -1;
  for (int p = 0; p < kNumPoses; ++p) {
    int score = 0;
    for (std::size_t y = layout::kTorsoTop; y < kImageSize; ++y)
      for (std::size_t x = 0; x < kImageSize; ++x) {
        const bool fg = !detail::is_background(img, y, x);
        score += fg == static_cast<bool>(silhouettes[p].at(y, x));
      }
    if (score > best_score) {
      best_score = score;
      a.pose_id = p;
    }
  }
  return a;
}

}  // namespace toa
