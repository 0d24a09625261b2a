#include <gtest/gtest.h>

#include <filesystem>
#include <limits>
#include <set>
#include <sstream>

#include "toa/data.hpp"

using namespace toa;

namespace {

FigureSpec example_spec() {
  FigureSpec s;
  s.face_id = 5;
  s.hair_color = 6;
  s.top_color = 0;
  s.pants_color = 2;
  s.top_pattern = Pattern::stripes;
  s.pose_id = 1;
  s.background = 3;
  return s;
}

// Always returns its maximum value.
struct MaxRng {
  using result_type = std::uint64_t;
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()() { return max(); }
};

std::vector<std::string> words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

}  // namespace

TEST(Attributes, FaceCodesAreSeparated) {
  const auto& codes = face_codes();
  for (int i = 0; i < kNumFaces; ++i) {
    EXPECT_GE(std::popcount(codes[i]), kFaceCodeMinDistance);
    for (int j = i + 1; j < kNumFaces; ++j)
      EXPECT_GE(std::popcount(static_cast<std::uint16_t>(codes[i] ^ codes[j])), kFaceCodeMinDistance);
  }
  EXPECT_GE(kNumFaces, 20);
  EXPECT_GE(kNumPoses, 4);
  EXPECT_GE(kPalette.size(), 8u);
}

TEST(Render, Deterministic) {
  auto a = render_figure(example_spec()), b = render_figure(example_spec());
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.keypoints, b.keypoints);
}

TEST(Render, InvalidPaletteIdIsRangeError) {
  auto s = example_spec();
  s.top_color = 8;
  EXPECT_THROW(render_figure(s), RangeError);
  s = example_spec();
  s.face_id = -1;
  EXPECT_THROW(render_figure(s), RangeError);
}

TEST(Render, TopColorChangesOnlyGarmentPixels) {
  for (int pose = 0; pose < kNumPoses; ++pose) {
    for (Pattern p : {Pattern::solid, Pattern::stripes, Pattern::dots}) {
      auto s = example_spec();
      s.pose_id = pose;
      s.top_pattern = p;
      auto a = render_figure(s);
      s.top_color = 4;
      auto b = render_figure(s);
      std::size_t changed = 0;
      for (std::size_t y = 0; y < kImageSize; ++y)
        for (std::size_t x = 0; x < kImageSize; ++x) {
          bool diff = false;
          for (std::size_t c = 0; c < 3; ++c) diff |= a.image.at(c, y, x) != b.image.at(c, y, x);
          if (diff) {
            ++changed;
            EXPECT_TRUE(a.garment_mask.at(y, x)) << "pixel " << y << "," << x;
          }
        }
      EXPECT_GT(changed, 0u);
    }
  }
}

TEST(Render, MasksDisjoint) {
  Rng rng(1);
  std::uniform_int_distribution<std::uint64_t> pick(0, FigureSpec::space_size() - 1);
  for (int i = 0; i < 200; ++i) {
    auto f = render_figure(FigureSpec::from_index(pick(rng)));
    for (std::size_t k = 0; k < f.face_mask.bits.size(); ++k) EXPECT_FALSE(f.face_mask.bits[k] && f.garment_mask.bits[k]);
  }
}

TEST(Render, NoHashCollisionsOnSample) {
  Rng rng(2);
  std::uniform_int_distribution<std::uint64_t> pick(0, FigureSpec::space_size() - 1);
  std::set<std::uint64_t> ids;
  while (ids.size() < 1000) ids.insert(pick(rng));
  std::set<std::string> hashes;
  for (auto i : ids) hashes.insert(image_hash(render_figure(FigureSpec::from_index(i)).image));
  EXPECT_EQ(hashes.size(), 1000u);
  EXPECT_EQ(FigureSpec::space_size(), std::uint64_t(kNumFaces) * kNumPoses * 512 * 3 * 4);
}

TEST(Render, SpaceIndexRoundTrip) {
  std::set<std::tuple<int, int, int, int, int, int, int>> seen;
  for (std::uint64_t i = 0; i < FigureSpec::space_size(); i += 97) {
    auto s = FigureSpec::from_index(i);
    EXPECT_NO_THROW(s.validate());
    seen.insert({s.face_id, s.hair_color, s.top_color, s.pants_color, int(s.top_pattern), s.pose_id, s.background});
  }
  EXPECT_EQ(seen.size(), (FigureSpec::space_size() + 96) / 97);
}

TEST(GarmentFlat, DominantColorAndWhiteBackground) {
  for (int color = 0; color < 8; ++color) {
    auto s = example_spec();
    s.top_color = color;
    s.top_pattern = Pattern::dots;
    auto g = render_garment_flat(s);
    std::size_t white = 0, colored = 0;
    for (std::size_t y = 0; y < kImageSize; ++y)
      for (std::size_t x = 0; x < kImageSize; ++x) {
        const bool w = g.at(0, y, x) == 1.f && g.at(1, y, x) == 1.f && g.at(2, y, x) == 1.f;
        white += w;
        colored += g.at(0, y, x) == kPalette[color].rgb[0] && g.at(1, y, x) == kPalette[color].rgb[1] &&
                   g.at(2, y, x) == kPalette[color].rgb[2];
      }
    EXPECT_GT(white, kImageSize * kImageSize / 2);
    EXPECT_EQ(white + colored, kImageSize * kImageSize);
  }
}

TEST(GarmentFlat, PatternsDiffer) {
  auto s = example_spec();
  std::set<std::string> h;
  for (Pattern p : {Pattern::solid, Pattern::stripes, Pattern::dots}) {
    s.top_pattern = p;
    h.insert(image_hash(render_garment_flat(s)));
  }
  EXPECT_EQ(h.size(), 3u);
}

TEST(SegmentFace, CanonicalBoxAndContainment) {
  auto f = render_figure(example_spec());
  auto box = segment_face(f.image, f.face_mask);
  EXPECT_EQ(box.top, 2);
  EXPECT_EQ(box.bottom, 9);
  for (std::size_t y = 0; y < kImageSize; ++y)
    for (std::size_t x = 0; x < kImageSize; ++x)
      if (f.face_mask.at(y, x)) {
        EXPECT_TRUE(box.contains(Box{int(y), int(x), int(y), int(x)}));
      }
  EXPECT_LE(box.area(), int(kImageSize * kImageSize));
}

TEST(SegmentFace, EmptyMaskIsDataError) {
  auto f = render_figure(example_spec());
  EXPECT_THROW(segment_face(f.image, Mask{}), DataError);
}

TEST(ExpandCrop, ZeroExpansionIsExactBox) {
  auto f = render_figure(example_spec());
  auto box = segment_face(f.image, f.face_mask);
  Rng rng(3);
  EXPECT_EQ(random_expand_crop(f.image, box, rng, 0.0), crop(f.image, box));
}

TEST(ExpandCrop, MaximalDrawGivesWholeImage) {
  auto f = render_figure(example_spec());
  auto box = segment_face(f.image, f.face_mask);
  MaxRng rng;
  EXPECT_EQ(random_expand_crop(f.image, box, rng, 1.0), f.image);
}

TEST(ExpandCrop, AlwaysContainsFaceBox) {
  auto f = render_figure(example_spec());
  auto box = segment_face(f.image, f.face_mask);
  Rng rng(4);
  for (int i = 0; i < 1000; ++i) {
    auto grown = random_expand_box(box, kImageSize, kImageSize, rng, 1.0);
    EXPECT_TRUE(grown.contains(box));
    EXPECT_GE(grown.top, 0);
    EXPECT_LT(grown.right, int(kImageSize));
  }
  EXPECT_THROW(random_expand_box(box, kImageSize, kImageSize, rng, 1.5), RangeError);
}

TEST(Caption, TemplateAndPoseInvariance) {
  auto s = example_spec();
  EXPECT_EQ(caption_from_spec(s), "black hair red stripes top blue pants");
  auto t = s;
  t.pose_id = 3;
  t.background = 0;
  EXPECT_EQ(caption_from_spec(s), caption_from_spec(t));
  EXPECT_LE(words(caption_from_spec(s)).size(), 16u);
}

TEST(Corrupt, ZeroProbabilitiesIsIdentity) {
  Rng rng(5);
  auto s = make_sample(example_spec(), rng, 0.5);
  auto c = corrupt_stage1(s, rng, CorruptionConfig::none());
  EXPECT_EQ(c.face_crop, s.face_crop);
  EXPECT_EQ(c.garment_image, s.garment_image);
  EXPECT_EQ(c.caption, s.caption);
  EXPECT_EQ(c.crop_box, s.crop_box);
}

TEST(Corrupt, NoiseMeanAbsoluteDelta) {
  CorruptionConfig cfg = CorruptionConfig::none();
  cfg.p_noise = 1.0;
  Rng rng(6);
  double total = 0;
  std::size_t count = 0;
  for (int i = 0; i < 1000; ++i) {
    auto s = make_sample(FigureSpec::from_index(i * 131), rng, 0.5);
    auto c = corrupt_stage1(s, rng, cfg);
    for (std::size_t k = 0; k < s.garment_image.pixels.size(); ++k) {
      total += std::abs(c.garment_image.pixels[k] - s.garment_image.pixels[k]);
      ++count;
    }
  }
  // Half-normal mean sigma * sqrt(2 / pi).
  EXPECT_NEAR(total / count, 0.05 * std::sqrt(2.0 / M_PI), 0.01);
  EXPECT_NEAR(total / count, 0.04, 0.01);
}

TEST(Corrupt, CaptionDropRate) {
  CorruptionConfig cfg = CorruptionConfig::none();
  cfg.p_caption_drop = 0.2;
  Rng rng(7);
  auto s = make_sample(example_spec(), rng, 0.5);
  int dropped = 0;
  for (int i = 0; i < 1000; ++i) dropped += corrupt_stage1(s, rng, cfg).caption.empty();
  EXPECT_NEAR(dropped / 1000.0, 0.2, 0.03);
}

TEST(Corrupt, PixelDropAndJitter) {
  CorruptionConfig cfg = CorruptionConfig::none();
  cfg.p_drop_pixels = 1.0;
  cfg.p_jitter = 1.0;
  Rng rng(8);
  auto s = make_sample(example_spec(), rng, 0.0);
  std::size_t garment_px = 0, dropped = 0;
  bool moved = false;
  for (int i = 0; i < 200; ++i) {
    auto c = corrupt_stage1(s, rng, cfg);
    moved |= !(c.crop_box == s.crop_box);
    EXPECT_EQ(c.face_crop, crop(s.full_image, c.crop_box));
    for (std::size_t y = 0; y < kImageSize; ++y)
      for (std::size_t x = 0; x < kImageSize; ++x) {
        const bool was = s.garment_image.at(0, y, x) != 1.f || s.garment_image.at(1, y, x) != 1.f;
        const bool now = c.garment_image.at(0, y, x) != 1.f || c.garment_image.at(1, y, x) != 1.f;
        garment_px += was;
        dropped += was && !now;
      }
  }
  EXPECT_TRUE(moved);
  EXPECT_NEAR(double(dropped) / garment_px, 0.1, 0.01);
}

TEST(Dataset, DeterministicDisjointSplits) {
  DatasetConfig cfg;
  cfg.pretrain = 3000;
  auto a = make_dataset(cfg), b = make_dataset(cfg);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  EXPECT_EQ(a.pretrain, b.pretrain);
  ASSERT_EQ(a.train.size(), 2000u);
  ASSERT_EQ(a.test.size(), 200u);
  auto key = [](const FigureSpec& s) { return nlohmann::json(s).dump(); };
  std::set<std::string> train, test;
  for (auto& s : a.train) train.insert(key(s));
  for (auto& s : a.test) test.insert(key(s));
  EXPECT_EQ(train.size(), 2000u);
  EXPECT_EQ(test.size(), 200u);
  for (auto& s : a.test) EXPECT_FALSE(train.count(key(s)));
  for (auto& s : a.pretrain) EXPECT_FALSE(test.count(key(s)));
  cfg.seed = 8;
  EXPECT_NE(make_dataset(cfg).train, a.train);
}

TEST(Dataset, ManifestRoundTripAndStableHash) {
  DatasetConfig cfg;
  cfg.train = 12;
  cfg.test = 4;
  cfg.pretrain = 6;
  auto d = make_dataset(cfg);
  const auto dir = std::filesystem::temp_directory_path() / "toa_data_test";
  std::filesystem::remove_all(dir);
  const auto h1 = write_dataset(dir, d, cfg.seed);
  const auto h2 = write_dataset(dir, d, cfg.seed);
  EXPECT_EQ(h1, h2);
  auto back = read_manifest(dir / "manifest.jsonl");
  EXPECT_EQ(back.train, d.train);
  EXPECT_EQ(back.test, d.test);
  EXPECT_EQ(back.pretrain, d.pretrain);
  Rng rng(sample_seed(cfg.seed, "train", 3));
  auto s = make_sample(d.train[3], rng, 0.5);
  auto full = read_ppm((dir / "images/train_3_full.ppm").string());
  EXPECT_EQ(image_hash(full), image_hash(s.full_image));
  EXPECT_EQ(read_ppm((dir / "images/train_3_face.ppm").string()).width, s.face_crop.width);
  std::filesystem::remove_all(dir);
}

TEST(Oracle, ExactReadbackOnCleanRenders) {
  Rng rng(9);
  std::uniform_int_distribution<std::uint64_t> pick(0, FigureSpec::space_size() - 1);
  for (int i = 0; i < 2000; ++i) {
    auto spec = FigureSpec::from_index(pick(rng));
    auto a = read_attributes(render_figure(spec).image);
    ASSERT_EQ(a.top_color, spec.top_color) << nlohmann::json(spec).dump();
    ASSERT_EQ(a.pants_color, spec.pants_color) << nlohmann::json(spec).dump();
    ASSERT_EQ(a.hair_color, spec.hair_color) << nlohmann::json(spec).dump();
    ASSERT_EQ(a.face_id, spec.face_id) << nlohmann::json(spec).dump();
    ASSERT_EQ(a.pose_id, spec.pose_id) << nlohmann::json(spec).dump();
  }
}

TEST(Oracle, ExhaustiveOverFacesPosesAndColors) {
  FigureSpec s = example_spec();
  for (s.face_id = 0; s.face_id < kNumFaces; ++s.face_id)
    for (s.pose_id = 0; s.pose_id < kNumPoses; ++s.pose_id)
      for (s.top_color = 0; s.top_color < 8; ++s.top_color) {
        s.hair_color = (s.top_color + 3) % 8;
        s.pants_color = (s.top_color + 5) % 8;
        auto a = read_attributes(render_figure(s).image);
        ASSERT_EQ(a.top_color, s.top_color);
        ASSERT_EQ(a.face_id, s.face_id);
        ASSERT_EQ(a.pose_id, s.pose_id);
        ASSERT_EQ(a.hair_color, s.hair_color);
        ASSERT_EQ(a.pants_color, s.pants_color);
      }
}

TEST(Oracle, WrongSizeIsDimensionError) {
  EXPECT_THROW(read_attributes(Image(3, 16, 16)), DimensionError);
}
