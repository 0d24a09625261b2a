#pragma once

// Closed attribute vocabulary of the toy try-on world: garment/hair palette,
// backgrounds, top patterns, face identity codes and poses.

#include <array>
#include <bit>
#include <cstdint>
#include <string_view>

namespace toa {

struct NamedColor {
  std::string_view name;
  float rgb[3];
};

inline constexpr std::array<NamedColor, 8> kPalette{{
    {"red", {0.85f, 0.10f, 0.10f}},
    {"green", {0.10f, 0.60f, 0.15f}},
    {"blue", {0.10f, 0.20f, 0.85f}},
    {"yellow", {0.95f, 0.85f, 0.10f}},
    {"purple", {0.50f, 0.10f, 0.60f}},
    {"orange", {0.95f, 0.50f, 0.05f}},
    {"black", {0.08f, 0.08f, 0.08f}},
    {"cyan", {0.05f, 0.75f, 0.80f}},
}};

inline constexpr std::array<NamedColor, 4> kBackgrounds{{
    {"gray", {0.80f, 0.80f, 0.80f}},
    {"sky", {0.70f, 0.80f, 0.92f}},
    {"mint", {0.75f, 0.90f, 0.75f}},
    {"rose", {0.92f, 0.78f, 0.88f}},
}};

inline constexpr float kWhite[3] = {1.0f, 1.0f, 1.0f};
inline constexpr float kSkin[3] = {0.98f, 0.80f, 0.62f};
inline constexpr float kFaceFeature[3] = {0.30f, 0.16f, 0.08f};

enum class Pattern : int { solid = 0, stripes = 1, dots = 2 };
inline constexpr std::array<std::string_view, 3> kPatternNames{"solid", "stripes", "dots"};

inline constexpr int kNumFaces = 24;
inline constexpr int kNumPoses = 4;
inline constexpr int kFaceCodeMinDistance = 6;

/// 16-bit face identity codes (a 4x4 skin/feature pattern, row-major, bit set
/// = feature tone). Greedy lexicographic code with pairwise Hamming distance
/// >= kFaceCodeMinDistance, skipping the all-skin word.
inline const std::array<std::uint16_t, kNumFaces>& face_codes() {
  static const auto codes = [] {
    std::array<std::uint16_t, kNumFaces> out{};
    int n = 0;
    for (std::uint32_t w = 1; w < 65536 && n < kNumFaces; ++w) {
      bool ok = true;
      for (int i = 0; i < n && ok; ++i) ok = std::popcount(static_cast<std::uint16_t>(w ^ out[i])) >= kFaceCodeMinDistance;
      if (ok && std::popcount(w) >= kFaceCodeMinDistance) out[n++] = static_cast<std::uint16_t>(w);
    }
    return out;
  }();
  return codes;
}

}  // namespace toa
