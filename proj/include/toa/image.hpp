#pragma once

// Planar float images ([channels, height, width], nominal range [0, 1]) and
// binary PPM (P6) I/O.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "toa/error.hpp"
#include "toa/hash.hpp"
#include "toa/tensor.hpp"

namespace toa {

struct Image {
  std::size_t channels = 3, height = 0, width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, float fill = 0.0f)
      : channels(c), height(h), width(w), pixels(c * h * w, fill) {}

  float& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }

  void set_rgb(std::size_t y, std::size_t x, const float (&rgb)[3]) {
    for (std::size_t c = 0; c < 3; ++c) at(c, y, x) = rgb[c];
  }

  bool operator==(const Image&) const = default;
};

/// Inclusive pixel box.
struct Box {
  int top = 0, left = 0, bottom = 0, right = 0;
  int height() const { return bottom - top + 1; }
  int width() const { return right - left + 1; }
  int area() const { return height() * width(); }
  bool contains(const Box& o) const {
    return top <= o.top && left <= o.left && bottom >= o.bottom && right >= o.right;
  }
  bool operator==(const Box&) const = default;
};

inline Image crop(const Image& img, const Box& box) {
  if (box.top < 0 || box.left < 0 || box.bottom >= static_cast<int>(img.height) ||
      box.right >= static_cast<int>(img.width) || box.top > box.bottom || box.left > box.right) {
    throw RangeError("crop box outside image");
  }
  Image out(img.channels, box.height(), box.width());
  for (std::size_t c = 0; c < img.channels; ++c)
    for (int y = 0; y < box.height(); ++y)
      for (int x = 0; x < box.width(); ++x) out.at(c, y, x) = img.at(c, box.top + y, box.left + x);
  return out;
}

/// Half-pixel-centre bilinear resampling with edge clamping.
inline Image resize_bilinear(const Image& img, std::size_t h, std::size_t w) {
  if (img.height == h && img.width == w) return img;
  Image out(img.channels, h, w);
  const double sy = static_cast<double>(img.height) / h, sx = static_cast<double>(img.width) / w;
  for (std::size_t y = 0; y < h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - y0;
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - x0;
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double top = img.at(c, y0, x0) * (1 - wx) + img.at(c, y0, x1) * wx;
        const double bot = img.at(c, y1, x0) * (1 - wx) + img.at(c, y1, x1) * wx;
        out.at(c, y, x) = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

/// Stacks equally sized images into a [B, C, H, W] tensor.
template <std::floating_point T>
Tensor<T> to_tensor(const std::vector<Image>& images) {
  if (images.empty()) throw DimensionError("to_tensor: empty image list");
  const auto& f = images.front();
  std::vector<T> data;
  data.reserve(images.size() * f.pixels.size());
  for (const auto& img : images) {
    if (img.channels != f.channels || img.height != f.height || img.width != f.width) {
      throw DimensionError("to_tensor: images differ in size");
    }
    data.insert(data.end(), img.pixels.begin(), img.pixels.end());
  }
  return Tensor<T>({images.size(), f.channels, f.height, f.width}, std::move(data));
}

/// Batch element `b` of a [B, C, H, W] tensor.
template <std::floating_point T>
Image image_from_tensor(const Tensor<T>& t, std::size_t b) {
  Image img(t.size(1), t.size(2), t.size(3));
  const std::size_t n = img.pixels.size();
  for (std::size_t i = 0; i < n; ++i) img.pixels[i] = static_cast<float>(t[b * n + i]);
  return img;
}

inline Image clamp01(Image img) {
  for (auto& v : img.pixels) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

inline std::string encode_ppm(const Image& img) {
  if (img.channels != 3) throw FormatError("PPM output needs 3 channels");
  std::ostringstream os;
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::string body(img.height * img.width * 3, '\0');
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = std::clamp(img.at(c, y, x), 0.0f, 1.0f);
        body[(y * img.width + x) * 3 + c] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f)));
      }
  return os.str() + body;
}

inline Image decode_ppm(const std::string& bytes) {
  std::istringstream is(bytes);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  is >> magic;
  auto skip_comments = [&] {
    is >> std::ws;
    while (is.peek() == '#') {
      std::string line;
      std::getline(is, line);
      is >> std::ws;
    }
  };
  skip_comments();
  is >> w;
  skip_comments();
  is >> h;
  skip_comments();
  is >> maxval;
  if (magic != "P6" || !is || w == 0 || h == 0 || maxval != 255) throw FormatError("not a binary 8-bit PPM (P6)");
  is.get();
  std::string body(w * h * 3, '\0');
  is.read(body.data(), static_cast<std::streamsize>(body.size()));
  if (static_cast<std::size_t>(is.gcount()) != body.size()) throw FormatError("PPM pixel data truncated");
  Image img(3, h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        img.at(c, y, x) = static_cast<unsigned char>(body[(y * w + x) * 3 + c]) / 255.0f;
  return img;
}

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path + " for writing");
  const auto bytes = encode_ppm(img);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_ppm(ss.str());
}

/// Hash of the 8-bit PPM encoding, i.e. of what would land on disk.
inline std::string image_hash(const Image& img) { return sha256_hex(encode_ppm(img)); }

}  // namespace toa
