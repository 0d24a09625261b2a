#pragma once

// Conditioning encoders: the closed-vocabulary tokenizer, the trainable text
// embedder, and a frozen, randomly initialized vision transformer that maps
// any image to a fixed-size grid of hidden-state tokens.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "toa/attributes.hpp"
#include "toa/hash.hpp"
#include "toa/image.hpp"
#include "toa/nn.hpp"

namespace toa {

inline constexpr std::size_t kTextLength = 16;
inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;

class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
    if (words_.size() < 2 || words_[kPadId] != "<pad>" || words_[kUnkId] != "<unk>") {
      throw FormatError("vocabulary must start with <pad> and <unk>");
    }
    for (std::size_t i = 0; i < words_.size(); ++i) {
      if (!index_.emplace(words_[i], static_cast<int>(i)).second) throw FormatError("duplicate vocabulary word '" + words_[i] + "'");
    }
  }

  /// Every word a generated caption can contain.
  static Vocabulary standard() {
    std::vector<std::string> w{"<pad>", "<unk>", "hair", "top", "pants"};
    for (const auto& c : kPalette) w.emplace_back(c.name);
    for (auto p : kPatternNames) w.emplace_back(p);
    return Vocabulary(std::move(w));
  }

  /// Plain text, one token per line; the line index is the id.
  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open vocabulary " + path.string());
    std::vector<std::string> w;
    for (std::string line; std::getline(in, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      w.push_back(line);
    }
    return Vocabulary(std::move(w));
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    for (const auto& w : words_) out << w << '\n';
    if (!out) throw LoadError("cannot write vocabulary " + path.string());
  }

  int id(std::string_view word) const {
    auto it = index_.find(std::string(word));
    return it == index_.end() ? kUnkId : it->second;
  }
  const std::string& word(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) throw RangeError("token id " + std::to_string(id) + " out of vocabulary");
    return words_[id];
  }
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  std::string hash() const {
    Sha256 h;
    for (const auto& w : words_) h.update(w).update("\n");
    return h.hex();
  }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

/// Whitespace split, lookup (unknown words map to <unk>), pad/truncate.
inline std::vector<int> tokenize_caption(std::string_view text, const Vocabulary& vocab,
                                         std::size_t n_text = kTextLength) {
  std::vector<int> ids;
  std::istringstream in{std::string(text)};
  for (std::string w; in >> w && ids.size() < n_text;) ids.push_back(vocab.id(w));
  ids.resize(n_text, kPadId);
  return ids;
}

/// Token table plus learned positions. Lookup is a one-hot product so unused
/// rows get exactly zero gradient.
template <std::floating_point T>
struct TextEmbedder {
  std::size_t vocab_size = 0, length = kTextLength, width = 64;
  Tensor<T> table;      // [V, m]
  Tensor<T> positions;  // [n_text, m]

  TextEmbedder() = default;
  TextEmbedder(std::size_t vocab_size_, std::size_t width_, Rng& rng, std::size_t length_ = kTextLength)
      : vocab_size(vocab_size_),
        length(length_),
        width(width_),
        table(nn::param<T>({vocab_size_, width_}, rng, T(1))),
        positions(nn::param<T>({length_, width_}, rng, T(0.1))) {}

  Tensor<T> one_hot(const std::vector<std::vector<int>>& batch) const {
    std::vector<T> oh(batch.size() * length * vocab_size, T(0));
    for (std::size_t b = 0; b < batch.size(); ++b) {
      if (batch[b].size() != length) {
        throw DimensionError("embed_text: expected " + std::to_string(length) + " ids, got " + std::to_string(batch[b].size()));
      }
      for (std::size_t i = 0; i < length; ++i) {
        const int id = batch[b][i];
        if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) throw RangeError("embed_text: id " + std::to_string(id) + " out of vocabulary");
        oh[(b * length + i) * vocab_size + id] = T(1);
      }
    }
    return Tensor<T>({batch.size(), length, vocab_size}, std::move(oh));
  }

  /// Token rows without positions, [B, n_text, m].
  Tensor<T> lookup(const std::vector<std::vector<int>>& batch) const { return matmul(one_hot(batch), table); }

  Tensor<T> operator()(const std::vector<std::vector<int>>& batch) const { return add(lookup(batch), positions); }

  void collect(const std::string& prefix, nn::ParamList<T>& out) const {
    out.push_back({prefix + ".table", table});
    out.push_back({prefix + ".positions", positions});
  }
};

struct ImageEncoderConfig {
  std::size_t input_res = 24;
  std::size_t patch = 4;
  std::size_t width = 64;
  std::size_t blocks = 2;
  std::size_t heads = 4;
  std::uint64_t seed = 0xC11F;

  std::size_t tokens() const { return (input_res / patch) * (input_res / patch) + 1; }
};

/// Small ViT with frozen random weights: resize, patchify, embed, class
/// token, pre-norm transformer blocks, final norm.
template <std::floating_point T>
class ImageEncoder {
 public:
  explicit ImageEncoder(const ImageEncoderConfig& cfg = {}) : cfg_(cfg) {
    if (cfg.input_res % cfg.patch != 0) throw ConfigError("encoder input resolution must be a multiple of the patch size");
    Rng rng(cfg.seed);
    const std::size_t grid = cfg.input_res / cfg.patch, patch_dim = 3 * cfg.patch * cfg.patch;
    embed_ = nn::Linear<T>(patch_dim, cfg.width, rng);
    cls_ = nn::param<T>({1, 1, cfg.width}, rng, T(1));
    pos_ = nn::param<T>({1, grid * grid + 1, cfg.width}, rng, T(0.5));
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
      Block blk;
      blk.ln1 = nn::LayerNorm<T>(cfg.width);
      blk.attn = nn::Attention<T>(cfg.width, cfg.width, cfg.width, cfg.heads, rng);
      blk.proj = nn::Linear<T>(cfg.width, cfg.width, rng);
      blk.ln2 = nn::LayerNorm<T>(cfg.width);
      blk.fc1 = nn::Linear<T>(cfg.width, 2 * cfg.width, rng);
      blk.fc2 = nn::Linear<T>(2 * cfg.width, cfg.width, rng);
      blocks_.push_back(blk);
    }
    ln_out_ = nn::LayerNorm<T>(cfg.width);
    nn::ParamList<T> all;
    collect("image_encoder", all);
    nn::freeze(all);
  }

  const ImageEncoderConfig& config() const { return cfg_; }
  std::size_t tokens() const { return cfg_.tokens(); }
  std::size_t width() const { return cfg_.width; }

  /// [B, N, M] hidden states for a batch of images of any size.
  Tensor<T> encode(const std::vector<Image>& images) const {
    for (const auto& img : images) {
      if (img.channels != 3) throw FormatError("image encoder expects 3 channels, got " + std::to_string(img.channels));
    }
    std::vector<Image> resized;
    resized.reserve(images.size());
    for (const auto& img : images) resized.push_back(resize_bilinear(img, cfg_.input_res, cfg_.input_res));
    return encode_tensor(to_tensor<T>(resized));
  }

  Tensor<T> encode(const Image& img) const { return encode(std::vector<Image>{img}); }

  /// Same as encode() for an already resized [B, 3, r, r] tensor.
  Tensor<T> encode_tensor(const Tensor<T>& x) const {
    NoGradGuard frozen;
    const std::size_t B = x.size(0), p = cfg_.patch, g = cfg_.input_res / p;
    if (x.dim() != 4 || x.size(1) != 3 || x.size(2) != cfg_.input_res || x.size(3) != cfg_.input_res) {
      throw DimensionError("image encoder input must be [B,3," + std::to_string(cfg_.input_res) + "," +
                           std::to_string(cfg_.input_res) + "], got " + shape_str(x.shape()));
    }
    auto patches = reshape(permute(reshape(x, {B, 3, g, p, g, p}), {0, 2, 4, 1, 3, 5}), {B, g * g, 3 * p * p});
    auto h = concat<T>({add(Tensor<T>({B, 1, 1}, T(0)), cls_), embed_(patches)}, 1);
    h = add(h, pos_);
    for (const auto& blk : blocks_) {
      const auto n1 = blk.ln1(h);
      h = add(h, blk.proj(blk.attn(n1, n1)));
      h = add(h, blk.fc2(silu(blk.fc1(blk.ln2(h)))));
    }
    return ln_out_(h);
  }

  void collect(const std::string& prefix, nn::ParamList<T>& out) const {
    const std::size_t first = out.size();
    embed_.collect(prefix + ".embed", out);
    out.push_back({prefix + ".cls", cls_, false});
    out.push_back({prefix + ".pos", pos_, false});
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const auto& b = blocks_[i];
      const auto pre = prefix + ".block" + std::to_string(i);
      b.ln1.collect(pre + ".ln1", out);
      b.attn.collect(pre + ".attn", out);
      b.proj.collect(pre + ".proj", out);
      b.ln2.collect(pre + ".ln2", out);
      b.fc1.collect(pre + ".fc1", out);
      b.fc2.collect(pre + ".fc2", out);
    }
    ln_out_.collect(prefix + ".ln_out", out);
    for (std::size_t i = first; i < out.size(); ++i) out[i].trainable = false;
  }

  /// SHA-256 over the weights as little-endian float32, in collect() order.
  std::string weight_hash() const {
    nn::ParamList<T> all;
    collect("image_encoder", all);
    Sha256 h;
    for (const auto& p : all) {
      std::vector<float> f(p.tensor.data().begin(), p.tensor.data().end());
      h.update(std::span<const float>(f));
    }
    return h.hex();
  }

 private:
  struct Block {
    nn::LayerNorm<T> ln1, ln2;
    nn::Attention<T> attn;
    nn::Linear<T> proj, fc1, fc2;
  };

  ImageEncoderConfig cfg_;
  nn::Linear<T> embed_;
  Tensor<T> cls_, pos_;
  std::vector<Block> blocks_;
  nn::LayerNorm<T> ln_out_;
};

}  // namespace toa
