#pragma once

// Checkpoint file: "TOACKPT1", a length-prefixed JSON header, a counted
// sequence of tensor records, and a CRC32 over everything after the magic.
// All integers and tensor data are little-endian. Writing is deterministic,
// so save -> load -> save reproduces the file byte for byte.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "toa/config.hpp"
#include "toa/error.hpp"
#include "toa/hash.hpp"
#include "toa/model.hpp"

namespace toa {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'T', 'O', 'A', 'C', 'K', 'P', 'T', '1'};

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }
inline std::string dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

struct TensorRecord {
  std::string name;
  Shape shape;
  DType dtype = DType::f32;
  bool trainable = true;
  std::string bytes;

  template <class T>
  std::vector<T> values() const {
    if (dtype != dtype_of<T>()) throw LoadError("tensor '" + name + "' is stored as " + dtype_name(dtype));
    std::vector<T> v(bytes.size() / sizeof(T));
    std::memcpy(v.data(), bytes.data(), bytes.size());
    return v;
  }
};

struct Checkpoint {
  nlohmann::json header;
  std::vector<TensorRecord> records;

  const TensorRecord* find(const std::string& name) const {
    for (const auto& r : records)
      if (r.name == name) return &r;
    return nullptr;
  }
};

namespace detail {

class ByteWriter {
 public:
  template <class I>
  void put(I v) {
    out_.append(reinterpret_cast<const char*>(&v), sizeof(I));
  }
  void put_bytes(std::string_view s) { out_.append(s); }
  std::string& str() { return out_; }

 private:
  std::string out_;
};

class ByteReader {
 public:
  ByteReader(std::string_view data, std::string what) : data_(data), what_(std::move(what)) {}

  template <class I>
  I get() {
    I v;
    std::memcpy(&v, need(sizeof(I)), sizeof(I));
    return v;
  }
  std::string get_bytes(std::size_t n) { return std::string(need(n), n); }
  bool done() const { return pos_ == data_.size(); }

 private:
  const char* need(std::size_t n) {
    if (n > data_.size() - pos_) throw CorruptionError(what_ + ": truncated");
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::string_view data_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::string_view s) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for very large payloads.
  std::size_t off = 0;
  while (off < s.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(s.size() - off, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(s.data() + off), n);
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter body;
  const std::string header = ck.header.dump();
  body.put<std::uint64_t>(header.size());
  body.put_bytes(header);
  body.put<std::uint64_t>(ck.records.size());
  for (const auto& r : ck.records) {
    if (r.bytes.size() != numel(r.shape) * dtype_size(r.dtype)) {
      throw ContractError("tensor '" + r.name + "' byte count does not match its shape");
    }
    body.put<std::uint32_t>(static_cast<std::uint32_t>(r.name.size()));
    body.put_bytes(r.name);
    body.put<std::uint8_t>(static_cast<std::uint8_t>(r.shape.size()));
    for (auto d : r.shape) body.put<std::uint64_t>(d);
    body.put<std::uint8_t>(static_cast<std::uint8_t>(r.dtype));
    body.put<std::uint8_t>(r.trainable ? 1 : 0);
    body.put_bytes(r.bytes);
  }
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  out += body.str();
  const std::uint32_t crc = detail::crc32_of(body.str());
  out.append(reinterpret_cast<const char*>(&crc), sizeof(crc));
  return out;
}

inline Checkpoint parse_checkpoint(std::string_view file, const std::string& what = "checkpoint") {
  if (file.size() < sizeof(kCheckpointMagic) || std::memcmp(file.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    if (file.size() < sizeof(kCheckpointMagic) && std::string_view(kCheckpointMagic, file.size()) == file) {
      throw CorruptionError(what + ": truncated");
    }
    throw FormatError(what + ": bad magic (not a TOACKPT1 file)");
  }
  if (file.size() < sizeof(kCheckpointMagic) + 4) throw CorruptionError(what + ": truncated");
  const auto body = file.substr(sizeof(kCheckpointMagic), file.size() - sizeof(kCheckpointMagic) - 4);
  std::uint32_t stored;
  std::memcpy(&stored, file.data() + file.size() - 4, 4);
  if (detail::crc32_of(body) != stored) throw CorruptionError(what + ": CRC mismatch (truncated or damaged)");

  detail::ByteReader in(body, what);
  Checkpoint ck;
  const auto header_len = in.get<std::uint64_t>();
  try {
    ck.header = nlohmann::json::parse(in.get_bytes(header_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(what + ": header is not JSON: " + e.what());
  }
  const auto count = in.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    TensorRecord r;
    r.name = in.get_bytes(in.get<std::uint32_t>());
    const auto nd = in.get<std::uint8_t>();
    for (int d = 0; d < nd; ++d) r.shape.push_back(in.get<std::uint64_t>());
    const auto tag = in.get<std::uint8_t>();
    if (tag > 1) throw FormatError(what + ": unknown dtype tag " + std::to_string(tag) + " for '" + r.name + "'");
    r.dtype = static_cast<DType>(tag);
    r.trainable = in.get<std::uint8_t>() != 0;
    r.bytes = in.get_bytes(numel(r.shape) * dtype_size(r.dtype));
    ck.records.push_back(std::move(r));
  }
  if (!in.done()) throw FormatError(what + ": trailing bytes after the last record");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write " + path.string());
  const auto bytes = serialize_checkpoint(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw LoadError("write failed for " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str(), path.string());
}

template <std::floating_point T>
std::vector<TensorRecord> records_from(const nn::ParamList<T>& params) {
  std::vector<TensorRecord> out;
  for (const auto& p : params) {
    const auto d = p.tensor.data();
    out.push_back({p.name, p.tensor.shape(), dtype_of<T>(), p.trainable,
                   std::string(reinterpret_cast<const char*>(d.data()), d.size_bytes())});
  }
  return out;
}

/// Every parameter must be present with an identical shape; the first
/// offending tensor is named.
template <std::floating_point T>
std::map<std::string, const TensorRecord*> match_records(const Checkpoint& ck, const nn::ParamList<T>& params) {
  std::map<std::string, const TensorRecord*> by_name;
  for (const auto& r : ck.records) by_name[r.name] = &r;
  for (const auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw LoadError("checkpoint has no tensor '" + p.name + "'");
    if (it->second->shape != p.tensor.shape()) {
      throw LoadError("shape mismatch for tensor '" + p.name + "': checkpoint " + shape_str(it->second->shape) +
                      " vs model " + shape_str(p.tensor.shape()));
    }
  }
  return by_name;
}

/// Copies records into `params` by name after `match_records` succeeds.
template <std::floating_point T>
void assign_records(const Checkpoint& ck, nn::ParamList<T>& params) {
  const auto by_name = match_records(ck, params);
  for (auto& p : params) {
    const auto v = by_name.at(p.name)->template values<T>();
    auto dst = p.tensor.mutable_data();
    std::copy(v.begin(), v.end(), dst.begin());
  }
}

template <std::floating_point T>
std::string encoder_weight_hash(const TryOnModel<T>& m) {
  return m.encoder.weight_hash();
}

/// Header plus every tensor (frozen ones included, flagged as such).
template <std::floating_point T>
Checkpoint make_checkpoint(const TryOnModel<T>& model, const RunConfig& run, Stage stage, std::size_t step) {
  Checkpoint ck;
  ck.header = {{"format", "TOACKPT1"},
               {"config_hash", model_config_hash(model.cfg)},
               {"config", to_json_value(run)},
               {"schedule",
                {{"steps", model.schedule.steps},
                 {"kind", "linear"},
                 {"posterior", model.cfg.posterior == PosteriorVariance::beta ? "beta" : "beta_tilde"}}},
               {"vocab_hash", model.vocab.hash()},
               {"encoder_hash", encoder_weight_hash(model)},
               {"stage", stage_name(stage)},
               {"step", step}};
  ck.records = records_from(model.parameters());
  return ck;
}

/// Loads a checkpoint into an already-constructed model. A config-hash
/// mismatch is refused unless `force`; shapes are always checked.
template <std::floating_point T>
void apply_checkpoint(TryOnModel<T>& model, const Checkpoint& ck, bool force = false) {
  auto params = model.parameters();
  if (!force) {
    const auto want = model_config_hash(model.cfg);
    const auto have = ck.header.value("config_hash", std::string());
    if (have != want) {
      // Shape errors are more informative than a hash mismatch, so try them first.
      match_records(ck, params);
      throw LoadError("checkpoint config hash " + have + " does not match the current config " + want +
                      " (pass --force to override)");
    }
    if (ck.header.value("vocab_hash", std::string()) != model.vocab.hash()) {
      throw LoadError("checkpoint vocabulary hash does not match");
    }
  }
  assign_records(ck, params);
}

/// Rebuilds the run configuration stored in a checkpoint header.
inline RunConfig run_config_of(const Checkpoint& ck) {
  if (!ck.header.contains("config")) throw FormatError("checkpoint header has no config");
  return run_config_from_json(ck.header["config"]);
}

template <std::floating_point T>
TryOnModel<T> model_from_checkpoint(const Checkpoint& ck) {
  TryOnModel<T> model(run_config_of(ck).model);
  apply_checkpoint(model, ck);
  return model;
}

}  // namespace toa
