#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "toa/checkpoint.hpp"
#include "toa/trainer.hpp"

using namespace toa;
using nlohmann::json;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("toa_io_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

RunConfig tiny_run(std::uint64_t seed = 5) {
  auto r = run_config_from_json({{"seed", seed}});
  const auto init = r.model.init_seed;
  r.model = tiny_model_config();
  r.model.init_seed = init;
  return r;
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_bytes(const std::filesystem::path& p, const std::string& s) {
  std::ofstream(p, std::ios::binary) << s;
}

}  // namespace

TEST(Config, DefaultsAreMaterializedAndRoundTrip) {
  const auto r = run_config_from_json(json::object());
  const auto j = to_json_value(r);
  EXPECT_EQ(j["pretrain"]["batch_size"], 32);
  EXPECT_EQ(j["finetune"]["steps"], 10000);
  EXPECT_EQ(j["model"]["schedule_steps"], 100);
  EXPECT_EQ(to_json_value(run_config_from_json(j)), j);
}

TEST(Config, MasterSeedFansOutToIndependentStreams) {
  const auto a = run_config_from_json({{"seed", 1}}), b = run_config_from_json({{"seed", 2}});
  EXPECT_NE(a.model.init_seed, b.model.init_seed);
  EXPECT_NE(a.pretrain.seed, a.finetune.seed);
  EXPECT_NE(a.pretrain.seed, a.eval.seed);
  EXPECT_EQ(a.data.seed, 1u);
  // An explicit stream seed wins over the fan-out.
  const auto c = run_config_from_json({{"seed", 1}, {"eval", {{"seed", 99}}}});
  EXPECT_EQ(c.eval.seed, 99u);
  EXPECT_EQ(c.pretrain.seed, a.pretrain.seed);
}

TEST(Config, UnknownKeysAreRejected) {
  EXPECT_THROW(run_config_from_json({{"sed", 1}}), ConfigError);
  EXPECT_THROW(run_config_from_json({{"pretrain", {{"lr", 1e-3}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json({{"model", {{"unet", {{"width", 8}}}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json({{"data", {{"train", "many"}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json({{"finetune", {{"p_drop_face", 1.5}}}}), ConfigError);
}

TEST(Config, LoadsFromFile) {
  const auto dir = temp_dir("config");
  write_bytes(dir / "run.json", R"({"seed": 3, "pretrain": {"steps": 12}})");
  const auto r = load_run_config(dir / "run.json");
  EXPECT_EQ(r.seed, 3u);
  EXPECT_EQ(r.pretrain.steps, 12u);
  write_bytes(dir / "bad.json", "{ not json");
  EXPECT_THROW(load_run_config(dir / "bad.json"), ConfigError);
  EXPECT_THROW(load_run_config(dir / "absent.json"), ConfigError);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto dir = temp_dir("roundtrip");
  const auto run = tiny_run();
  TryOnModel<float> m(run.model);
  const auto ck = make_checkpoint(m, run, Stage::pretrain, 7);
  save_checkpoint(ck, dir / "a.toackpt");
  const auto loaded = load_checkpoint(dir / "a.toackpt");
  save_checkpoint(loaded, dir / "b.toackpt");
  EXPECT_EQ(read_bytes(dir / "a.toackpt"), read_bytes(dir / "b.toackpt"));

  TryOnModel<float> other(tiny_run(6).model);
  apply_checkpoint(other, loaded, true);
  const auto want = m.parameters(), got = other.parameters();
  ASSERT_EQ(want.size(), got.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_EQ(want[i].tensor.to_vector(), got[i].tensor.to_vector());
}

TEST(Checkpoint, HeaderCarriesProvenance) {
  const auto run = tiny_run();
  TryOnModel<float> m(run.model);
  const auto ck = make_checkpoint(m, run, Stage::finetune, 42);
  EXPECT_EQ(ck.header["stage"], "finetune");
  EXPECT_EQ(ck.header["step"], 42);
  EXPECT_EQ(ck.header["config_hash"], model_config_hash(run.model));
  EXPECT_EQ(ck.header["vocab_hash"], m.vocab.hash());
  EXPECT_EQ(ck.header["encoder_hash"], m.encoder.weight_hash());
  EXPECT_EQ(ck.header["schedule"]["steps"], 100);
  EXPECT_EQ(to_json_value(run_config_of(ck)), to_json_value(run));
  bool frozen = false, trainable = false;
  for (const auto& r : ck.records) (r.trainable ? trainable : frozen) = true;
  EXPECT_TRUE(frozen);
  EXPECT_TRUE(trainable);
  EXPECT_EQ(ck.records.size(), m.parameters().size());
}

TEST(Checkpoint, TruncationIsCorruptionNotACrash) {
  const auto run = tiny_run();
  TryOnModel<float> m(run.model);
  const auto bytes = serialize_checkpoint(make_checkpoint(m, run, Stage::pretrain, 0));
  for (std::size_t keep : {std::size_t(0), std::size_t(4), std::size_t(8), std::size_t(11), std::size_t(20),
                           bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_THROW(parse_checkpoint(bytes.substr(0, keep)), CorruptionError) << keep;
  }
}

TEST(Checkpoint, FlippedByteIsCorruption) {
  const auto run = tiny_run();
  TryOnModel<float> m(run.model);
  auto bytes = serialize_checkpoint(make_checkpoint(m, run, Stage::pretrain, 0));
  bytes[bytes.size() / 2] ^= 0x10;
  EXPECT_THROW(parse_checkpoint(bytes), CorruptionError);
}

TEST(Checkpoint, WrongMagicIsFormatError) {
  const auto run = tiny_run();
  TryOnModel<float> m(run.model);
  auto bytes = serialize_checkpoint(make_checkpoint(m, run, Stage::pretrain, 0));
  bytes[7] = '2';
  EXPECT_THROW(parse_checkpoint(bytes), FormatError);
  EXPECT_THROW(parse_checkpoint("P6\n32 32\n255\n"), FormatError);
}

TEST(Checkpoint, MissingFileIsLoadError) {
  EXPECT_THROW(load_checkpoint(temp_dir("missing") / "none.toackpt"), LoadError);
}

TEST(Checkpoint, WidthMismatchNamesTheFirstTensor) {
  auto wide = tiny_run();
  wide.model.unet.widths = {8, 16, 16};
  TryOnModel<float> big(wide.model);
  const auto ck = make_checkpoint(big, wide, Stage::pretrain, 0);
  TryOnModel<float> small(tiny_run().model);
  const auto before = small.parameters().front().tensor.to_vector();
  try {
    apply_checkpoint(small, ck);
    FAIL() << "expected LoadError";
  } catch (const LoadError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("shape mismatch"), std::string::npos) << msg;
    EXPECT_NE(msg.find("unet.time1.weight"), std::string::npos) << msg;
  }
  EXPECT_THROW(apply_checkpoint(small, ck, true), LoadError);
  EXPECT_EQ(small.parameters().front().tensor.to_vector(), before);
}

TEST(Checkpoint, ConfigHashMismatchNeedsForce) {
  auto a = tiny_run();
  TryOnModel<float> ma(a.model);
  const auto ck = make_checkpoint(ma, a, Stage::pretrain, 0);
  auto b = tiny_run();
  b.model.unet.heads = 4;  // same tensor shapes, different architecture hash
  TryOnModel<float> mb(b.model);
  EXPECT_THROW(apply_checkpoint(mb, ck), LoadError);
  EXPECT_NO_THROW(apply_checkpoint(mb, ck, true));
}

TEST(Checkpoint, UnknownDtypeIsFormatError) {
  Checkpoint ck;
  ck.header = {{"format", "TOACKPT1"}};
  ck.records.push_back({"x", {2}, DType::f32, true, std::string(8, '\0')});
  auto bytes = serialize_checkpoint(ck);
  // Locate the dtype tag (after name and dims) and rewrite it, then repair the CRC.
  const std::size_t tag = bytes.find('x') + 1 + 1 + 8;
  bytes[tag] = 7;
  const auto body = std::string_view(bytes).substr(8, bytes.size() - 12);
  const std::uint32_t crc = detail::crc32_of(body);
  std::memcpy(bytes.data() + bytes.size() - 4, &crc, 4);
  EXPECT_THROW(parse_checkpoint(bytes), FormatError);
}

TEST(Checkpoint, ModelFromCheckpointRebuildsTheConfig) {
  const auto run = tiny_run(11);
  TryOnModel<float> m(run.model);
  const auto ck = make_checkpoint(m, run, Stage::finetune, 3);
  const auto rebuilt = model_from_checkpoint<float>(ck);
  EXPECT_EQ(model_config_hash(rebuilt.cfg), model_config_hash(run.model));
  EXPECT_EQ(rebuilt.parameters().back().tensor.to_vector(), m.parameters().back().tensor.to_vector());
}
