#include "doctest.h"

#include "far/checkpoint.hpp"
#include "far/hoyer.hpp"

#include <cstdio>
#include <filesystem>

using namespace far;

namespace {

// Bitwise reflected CRC-32 (polynomial 0xEDB88320), independent of zlib.
std::uint32_t crc_oracle(std::span<const std::byte> bytes) {
  std::uint32_t crc = 0xFFFFFFFFu;
  for (auto b : bytes) {
    crc ^= static_cast<std::uint32_t>(b);
    for (int k = 0; k < 8; ++k) crc = (crc >> 1) ^ (0xEDB88320u & (0u - (crc & 1u)));
  }
  return ~crc;
}

void reseal(std::vector<std::byte>& bytes) {
  const auto crc = crc_oracle(std::span<const std::byte>(bytes).first(bytes.size() - 4));
  for (int i = 0; i < 4; ++i) bytes[bytes.size() - 4 + static_cast<std::size_t>(i)] = static_cast<std::byte>((crc >> (8 * i)) & 0xFF);
}

std::uint32_t read_u32(const std::vector<std::byte>& b, std::size_t pos) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[pos + static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

ModelConfig small_config() {
  ModelConfig c;
  c.layers = 2;
  c.dim = 8;
  c.heads = 2;
  c.head_dim = 4;
  c.patch_size = 4;
  c.image_size = 8;
  c.channels = 3;
  c.num_classes = 5;
  return c;
}

struct TempDir {
  std::filesystem::path path = std::filesystem::temp_directory_path() / ("farc_test_" + std::to_string(std::random_device{}()));
  TempDir() { std::filesystem::create_directories(path); }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("layout: magic, version and trailing CRC") {
  auto m = make_teacher<float>(small_config(), 1);
  const auto bytes = encode_checkpoint(to_checkpoint(m));
  REQUIRE(bytes.size() > 16);
  CHECK(std::memcmp(bytes.data(), "FARC", 4) == 0);
  CHECK(read_u32(bytes, 4) == kCheckpointVersion);
  CHECK(read_u32(bytes, 8) == 38);
  CHECK(read_u32(bytes, bytes.size() - 4) == crc_oracle(std::span<const std::byte>(bytes).first(bytes.size() - 4)));
}

TEST_CASE("save, load, save is byte-identical") {
  TempDir dir;
  for (auto variant : {Variant::attention, Variant::far}) {
    auto c = small_config();
    c.variant = variant;
    auto m = make_model<float>(c, 2);
    if (variant == Variant::far) prune_by_threshold(m, 0.9, ThresholdMode::relative);
    save_model(m, dir.file("a.farc"));
    const auto loaded = load_model<float>(dir.file("a.farc"));
    save_model(loaded, dir.file("b.farc"));
    CHECK(read_file(dir.file("a.farc")) == read_file(dir.file("b.farc")));
    const auto pa = named_parameters(m);
    const auto pb = named_parameters(loaded);
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
      CHECK(pa[i].name == pb[i].name);
      CHECK(pa[i].tensor.shape() == pb[i].tensor.shape());
      CHECK(std::memcmp(pa[i].tensor.value().data(), pb[i].tensor.value().data(), sizeof(float) * static_cast<std::size_t>(pa[i].tensor.size())) == 0);
    }
    CHECK(model_masks(m) == model_masks(loaded));
  }
}

TEST_CASE("f64 models round trip exactly") {
  auto c = small_config();
  c.variant = Variant::far;
  auto m = make_model<double>(c, 3);
  const auto ckpt = to_checkpoint(m);
  CHECK(ckpt.config.precision == Precision::f64);
  const auto back = model_from_checkpoint<double>(decode_checkpoint(encode_checkpoint(ckpt)));
  const auto pa = named_parameters(m);
  const auto pb = named_parameters(back);
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].tensor.value() == pb[i].tensor.value());
}

TEST_CASE("masks are stored as u8 tensors") {
  auto c = small_config();
  c.variant = Variant::far;
  auto m = make_model<float>(c, 4);
  const auto masks = prune_by_threshold(m, 0.9, ThresholdMode::relative);
  const auto ckpt = to_checkpoint(m);
  const auto* r = ckpt.find(mask_name(1, 0, Direction::reverse));
  REQUIRE(r != nullptr);
  CHECK(r->dtype == DType::u8);
  CHECK(r->dims == std::vector<std::uint64_t>{4});
  for (std::size_t j = 0; j < 4; ++j) CHECK(static_cast<std::uint8_t>(r->payload[j]) == masks[1].at(0, Direction::reverse).keep[j]);
  // Masked coordinates are exactly zero in the stored weights.
  const auto back = model_from_checkpoint<float>(ckpt);
  auto resealed = clone(back);
  apply_masks(resealed);
  const auto a = named_parameters(back);
  const auto b = named_parameters(resealed);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].tensor.value() == b[i].tensor.value());
}

TEST_CASE("shrunk models load with their stored shapes") {
  auto c = small_config();
  c.variant = Variant::far;
  auto m = make_model<double>(c, 5);
  prune_by_threshold(m, 0.9, ThresholdMode::relative);
  const auto shrunk = shrink_model(m);
  const auto back = model_from_checkpoint<double>(to_checkpoint(shrunk));
  CHECK(parameter_count(back) == parameter_count(shrunk));
}

TEST_CASE("single corrupted byte fails the CRC") {
  auto m = make_teacher<float>(small_config(), 6);
  const auto good = encode_checkpoint(to_checkpoint(m));
  for (std::size_t pos : {std::size_t{0}, std::size_t{5}, good.size() / 2, good.size() - 9, good.size() - 1}) {
    auto bad = good;
    bad[pos] ^= std::byte{0x01};
    CHECK_THROWS_AS(decode_checkpoint(bad), CheckpointError);
  }
  auto bad = good;
  bad[good.size() / 2] ^= std::byte{0x40};
  try {
    decode_checkpoint(bad);
    FAIL("expected a CRC failure");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("CRC") != std::string::npos);
  }
}

TEST_CASE("truncated files are rejected") {
  auto m = make_teacher<float>(small_config(), 7);
  const auto good = encode_checkpoint(to_checkpoint(m));
  for (std::size_t keep : {std::size_t{0}, std::size_t{3}, std::size_t{11}, std::size_t{60}, good.size() - 1}) {
    std::vector<std::byte> cut(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(keep));
    if (cut.size() >= 16) reseal(cut);  // even with a valid CRC the table is short
    CHECK_THROWS_AS(decode_checkpoint(cut), CheckpointError);
  }
}

TEST_CASE("future versions and unknown dtype tags are rejected") {
  Checkpoint ckpt;
  ckpt.config = small_config();
  const float v = 1.5f;
  ckpt.tensors.push_back(make_record<float>("x", Shape{1}, &v));
  const auto good = encode_checkpoint(ckpt);
  CHECK(decode_checkpoint(good) == ckpt);

  auto future = good;
  future[4] = std::byte{static_cast<unsigned char>(kCheckpointVersion + 1)};
  reseal(future);
  CHECK_THROWS_AS(decode_checkpoint(future), CheckpointError);

  // magic + version + config_len + config + count + name_len + "x" + rank + dim
  const std::size_t dtype_pos = 4 + 4 + 4 + 38 + 8 + 4 + 1 + 4 + 8;
  REQUIRE(static_cast<int>(good[dtype_pos]) == 0);
  auto unknown = good;
  unknown[dtype_pos] = std::byte{7};
  reseal(unknown);
  try {
    decode_checkpoint(unknown);
    FAIL("expected a dtype failure");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("dtype") != std::string::npos);
  }
}

TEST_CASE("empty tensor table loads a config-only shell") {
  Checkpoint ckpt;
  ckpt.config = small_config();
  ckpt.config.variant = Variant::far;
  const auto back = decode_checkpoint(encode_checkpoint(ckpt));
  CHECK(back.tensors.empty());
  CHECK(back.config == ckpt.config);
  const auto shell = model_from_checkpoint<float>(back);
  CHECK(shell.variant() == Variant::far);
  CHECK(parameter_count(shell) > 0);
}

TEST_CASE("missing or unknown tensors are errors") {
  auto m = make_teacher<float>(small_config(), 8);
  auto ckpt = to_checkpoint(m);
  auto extra = ckpt;
  const float v = 0.0f;
  extra.tensors.push_back(make_record<float>("stray", Shape{1}, &v));
  CHECK_THROWS_AS(model_from_checkpoint<float>(extra), CheckpointError);
  ckpt.tensors.erase(ckpt.tensors.begin() + 3);
  CHECK_THROWS_AS(model_from_checkpoint<float>(ckpt), CheckpointError);
}

TEST_CASE("atomic writes leave no temporary behind") {
  TempDir dir;
  const std::vector<std::byte> payload{std::byte{1}, std::byte{2}, std::byte{3}};
  write_file_atomic(dir.file("x.bin"), payload);
  CHECK(read_file(dir.file("x.bin")) == payload);
  int entries = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir.path)) ++entries;
  CHECK(entries == 1);
  CHECK_THROWS_AS(read_file(dir.file("nope.bin")), CheckpointError);
  CHECK_THROWS_AS(write_file_atomic(dir.file("no/such/dir/x.bin"), payload), CheckpointError);
}

TEST_CASE("dataset files round trip") {
  const auto d = synth_dataset(9, 40, 4, 8, 3);
  const auto back = dataset_from_checkpoint(decode_checkpoint(encode_checkpoint(dataset_to_checkpoint(d))));
  CHECK(back == d);
  CHECK_THROWS_AS(dataset_from_checkpoint(to_checkpoint(make_teacher<float>(small_config(), 1))), CheckpointError);
}
