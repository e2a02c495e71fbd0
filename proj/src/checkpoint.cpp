#include "far/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace far {

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u8: return 1;
  }
  throw CheckpointError("unknown dtype tag " + std::to_string(static_cast<int>(t)));
}

std::uint64_t TensorRecord::count() const {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

const TensorRecord* Checkpoint::find(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

class Writer {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::byte*>(data);
    out_.insert(out_.end(), p, p + n);
  }
  template <typename T>
  void le(T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<std::byte>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
  }
  std::vector<std::byte>& data() { return out_; }

 private:
  std::vector<std::byte> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::byte> in) : in_(in) {}
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  template <typename T>
  T le() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  std::span<const std::byte> take(std::size_t n) {
    need(n);
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::byte> in_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(std::span<const std::byte> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for very large payloads.
  std::size_t offset = 0;
  while (offset < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - offset, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + offset), chunk);
    offset += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

// Payloads are stored little-endian; on a big-endian host every element is
// byte-swapped on the way in and out.
void write_payload(Writer& w, const TensorRecord& t) {
  const std::size_t width = dtype_size(t.dtype);
  if constexpr (std::endian::native == std::endian::little) {
    w.bytes(t.payload.data(), t.payload.size());
  } else {
    for (std::size_t i = 0; i < t.payload.size(); i += width)
      for (std::size_t b = width; b-- > 0;) w.bytes(&t.payload[i + b], 1);
  }
}

constexpr std::uint32_t kConfigBlockSize = 9 * 4 + 2;

}  // namespace

std::vector<std::byte> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes("FARC", 4);
  w.le<std::uint32_t>(kCheckpointVersion);
  w.le<std::uint32_t>(kConfigBlockSize);
  const auto& c = ckpt.config;
  for (int v : {c.layers, c.dim, c.heads, c.head_dim, c.mlp_ratio, c.patch_size, c.image_size, c.channels, c.num_classes}) {
    w.le<std::uint32_t>(static_cast<std::uint32_t>(v));
  }
  w.le<std::uint8_t>(static_cast<std::uint8_t>(c.precision));
  w.le<std::uint8_t>(static_cast<std::uint8_t>(c.variant));
  w.le<std::uint64_t>(ckpt.tensors.size());
  for (const auto& t : ckpt.tensors) {
    if (t.payload.size() != t.count() * dtype_size(t.dtype)) {
      throw CheckpointError("tensor " + t.name + ": payload size does not match dims and dtype");
    }
    w.le<std::uint32_t>(static_cast<std::uint32_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.le<std::uint32_t>(static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) w.le<std::uint64_t>(d);
    w.le<std::uint8_t>(static_cast<std::uint8_t>(t.dtype));
    write_payload(w, t);
  }
  const auto crc = crc32_of(w.data());
  w.le<std::uint32_t>(crc);
  return std::move(w.data());
}

Checkpoint decode_checkpoint(std::span<const std::byte> bytes) {
  if (bytes.size() < 4 + 4 + 4) throw CheckpointError("checkpoint truncated: " + std::to_string(bytes.size()) + " bytes");
  if (std::memcmp(bytes.data(), "FARC", 4) != 0) throw CheckpointError("bad magic: not a FARC checkpoint");
  const auto body = bytes.first(bytes.size() - 4);
  Reader tail(bytes.last(4));
  const auto stored_crc = tail.le<std::uint32_t>();
  if (crc32_of(body) != stored_crc) throw CheckpointError("CRC-32 mismatch: checkpoint is corrupt");

  Reader r(body);
  r.take(4);
  const auto version = r.le<std::uint32_t>();
  if (version > kCheckpointVersion) {
    throw CheckpointError("checkpoint version " + std::to_string(version) + " is newer than supported version " +
                          std::to_string(kCheckpointVersion));
  }
  if (version == 0) throw CheckpointError("invalid checkpoint version 0");
  const auto config_len = r.le<std::uint32_t>();
  if (config_len < kConfigBlockSize) throw CheckpointError("config block too short");
  Reader cr(r.take(config_len));
  Checkpoint ckpt;
  auto& c = ckpt.config;
  for (int* field : {&c.layers, &c.dim, &c.heads, &c.head_dim, &c.mlp_ratio, &c.patch_size, &c.image_size, &c.channels,
                     &c.num_classes}) {
    *field = static_cast<int>(cr.le<std::uint32_t>());
  }
  const auto precision = cr.le<std::uint8_t>();
  const auto variant = cr.le<std::uint8_t>();
  if (precision > 1 || variant > 1) throw CheckpointError("invalid precision/variant tag in config block");
  c.precision = static_cast<Precision>(precision);
  c.variant = static_cast<Variant>(variant);

  const auto count = r.le<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    TensorRecord t;
    const auto name_len = r.le<std::uint32_t>();
    const auto name = r.take(name_len);
    t.name.assign(reinterpret_cast<const char*>(name.data()), name.size());
    const auto rank = r.le<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) t.dims.push_back(r.le<std::uint64_t>());
    const auto tag = r.le<std::uint8_t>();
    if (tag > 2) throw CheckpointError("tensor " + t.name + ": unknown dtype tag " + std::to_string(tag));
    t.dtype = static_cast<DType>(tag);
    const std::size_t width = dtype_size(t.dtype);
    const auto payload = r.take(static_cast<std::size_t>(t.count()) * width);
    t.payload.assign(payload.begin(), payload.end());
    if constexpr (std::endian::native != std::endian::little) {
      for (std::size_t k = 0; k < t.payload.size(); k += width) std::reverse(t.payload.begin() + k, t.payload.begin() + k + width);
    }
    ckpt.tensors.push_back(std::move(t));
  }
  if (r.pos() != body.size()) throw CheckpointError("trailing bytes after tensor table");
  return ckpt;
}

void write_file_atomic(const std::string& path, std::span<const std::byte> bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + tmp + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

std::vector<std::byte> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path);
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::byte> bytes(size);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (!in) throw CheckpointError("read failed for " + path);
  return bytes;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) { write_file_atomic(path, encode_checkpoint(ckpt)); }

Checkpoint load_checkpoint(const std::string& path) {
  const auto bytes = read_file(path);
  try {
    return decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path + ": " + e.what());
  }
}

Checkpoint dataset_to_checkpoint(const Dataset& d) {
  if (d.classes > 256) throw CheckpointError("dataset files store labels as u8; at most 256 classes");
  Checkpoint ckpt;
  ckpt.config.image_size = d.image_size;
  ckpt.config.channels = d.channels;
  ckpt.config.num_classes = d.classes;
  ckpt.config.patch_size = 1;
  const Shape shape{d.size(), d.channels, d.image_size, d.image_size};
  ckpt.tensors.push_back(make_record<float>("images", shape, d.images.data()));
  TensorRecord labels;
  labels.name = "labels";
  labels.dims = {static_cast<std::uint64_t>(d.size())};
  labels.dtype = DType::u8;
  for (int l : d.labels) labels.payload.push_back(static_cast<std::byte>(l));
  ckpt.tensors.push_back(std::move(labels));
  return ckpt;
}

Dataset dataset_from_checkpoint(const Checkpoint& ckpt) {
  const auto* images = ckpt.find("images");
  const auto* labels = ckpt.find("labels");
  if (!images || !labels || images->dims.size() != 4 || labels->dtype != DType::u8 || images->dtype != DType::f32) {
    throw CheckpointError("not a dataset file: expected f32 'images' (n,C,H,W) and u8 'labels'");
  }
  Dataset d;
  d.channels = static_cast<int>(images->dims[1]);
  d.image_size = static_cast<int>(images->dims[2]);
  d.classes = ckpt.config.num_classes;
  const auto n = static_cast<Eigen::Index>(images->dims[0]);
  d.images = record_matrix<float>(*images, n, static_cast<Eigen::Index>(images->count()) / std::max<Eigen::Index>(n, 1));
  for (auto b : labels->payload) d.labels.push_back(static_cast<int>(b));
  if (static_cast<Eigen::Index>(d.labels.size()) != n) throw CheckpointError("dataset: label count mismatch");
  assign_split(d);
  return d;
}

}  // namespace far
