#pragma once

#include "far/config.hpp"
#include "far/dataset.hpp"
#include "far/model.hpp"

#include <cstddef>
#include <cstring>
#include <span>
#include <stdexcept>

namespace far {

/// Binary layout (all integers little-endian):
///
///   "FARC" | u32 version | u32 config_len | config block
///   | u64 tensor_count | tensors... | u32 crc32(all preceding bytes)
///
/// config block: u32 layers, dim, heads, head_dim, mlp_ratio, patch_size,
/// image_size, channels, num_classes; u8 precision; u8 variant.
/// tensor: u32 name_len | name (UTF-8) | u32 rank | u64 dims[rank] | u8 dtype | payload.
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2 };

std::size_t dtype_size(DType t);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TensorRecord {
  std::string name;
  std::vector<std::uint64_t> dims;
  DType dtype = DType::f32;
  std::vector<std::byte> payload;

  std::uint64_t count() const;
  bool operator==(const TensorRecord&) const = default;
};

struct Checkpoint {
  ModelConfig config;
  std::vector<TensorRecord> tensors;

  const TensorRecord* find(std::string_view name) const;
  bool operator==(const Checkpoint&) const = default;
};

std::vector<std::byte> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::byte> bytes);

/// Writes to a temporary sibling and renames it into place.
void write_file_atomic(const std::string& path, std::span<const std::byte> bytes);
std::vector<std::byte> read_file(const std::string& path);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

template <typename Scalar>
TensorRecord make_record(const std::string& name, const Shape& shape, const Scalar* data) {
  static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>);
  TensorRecord r;
  r.name = name;
  for (auto d : shape) r.dims.push_back(static_cast<std::uint64_t>(d));
  r.dtype = std::is_same_v<Scalar, float> ? DType::f32 : DType::f64;
  const std::size_t n = static_cast<std::size_t>(numel(shape));
  r.payload.resize(n * sizeof(Scalar));
  std::memcpy(r.payload.data(), data, r.payload.size());
  return r;
}

/// Copies a float record into a matrix of the requested scalar type.
template <typename Scalar>
MatrixX<Scalar> record_matrix(const TensorRecord& r, Eigen::Index rows, Eigen::Index cols) {
  if (static_cast<Eigen::Index>(r.count()) != rows * cols) throw CheckpointError("tensor " + r.name + ": element count mismatch");
  MatrixX<Scalar> m(rows, cols);
  if (r.dtype == DType::f32) {
    std::vector<float> tmp(r.count());
    std::memcpy(tmp.data(), r.payload.data(), r.payload.size());
    for (std::size_t i = 0; i < tmp.size(); ++i) m.data()[i] = static_cast<Scalar>(tmp[i]);
  } else if (r.dtype == DType::f64) {
    std::vector<double> tmp(r.count());
    std::memcpy(tmp.data(), r.payload.data(), r.payload.size());
    for (std::size_t i = 0; i < tmp.size(); ++i) m.data()[i] = static_cast<Scalar>(tmp[i]);
  } else {
    throw CheckpointError("tensor " + r.name + ": expected a floating-point dtype");
  }
  return m;
}

inline std::string mask_name(int layer, int head, Direction d) {
  return "far." + std::to_string(layer) + "." + std::to_string(head) + "." + direction_name(d) + ".mask";
}

template <typename Scalar>
Checkpoint to_checkpoint(const VisionModel<Scalar>& model) {
  Checkpoint ckpt;
  ckpt.config = model.config;
  ckpt.config.precision = std::is_same_v<Scalar, float> ? Precision::f32 : Precision::f64;
  for (const auto& p : named_parameters(model)) {
    ckpt.tensors.push_back(make_record<Scalar>(p.name, p.tensor.shape(), p.tensor.value().data()));
  }
  for (std::size_t l = 0; l < model.far.size(); ++l) {
    const auto& mask = model.far[l].mask;
    if (!mask) continue;
    for (std::size_t n = 0; n < mask->heads.size(); ++n) {
      for (auto d : {Direction::forward, Direction::reverse}) {
        const auto& keep = mask->heads[n][static_cast<std::size_t>(d)].keep;
        TensorRecord r;
        r.name = mask_name(static_cast<int>(l), static_cast<int>(n), d);
        r.dims = {keep.size()};
        r.dtype = DType::u8;
        r.payload.resize(keep.size());
        std::memcpy(r.payload.data(), keep.data(), keep.size());
        ckpt.tensors.push_back(std::move(r));
      }
    }
  }
  return ckpt;
}

/// Freshly initialized model of either variant for `config`.
template <typename Scalar>
VisionModel<Scalar> make_model(const ModelConfig& config, std::uint64_t seed) {
  auto teacher = make_teacher<Scalar>(config, seed);
  if (config.variant == Variant::attention) return teacher;
  return replace_attention(teacher, seed + 1);
}

/// Rebuilds a model from a checkpoint. An empty tensor table yields a
/// config-only shell (deterministically initialized); otherwise every
/// parameter must be present. Stored shapes win over config shapes so that
/// physically shrunk blocks load as saved.
template <typename Scalar>
VisionModel<Scalar> model_from_checkpoint(const Checkpoint& ckpt) {
  auto model = make_model<Scalar>(ckpt.config, 0);
  if (ckpt.tensors.empty()) return model;
  std::size_t used = 0;
  for (auto& p : named_parameters(model)) {
    const auto* r = ckpt.find(p.name);
    if (!r) throw CheckpointError("checkpoint is missing tensor " + p.name);
    Shape shape;
    for (auto d : r->dims) shape.push_back(static_cast<std::int64_t>(d));
    p.tensor.assign(record_matrix<Scalar>(*r, view_rows(shape), view_cols(shape)), shape);
    ++used;
  }
  for (int l = 0; l < static_cast<int>(model.far.size()); ++l) {
    auto& block = model.far[static_cast<std::size_t>(l)];
    PruneMask mask;
    bool any = false;
    for (int n = 0; n < static_cast<int>(block.heads.size()); ++n) {
      std::array<DirectionMask, 2> dirs;
      for (auto d : {Direction::forward, Direction::reverse}) {
        const auto* r = ckpt.find(mask_name(l, n, d));
        if (!r) continue;
        if (r->dtype != DType::u8) throw CheckpointError("mask " + r->name + " must be u8");
        any = true;
        auto& keep = dirs[static_cast<std::size_t>(d)].keep;
        keep.resize(r->payload.size());
        std::memcpy(keep.data(), r->payload.data(), keep.size());
        ++used;
      }
      mask.heads.push_back(std::move(dirs));
    }
    if (any) block.mask = std::move(mask);
  }
  if (used != ckpt.tensors.size()) throw CheckpointError("checkpoint contains tensors unknown to this model");
  return model;
}

template <typename Scalar>
void save_model(const VisionModel<Scalar>& model, const std::string& path) {
  save_checkpoint(to_checkpoint(model), path);
}

template <typename Scalar>
VisionModel<Scalar> load_model(const std::string& path) {
  return model_from_checkpoint<Scalar>(load_checkpoint(path));
}

/// Datasets reuse the container: tensors "images" (f32, n x C x H x W) and
/// "labels" (u8, n); the config block carries geometry and class count.
Checkpoint dataset_to_checkpoint(const Dataset& d);
Dataset dataset_from_checkpoint(const Checkpoint& ckpt);

}  // namespace far
