#pragma once

#include "far/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace far {

/// Procedurally generated image classification set. Image i has label
/// i % classes; the first 80% of indices form the training split.
struct Dataset {
  int image_size = 0;
  int channels = 0;
  int classes = 0;
  MatrixX<float> images;  // n x (C*H*W)
  std::vector<int> labels;
  std::vector<int> train;
  std::vector<int> val;

  int size() const { return static_cast<int>(labels.size()); }
  bool operator==(const Dataset& other) const;
};

/// Class-dependent oriented gratings with per-class channel offsets plus
/// Gaussian noise. Identical seeds give byte-identical datasets.
Dataset synth_dataset(std::uint64_t seed, int n, int classes, int image_size, int channels = 3);

/// Rebuilds the split bookkeeping for externally loaded images and labels.
void assign_split(Dataset& d);

template <typename Scalar>
MatrixX<Scalar> gather_images(const Dataset& d, std::span<const int> indices) {
  MatrixX<Scalar> out(static_cast<Eigen::Index>(indices.size()), d.images.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = d.images.row(indices[i]).template cast<Scalar>();
  }
  return out;
}

std::vector<int> gather_labels(const Dataset& d, std::span<const int> indices);

}  // namespace far
