#include "far/dataset.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

namespace far {

bool Dataset::operator==(const Dataset& other) const {
  return image_size == other.image_size && channels == other.channels && classes == other.classes &&
         images.rows() == other.images.rows() && images.cols() == other.images.cols() &&
         std::equal(images.data(), images.data() + images.size(), other.images.data()) && labels == other.labels &&
         train == other.train && val == other.val;
}

void assign_split(Dataset& d) {
  const int n = d.size();
  const int n_train = (n * 4) / 5;
  d.train.clear();
  d.val.clear();
  for (int i = 0; i < n; ++i) (i < n_train ? d.train : d.val).push_back(i);
}

Dataset synth_dataset(std::uint64_t seed, int n, int classes, int image_size, int channels) {
  if (classes < 2) throw std::invalid_argument("synth_dataset: need at least 2 classes");
  if (n < classes) throw std::invalid_argument("synth_dataset: n must be >= classes");
  if (image_size < 1 || channels < 1) throw std::invalid_argument("synth_dataset: invalid image geometry");

  constexpr double kPi = std::numbers::pi;
  constexpr double kNoise = 0.5;
  constexpr double kOffset = 0.25;
  Dataset d;
  d.image_size = image_size;
  d.channels = channels;
  d.classes = classes;
  const Eigen::Index pixels = static_cast<Eigen::Index>(image_size) * image_size;
  d.images.resize(n, channels * pixels);
  d.labels.resize(static_cast<std::size_t>(n));

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, kNoise);
  std::normal_distribution<double> jitter(0.0, 0.05);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * kPi);
  for (int i = 0; i < n; ++i) {
    const int k = i % classes;
    d.labels[static_cast<std::size_t>(i)] = k;
    const double theta = kPi * k / classes + jitter(rng);
    const double cycles = 2.0 + (k % 2);
    const double phi = phase(rng);
    const double cx = std::cos(theta) / image_size;
    const double cy = std::sin(theta) / image_size;
    for (int ch = 0; ch < channels; ++ch) {
      const double angle = 2.0 * kPi * (static_cast<double>(k) / classes + static_cast<double>(ch) / channels);
      const double offset = kOffset * std::cos(angle);
      const double tint = 1.0 + 0.3 * std::sin(angle);
      for (int y = 0; y < image_size; ++y) {
        for (int x = 0; x < image_size; ++x) {
          const double grating = std::sin(2.0 * kPi * cycles * (x * cx + y * cy) + phi);
          d.images(i, ch * pixels + y * image_size + x) = static_cast<float>(tint * grating + offset + noise(rng));
        }
      }
    }
  }
  assign_split(d);
  return d;
}

std::vector<int> gather_labels(const Dataset& d, std::span<const int> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (int i : indices) out.push_back(d.labels.at(static_cast<std::size_t>(i)));
  return out;
}

}  // namespace far
