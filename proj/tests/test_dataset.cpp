#include "doctest.h"

#include "far/dataset.hpp"

#include <cstring>
#include <map>

using namespace far;

TEST_CASE("identical seeds give identical datasets") {
  const auto a = synth_dataset(7, 60, 6, 16, 3);
  const auto b = synth_dataset(7, 60, 6, 16, 3);
  CHECK(a == b);
  CHECK(std::memcmp(a.images.data(), b.images.data(), sizeof(float) * static_cast<std::size_t>(a.images.size())) == 0);
  CHECK(!(synth_dataset(8, 60, 6, 16, 3) == a));
}

TEST_CASE("stratified labels and split") {
  const auto d = synth_dataset(1, 100, 10, 8, 3);
  std::map<int, int> counts;
  for (int l : d.labels) ++counts[l];
  CHECK(counts.size() == 10);
  for (const auto& [label, n] : counts) CHECK(n == 10);
  CHECK(d.train.size() == 80);
  CHECK(d.val.size() == 20);
  CHECK(d.images.rows() == 100);
  CHECK(d.images.cols() == 3 * 8 * 8);
  // Both splits see every class.
  std::map<int, int> val_counts;
  for (int i : d.val) ++val_counts[d.labels[static_cast<std::size_t>(i)]];
  CHECK(val_counts.size() == 10);
}

TEST_CASE("class-conditional means are separated") {
  const auto d = synth_dataset(2, 400, 10, 16, 3);
  Eigen::MatrixXd means = Eigen::MatrixXd::Zero(10, d.images.cols());
  std::vector<int> n(10, 0);
  for (int i = 0; i < d.size(); ++i) {
    const int k = d.labels[static_cast<std::size_t>(i)];
    means.row(k) += d.images.row(i).cast<double>();
    ++n[static_cast<std::size_t>(k)];
  }
  for (int k = 0; k < 10; ++k) means.row(k) /= n[static_cast<std::size_t>(k)];
  for (int a = 0; a < 10; ++a)
    for (int b = a + 1; b < 10; ++b) CHECK((means.row(a) - means.row(b)).norm() > 0.0);
}

TEST_CASE("gather helpers") {
  const auto d = synth_dataset(3, 20, 4, 4, 1);
  const std::vector<int> idx{5, 2};
  const auto img = gather_images<double>(d, idx);
  CHECK(img.rows() == 2);
  CHECK(img.row(0) == d.images.row(5).cast<double>());
  CHECK(gather_labels(d, idx) == std::vector<int>{1, 2});
}

TEST_CASE("invalid sizes") {
  CHECK_THROWS_AS(synth_dataset(1, 5, 10, 8), std::invalid_argument);
  CHECK_THROWS_AS(synth_dataset(1, 50, 1, 8), std::invalid_argument);
  CHECK_THROWS_AS(synth_dataset(1, 50, 5, 0), std::invalid_argument);
}
