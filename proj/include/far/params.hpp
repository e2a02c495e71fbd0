#pragma once

#include "far/ops.hpp"

#include <random>

namespace far {

template <typename Scalar>
struct LayerNormParams {
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
};

/// Affine map y = x W^T + b with W stored as (out x in).
template <typename Scalar>
struct LinearParams {
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;
};

inline constexpr double kLayerNormEps = 1e-6;

template <typename Scalar>
Tensor<Scalar> apply(const LayerNormParams<Scalar>& ln, const Tensor<Scalar>& x) {
  return layer_norm(x, ln.gamma, ln.beta, Scalar(kLayerNormEps));
}

template <typename Scalar>
Tensor<Scalar> apply(const LinearParams<Scalar>& lin, const Tensor<Scalar>& x) {
  return linear(x, lin.weight, lin.bias);
}

/// Normal(0, std) samples redrawn until they fall within two standard deviations.
template <typename Scalar>
MatrixX<Scalar> trunc_normal(Eigen::Index rows, Eigen::Index cols, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std);
  MatrixX<Scalar> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double v = dist(rng);
    while (std::abs(v) > 2.0 * std) v = dist(rng);
    m.data()[i] = static_cast<Scalar>(v);
  }
  return m;
}

template <typename Scalar>
MatrixX<Scalar> uniform(Eigen::Index rows, Eigen::Index cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  MatrixX<Scalar> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(dist(rng));
  return m;
}

template <typename Scalar>
Tensor<Scalar> vector_param(const MatrixX<Scalar>& row) {
  return Tensor<Scalar>::from_matrix(row, Shape{row.size()}, true);
}

template <typename Scalar>
LayerNormParams<Scalar> make_layer_norm(int dim) {
  return {vector_param<Scalar>(MatrixX<Scalar>::Ones(1, dim)), vector_param<Scalar>(MatrixX<Scalar>::Zero(1, dim))};
}

template <typename Scalar>
LinearParams<Scalar> make_linear(int in, int out, std::mt19937_64& rng, double std = 0.02) {
  return {Tensor<Scalar>::from_matrix(trunc_normal<Scalar>(out, in, std, rng), true),
          vector_param<Scalar>(MatrixX<Scalar>::Zero(1, out))};
}

template <typename Scalar>
LayerNormParams<Scalar> clone(const LayerNormParams<Scalar>& p) {
  return {p.gamma.clone(), p.beta.clone()};
}

template <typename Scalar>
LinearParams<Scalar> clone(const LinearParams<Scalar>& p) {
  return {p.weight.clone(), p.bias.clone()};
}

}  // namespace far
