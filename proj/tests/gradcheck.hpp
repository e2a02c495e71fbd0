#pragma once

#include "far/ops.hpp"

#include <functional>
#include <random>

namespace far::testing {

struct GradReport {
  int checked = 0;
  double worst = 0.0;  // max |analytic - fd| / max(1, |analytic|)
};

/// Random f64 matrix with entries in [-scale, scale].
inline MatrixX<double> random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  MatrixX<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0, bool requires_grad = true) {
  const auto rows = view_rows(shape);
  const auto cols = view_cols(shape);
  return Tensor<double>::from_matrix(random_matrix(rows, cols, rng, scale), std::move(shape), requires_grad);
}

/// Contracts an arbitrary output with a fixed random weighting so that every
/// output coordinate contributes to the scalar being differentiated.
inline std::function<Tensor<double>(const Tensor<double>&)> random_projection(std::uint64_t seed) {
  return [seed](const Tensor<double>& out) {
    std::mt19937_64 rng(seed);
    auto w = Tensor<double>::from_matrix(random_matrix(out.value().rows(), out.value().cols(), rng), out.shape());
    return sum(mul(out, w));
  };
}

/// Central differences on `points` random coordinates spread over `inputs`.
inline GradReport gradcheck(const std::function<Tensor<double>()>& loss_fn, std::vector<Tensor<double>> inputs, int points,
                            std::uint64_t seed, double h = 1e-6) {
  for (auto& t : inputs) t.zero_grad();
  auto loss = loss_fn();
  backward(loss);
  std::vector<MatrixX<double>> analytic;
  for (auto& t : inputs) {
    analytic.push_back(t.has_grad() ? t.grad() : MatrixX<double>::Zero(t.value().rows(), t.value().cols()));
  }
  std::mt19937_64 rng(seed);
  GradReport r;
  for (int p = 0; p < points; ++p) {
    const auto which = std::uniform_int_distribution<std::size_t>(0, inputs.size() - 1)(rng);
    auto& t = inputs[which];
    const auto idx = std::uniform_int_distribution<Eigen::Index>(0, t.value().size() - 1)(rng);
    double* v = t.mutable_value().data() + idx;
    const double saved = *v;
    double plus = 0.0;
    double minus = 0.0;
    {
      NoGradGuard guard;
      *v = saved + h;
      plus = loss_fn().item();
      *v = saved - h;
      minus = loss_fn().item();
    }
    *v = saved;
    const double fd = (plus - minus) / (2 * h);
    const double a = analytic[which].data()[idx];
    r.worst = std::max(r.worst, std::abs(a - fd) / std::max(1.0, std::abs(a)));
    ++r.checked;
  }
  return r;
}

}  // namespace far::testing
