#pragma once

#include "far/tensor.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <span>

namespace far {

namespace detail {

struct AxisSplit {
  std::int64_t outer;
  std::int64_t extent;
  std::int64_t inner;
};

inline std::size_t normalize_axis(std::int64_t axis, std::size_t rank) {
  const auto r = static_cast<std::int64_t>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(axis);
}

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  MatrixX<Scalar> out = a.value() * b.value();
  return detail::make_result<Scalar>(Shape{a.dim(0), b.dim(1)}, std::move(out), {a, b},
                                     [a, b](const MatrixX<Scalar>& g) {
                                       if (a.requires_grad()) detail::accumulate(a, MatrixX<Scalar>(g * b.value().transpose()));
                                       if (b.requires_grad()) detail::accumulate(b, MatrixX<Scalar>(a.value().transpose() * g));
                                     });
}

/// y = x W^T + b over the last axis; W is (out x in), b is {out} or undefined.
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias = {}) {
  const auto in = view_cols(x.shape());
  if (weight.rank() != 2 || weight.dim(1) != in) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " incompatible with weight " +
                         shape_string(weight.shape()));
  }
  const auto out_features = weight.dim(0);
  if (bias.defined() && bias.size() != out_features) {
    throw DimensionError("linear: bias " + shape_string(bias.shape()) + " does not match weight " +
                         shape_string(weight.shape()));
  }
  MatrixX<Scalar> out = x.value() * weight.value().transpose();
  if (bias.defined()) out.rowwise() += Eigen::Map<const RowVectorX<Scalar>>(bias.value().data(), out_features);
  Shape shape = x.shape().empty() ? Shape{out_features} : x.shape();
  shape.back() = out_features;
  std::vector<Tensor<Scalar>> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return detail::make_result<Scalar>(std::move(shape), std::move(out), std::move(parents),
                                     [x, weight, bias](const MatrixX<Scalar>& g) {
                                       if (x.requires_grad()) detail::accumulate(x, MatrixX<Scalar>(g * weight.value()));
                                       if (weight.requires_grad()) detail::accumulate(weight, MatrixX<Scalar>(g.transpose() * x.value()));
                                       if (bias.defined() && bias.requires_grad()) {
                                         RowVectorX<Scalar> db = g.colwise().sum();
                                         detail::accumulate(bias, MatrixX<Scalar>(Eigen::Map<const MatrixX<Scalar>>(db.data(), bias.value().rows(), bias.value().cols())));
                                       }
                                     });
}

/// Swaps the two axes of a rank-2 tensor.
template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& x) {
  if (x.rank() != 2) throw DimensionError("transpose: expected rank 2, got " + shape_string(x.shape()));
  MatrixX<Scalar> out = x.value().transpose();
  return detail::make_result<Scalar>(Shape{x.dim(1), x.dim(0)}, std::move(out), {x},
                                     [x](const MatrixX<Scalar>& g) { detail::accumulate(x, MatrixX<Scalar>(g.transpose())); });
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  }
  MatrixX<Scalar> out = Eigen::Map<const MatrixX<Scalar>>(x.value().data(), view_rows(shape), view_cols(shape));
  return detail::make_result<Scalar>(std::move(shape), std::move(out), {x}, [x](const MatrixX<Scalar>& g) {
    detail::accumulate(x, MatrixX<Scalar>(Eigen::Map<const MatrixX<Scalar>>(g.data(), x.value().rows(), x.value().cols())));
  });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a, b, "add");
  MatrixX<Scalar> out = a.value() + b.value();
  return detail::make_result<Scalar>(a.shape(), std::move(out), {a, b}, [a, b](const MatrixX<Scalar>& g) {
    detail::accumulate(a, g);
    detail::accumulate(b, g);
  });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a, b, "sub");
  MatrixX<Scalar> out = a.value() - b.value();
  return detail::make_result<Scalar>(a.shape(), std::move(out), {a, b}, [a, b](const MatrixX<Scalar>& g) {
    detail::accumulate(a, g);
    detail::accumulate(b, MatrixX<Scalar>(-g));
  });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a, b, "mul");
  MatrixX<Scalar> out = a.value().cwiseProduct(b.value());
  return detail::make_result<Scalar>(a.shape(), std::move(out), {a, b}, [a, b](const MatrixX<Scalar>& g) {
    if (a.requires_grad()) detail::accumulate(a, MatrixX<Scalar>(g.cwiseProduct(b.value())));
    if (b.requires_grad()) detail::accumulate(b, MatrixX<Scalar>(g.cwiseProduct(a.value())));
  });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar factor) {
  MatrixX<Scalar> out = x.value() * factor;
  return detail::make_result<Scalar>(x.shape(), std::move(out), {x},
                                     [x, factor](const MatrixX<Scalar>& g) { detail::accumulate(x, MatrixX<Scalar>(g * factor)); });
}

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return mul(a, b); }

template <typename Scalar>
Scalar sigmoid_value(Scalar v) {
  return Scalar(1) / (Scalar(1) + std::exp(-v));
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  MatrixX<Scalar> out = x.value().unaryExpr([](Scalar v) { return sigmoid_value(v); });
  MatrixX<Scalar> saved = out;
  return detail::make_result<Scalar>(x.shape(), std::move(out), {x}, [x, s = std::move(saved)](const MatrixX<Scalar>& g) {
    detail::accumulate(x, MatrixX<Scalar>(g.array() * s.array() * (Scalar(1) - s.array())));
  });
}

template <typename Scalar>
Tensor<Scalar> tanh(const Tensor<Scalar>& x) {
  MatrixX<Scalar> out = x.value().array().tanh().matrix();
  MatrixX<Scalar> saved = out;
  return detail::make_result<Scalar>(x.shape(), std::move(out), {x}, [x, t = std::move(saved)](const MatrixX<Scalar>& g) {
    detail::accumulate(x, MatrixX<Scalar>(g.array() * (Scalar(1) - t.array().square())));
  });
}

/// Exact (erf-based) GELU.
template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  const Scalar inv_sqrt2 = Scalar(1) / std::sqrt(Scalar(2));
  MatrixX<Scalar> out = x.value().unaryExpr([inv_sqrt2](Scalar v) {
    return Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2));
  });
  return detail::make_result<Scalar>(x.shape(), std::move(out), {x}, [x, inv_sqrt2](const MatrixX<Scalar>& g) {
    const Scalar inv_sqrt_2pi = Scalar(1) / std::sqrt(Scalar(2) * std::numbers::pi_v<Scalar>);
    MatrixX<Scalar> d = x.value().unaryExpr([&](Scalar v) {
      return Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(Scalar(-0.5) * v * v);
    });
    detail::accumulate(x, MatrixX<Scalar>(g.cwiseProduct(d)));
  });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-row normalization over the last axis followed by gamma * xhat + beta.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          Scalar eps) {
  if (!(eps > Scalar(0))) throw std::invalid_argument("layer_norm: eps must be positive");
  const auto d = view_cols(x.shape());
  if (gamma.size() != d || beta.size() != d) {
    throw DimensionError("layer_norm: feature size of " + shape_string(x.shape()) + " does not match gamma " +
                         shape_string(gamma.shape()) + " / beta " + shape_string(beta.shape()));
  }
  const auto& xv = x.value();
  const auto rows = xv.rows();
  MatrixX<Scalar> xhat(rows, d);
  std::vector<Scalar> inv_std(static_cast<std::size_t>(rows));
  for (Eigen::Index r = 0; r < rows; ++r) {
    Scalar mean = Scalar(0);
    for (Eigen::Index c = 0; c < d; ++c) mean += xv(r, c);
    mean /= Scalar(d);
    Scalar var = Scalar(0);
    for (Eigen::Index c = 0; c < d; ++c) var += (xv(r, c) - mean) * (xv(r, c) - mean);
    var /= Scalar(d);
    const Scalar is = Scalar(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    for (Eigen::Index c = 0; c < d; ++c) xhat(r, c) = (xv(r, c) - mean) * is;
  }
  Eigen::Map<const RowVectorX<Scalar>> gv(gamma.value().data(), d);
  Eigen::Map<const RowVectorX<Scalar>> bv(beta.value().data(), d);
  MatrixX<Scalar> out = (xhat.array().rowwise() * gv.array()).matrix();
  out.rowwise() += bv;
  return detail::make_result<Scalar>(
      x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), d](const MatrixX<Scalar>& g) {
        Eigen::Map<const RowVectorX<Scalar>> gv(gamma.value().data(), d);
        if (gamma.requires_grad()) {
          RowVectorX<Scalar> dg = g.cwiseProduct(xhat).colwise().sum();
          detail::accumulate(gamma, MatrixX<Scalar>(Eigen::Map<const MatrixX<Scalar>>(dg.data(), gamma.value().rows(), gamma.value().cols())));
        }
        if (beta.requires_grad()) {
          RowVectorX<Scalar> db = g.colwise().sum();
          detail::accumulate(beta, MatrixX<Scalar>(Eigen::Map<const MatrixX<Scalar>>(db.data(), beta.value().rows(), beta.value().cols())));
        }
        if (x.requires_grad()) {
          MatrixX<Scalar> dxhat = (g.array().rowwise() * gv.array()).matrix();
          MatrixX<Scalar> dx(g.rows(), d);
          for (Eigen::Index r = 0; r < g.rows(); ++r) {
            const Scalar mean_d = dxhat.row(r).sum() / Scalar(d);
            const Scalar mean_dx = dxhat.row(r).dot(xhat.row(r)) / Scalar(d);
            dx.row(r) = (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx) * inv_std[static_cast<std::size_t>(r)];
          }
          detail::accumulate(x, dx);
        }
      });
}

/// Numerically stable softmax along `axis`.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, std::int64_t axis = -1) {
  if (x.rank() == 0) throw DimensionError("softmax: scalar input");
  const auto ax = detail::normalize_axis(axis, x.rank());
  const auto s = detail::split_at(x.shape(), ax);
  MatrixX<Scalar> out(x.value().rows(), x.value().cols());
  const Scalar* in = x.value().data();
  Scalar* o = out.data();
  for (std::int64_t a = 0; a < s.outer; ++a) {
    for (std::int64_t k = 0; k < s.inner; ++k) {
      const std::int64_t base = a * s.extent * s.inner + k;
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (std::int64_t i = 0; i < s.extent; ++i) mx = std::max(mx, in[base + i * s.inner]);
      Scalar total = Scalar(0);
      for (std::int64_t i = 0; i < s.extent; ++i) {
        const Scalar e = std::exp(in[base + i * s.inner] - mx);
        o[base + i * s.inner] = e;
        total += e;
      }
      for (std::int64_t i = 0; i < s.extent; ++i) o[base + i * s.inner] /= total;
    }
  }
  MatrixX<Scalar> saved = out;
  return detail::make_result<Scalar>(x.shape(), std::move(out), {x}, [x, p = std::move(saved), s](const MatrixX<Scalar>& g) {
    MatrixX<Scalar> dx(p.rows(), p.cols());
    const Scalar* pv = p.data();
    const Scalar* gv = g.data();
    Scalar* dv = dx.data();
    for (std::int64_t a = 0; a < s.outer; ++a) {
      for (std::int64_t k = 0; k < s.inner; ++k) {
        const std::int64_t base = a * s.extent * s.inner + k;
        Scalar dot = Scalar(0);
        for (std::int64_t i = 0; i < s.extent; ++i) dot += pv[base + i * s.inner] * gv[base + i * s.inner];
        for (std::int64_t i = 0; i < s.extent; ++i) {
          const auto idx = base + i * s.inner;
          dv[idx] = pv[idx] * (gv[idx] - dot);
        }
      }
    }
    detail::accumulate(x, dx);
  });
}

// ---------------------------------------------------------------------------
// Shape algebra
// ---------------------------------------------------------------------------

/// Contiguous sub-range [start, start + length) along `axis`.
template <typename Scalar>
Tensor<Scalar> narrow(const Tensor<Scalar>& x, std::int64_t axis, std::int64_t start, std::int64_t length) {
  const auto ax = detail::normalize_axis(axis, x.rank());
  if (start < 0 || length < 0 || start + length > x.dim(ax)) {
    throw DimensionError("narrow: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") exceeds axis of " + shape_string(x.shape()));
  }
  const auto s = detail::split_at(x.shape(), ax);
  Shape shape = x.shape();
  shape[ax] = length;
  MatrixX<Scalar> out(view_rows(shape), view_cols(shape));
  const Scalar* in = x.value().data();
  Scalar* o = out.data();
  for (std::int64_t a = 0; a < s.outer; ++a) {
    std::copy_n(in + (a * s.extent + start) * s.inner, length * s.inner, o + a * length * s.inner);
  }
  return detail::make_result<Scalar>(std::move(shape), std::move(out), {x}, [x, s, start, length](const MatrixX<Scalar>& g) {
    MatrixX<Scalar> dx = MatrixX<Scalar>::Zero(x.value().rows(), x.value().cols());
    for (std::int64_t a = 0; a < s.outer; ++a) {
      std::copy_n(g.data() + a * length * s.inner, length * s.inner, dx.data() + (a * s.extent + start) * s.inner);
    }
    detail::accumulate(x, dx);
  });
}

template <typename Scalar>
std::vector<Tensor<Scalar>> split(const Tensor<Scalar>& x, const std::vector<std::int64_t>& sizes, std::int64_t axis) {
  const auto ax = detail::normalize_axis(axis, x.rank());
  std::int64_t total = 0;
  for (auto sz : sizes) total += sz;
  if (total != x.dim(ax)) {
    throw DimensionError("split: sizes sum to " + std::to_string(total) + " but axis has " + std::to_string(x.dim(ax)));
  }
  std::vector<Tensor<Scalar>> parts;
  parts.reserve(sizes.size());
  std::int64_t offset = 0;
  for (auto sz : sizes) {
    parts.push_back(narrow(x, static_cast<std::int64_t>(ax), offset, sz));
    offset += sz;
  }
  return parts;
}

template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, std::int64_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const auto ax = detail::normalize_axis(axis, parts.front().rank());
  Shape shape = parts.front().shape();
  std::int64_t extent = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != shape.size()) throw DimensionError("concat: rank mismatch");
    probe[ax] = shape[ax];
    if (probe != shape) {
      throw DimensionError("concat: " + shape_string(p.shape()) + " incompatible with " + shape_string(parts.front().shape()));
    }
    extent += p.dim(ax);
  }
  shape[ax] = extent;
  const auto s = detail::split_at(shape, ax);
  MatrixX<Scalar> out(view_rows(shape), view_cols(shape));
  std::vector<std::int64_t> offsets;
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const auto len = p.dim(ax);
    for (std::int64_t a = 0; a < s.outer; ++a) {
      std::copy_n(p.value().data() + a * len * s.inner, len * s.inner, out.data() + (a * s.extent + offset) * s.inner);
    }
    offset += len;
  }
  return detail::make_result<Scalar>(std::move(shape), std::move(out), parts,
                                     [parts, offsets, s, ax](const MatrixX<Scalar>& g) {
                                       for (std::size_t i = 0; i < parts.size(); ++i) {
                                         const auto& p = parts[i];
                                         if (!p.requires_grad()) continue;
                                         const auto len = p.dim(ax);
                                         MatrixX<Scalar> dp(p.value().rows(), p.value().cols());
                                         for (std::int64_t a = 0; a < s.outer; ++a) {
                                           std::copy_n(g.data() + (a * s.extent + offsets[i]) * s.inner, len * s.inner,
                                                       dp.data() + a * len * s.inner);
                                         }
                                         detail::accumulate(p, dp);
                                       }
                                     });
}

/// Gathers rows of the 2-D view; result is (indices.size() x cols).
template <typename Scalar>
Tensor<Scalar> select_rows(const Tensor<Scalar>& x, std::vector<Eigen::Index> indices) {
  const auto& xv = x.value();
  MatrixX<Scalar> out(static_cast<Eigen::Index>(indices.size()), xv.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= xv.rows()) throw DimensionError("select_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = xv.row(indices[i]);
  }
  Shape shape{static_cast<std::int64_t>(indices.size()), xv.cols()};
  return detail::make_result<Scalar>(std::move(shape), std::move(out), {x}, [x, idx = std::move(indices)](const MatrixX<Scalar>& g) {
    MatrixX<Scalar> dx = MatrixX<Scalar>::Zero(x.value().rows(), x.value().cols());
    for (std::size_t i = 0; i < idx.size(); ++i) dx.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    detail::accumulate(x, dx);
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

template <typename Scalar>
Scalar ordered_sum(const MatrixX<Scalar>& m) {
  Scalar total = Scalar(0);
  const Scalar* d = m.data();
  for (Eigen::Index i = 0; i < m.size(); ++i) total += d[i];
  return total;
}

/// Sum of all elements, accumulated left to right.
template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = ordered_sum(x.value());
  return detail::make_result<Scalar>(Shape{}, std::move(out), {x}, [x](const MatrixX<Scalar>& g) {
    detail::accumulate(x, MatrixX<Scalar>(MatrixX<Scalar>::Constant(x.value().rows(), x.value().cols(), g(0, 0))));
  });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  return scale(sum(x), Scalar(1) / Scalar(x.size()));
}

/// Mean along one axis; the axis is removed from the shape.
template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x, std::int64_t axis) {
  const auto ax = detail::normalize_axis(axis, x.rank());
  const auto s = detail::split_at(x.shape(), ax);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(ax));
  MatrixX<Scalar> out = MatrixX<Scalar>::Zero(view_rows(shape), view_cols(shape));
  const Scalar* in = x.value().data();
  for (std::int64_t a = 0; a < s.outer; ++a)
    for (std::int64_t i = 0; i < s.extent; ++i)
      for (std::int64_t k = 0; k < s.inner; ++k) out.data()[a * s.inner + k] += in[(a * s.extent + i) * s.inner + k];
  out /= Scalar(s.extent);
  return detail::make_result<Scalar>(std::move(shape), std::move(out), {x}, [x, s](const MatrixX<Scalar>& g) {
    MatrixX<Scalar> dx(x.value().rows(), x.value().cols());
    for (std::int64_t a = 0; a < s.outer; ++a)
      for (std::int64_t i = 0; i < s.extent; ++i)
        for (std::int64_t k = 0; k < s.inner; ++k)
          dx.data()[(a * s.extent + i) * s.inner + k] = g.data()[a * s.inner + k] / Scalar(s.extent);
    detail::accumulate(x, dx);
  });
}

/// Mean negative log-likelihood of `labels` under row-wise softmax(logits).
template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, std::span<const int> labels) {
  const auto& lv = logits.value();
  if (logits.rank() != 2 || lv.rows() != static_cast<Eigen::Index>(labels.size())) {
    throw DimensionError("cross_entropy: logits " + shape_string(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  MatrixX<Scalar> probs(lv.rows(), lv.cols());
  Scalar loss = Scalar(0);
  for (Eigen::Index r = 0; r < lv.rows(); ++r) {
    const int label = labels[static_cast<std::size_t>(r)];
    if (label < 0 || label >= lv.cols()) throw DimensionError("cross_entropy: label out of range");
    const Scalar mx = lv.row(r).maxCoeff();
    Scalar total = Scalar(0);
    for (Eigen::Index c = 0; c < lv.cols(); ++c) {
      probs(r, c) = std::exp(lv(r, c) - mx);
      total += probs(r, c);
    }
    probs.row(r) /= total;
    loss += -(lv(r, label) - mx - std::log(total));
  }
  const Scalar n = Scalar(lv.rows());
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = loss / n;
  std::vector<int> saved(labels.begin(), labels.end());
  return detail::make_result<Scalar>(Shape{}, std::move(out), {logits},
                                     [logits, probs = std::move(probs), saved = std::move(saved), n](const MatrixX<Scalar>& g) {
                                       MatrixX<Scalar> d = probs;
                                       for (std::size_t r = 0; r < saved.size(); ++r) d(static_cast<Eigen::Index>(r), saved[r]) -= Scalar(1);
                                       d *= g(0, 0) / n;
                                       detail::accumulate(logits, d);
                                     });
}

/// Euclidean norm of all elements; the subgradient at zero is taken as 0.
template <typename Scalar>
Tensor<Scalar> l2_norm(const Tensor<Scalar>& x) {
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = x.value().norm();
  const Scalar n = out(0, 0);
  return detail::make_result<Scalar>(Shape{}, std::move(out), {x}, [x, n](const MatrixX<Scalar>& g) {
    if (n == Scalar(0)) return;
    detail::accumulate(x, MatrixX<Scalar>(x.value() * (g(0, 0) / n)));
  });
}

}  // namespace far
