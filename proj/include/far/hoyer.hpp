#pragma once

#include "far/model.hpp"

#include <iostream>
#include <sstream>

namespace far {

/// Group Hoyer-square measure (sum_g ||w_g||)^2 / sum_g ||w_g||^2 over a
/// partition of the flattened entries of W. Returns 0 for an all-zero W.
template <typename Scalar>
double group_hs(const MatrixX<Scalar>& w, const std::vector<std::vector<Eigen::Index>>& groups) {
  std::vector<char> seen(static_cast<std::size_t>(w.size()), 0);
  double sum_norm = 0.0;
  double sum_sq = 0.0;
  for (const auto& g : groups) {
    double sq = 0.0;
    for (auto idx : g) {
      if (idx < 0 || idx >= w.size() || seen[static_cast<std::size_t>(idx)]) {
        throw std::invalid_argument("group_hs: groups must partition the entries of W");
      }
      seen[static_cast<std::size_t>(idx)] = 1;
      const double v = static_cast<double>(w.data()[idx]);
      sq += v * v;
    }
    sum_norm += std::sqrt(sq);
    sum_sq += sq;
  }
  for (char s : seen) {
    if (!s) throw std::invalid_argument("group_hs: groups must cover every entry of W");
  }
  if (sum_sq == 0.0) {
    std::clog << "warning: group_hs of an all-zero tensor is defined as 0\n";
    return 0.0;
  }
  return sum_norm * sum_norm / sum_sq;
}

/// group_hs with one group per row.
template <typename Scalar>
double group_hs_rows(const MatrixX<Scalar>& w) {
  std::vector<std::vector<Eigen::Index>> groups(static_cast<std::size_t>(w.rows()));
  for (Eigen::Index r = 0; r < w.rows(); ++r)
    for (Eigen::Index c = 0; c < w.cols(); ++c) groups[static_cast<std::size_t>(r)].push_back(r * w.cols() + c);
  return group_hs(w, groups);
}

/// Regroups a gate-stacked (4H x n) tensor into H x 4n: row j holds rows
/// j, H+j, 2H+j, 3H+j side by side.
template <typename Scalar>
Tensor<Scalar> gate_rows(const Tensor<Scalar>& stacked, Eigen::Index hidden) {
  const Shape shape = stacked.rank() == 1 ? Shape{stacked.dim(0), 1} : stacked.shape();
  if (shape.size() != 2 || shape[0] != 4 * hidden) {
    throw DimensionError("gate_rows: expected 4*" + std::to_string(hidden) + " rows, got " + shape_string(stacked.shape()));
  }
  const Eigen::Index n = shape[1];
  const auto src = Eigen::Map<const MatrixX<Scalar>>(stacked.value().data(), 4 * hidden, n);
  MatrixX<Scalar> out(hidden, 4 * n);
  for (Eigen::Index k = 0; k < 4; ++k) out.middleCols(k * n, n) = src.middleRows(k * hidden, hidden);
  return detail::make_result<Scalar>(Shape{hidden, 4 * n}, std::move(out), {stacked},
                                     [stacked, hidden, n](const MatrixX<Scalar>& g) {
                                       MatrixX<Scalar> d(4 * hidden, n);
                                       for (Eigen::Index k = 0; k < 4; ++k) d.middleRows(k * hidden, hidden) = g.middleCols(k * n, n);
                                       detail::accumulate(stacked, MatrixX<Scalar>(Eigen::Map<const MatrixX<Scalar>>(
                                                                       d.data(), stacked.value().rows(), stacked.value().cols())));
                                     });
}

/// Differentiable row-group Hoyer penalty of a composite matrix (one row
/// per hidden unit). Zero rows get a zero subgradient; an all-zero matrix
/// evaluates to 0.
template <typename Scalar>
Tensor<Scalar> hoyer_penalty(const Tensor<Scalar>& composite) {
  const auto& m = composite.value();
  if (m.rows() < 1) throw DimensionError("hoyer_penalty: need at least one row");
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> norms(m.rows());
  for (Eigen::Index r = 0; r < m.rows(); ++r) norms(r) = m.row(r).norm();
  Scalar s1 = Scalar(0);
  Scalar s2 = Scalar(0);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    s1 += norms(r);
    s2 += norms(r) * norms(r);
  }
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = s2 > Scalar(0) ? s1 * s1 / s2 : Scalar(0);
  return detail::make_result<Scalar>(Shape{}, std::move(out), {composite}, [composite, norms, s1, s2](const MatrixX<Scalar>& g) {
    const auto& m = composite.value();
    MatrixX<Scalar> d = MatrixX<Scalar>::Zero(m.rows(), m.cols());
    if (s2 > Scalar(0)) {
      const Scalar a = Scalar(2) * s1 / s2;
      const Scalar b = Scalar(2) * s1 * s1 / (s2 * s2);
      for (Eigen::Index r = 0; r < m.rows(); ++r) {
        if (norms(r) > Scalar(0)) d.row(r) = m.row(r) * (a / norms(r) - b);
      }
    }
    detail::accumulate(composite, MatrixX<Scalar>(d * g(0, 0)));
  });
}

/// Which structurally coupled slices join a hidden unit's composite row.
/// The mandatory part (gate rows of w_ih and w_hh) is always present.
struct CompositeOptions {
  bool hh_columns = false;
  bool biases = false;
  bool out_proj = false;

  static CompositeOptions mandatory() { return {}; }
  static CompositeOptions extended() { return {true, true, true}; }
  static CompositeOptions from(PenaltyGroups g) { return g == PenaltyGroups::extended ? extended() : mandatory(); }
};

/// Composite matrix (H x G) of one LSTM direction. `out_proj_slice` is the
/// (D x H) block of output-projection columns fed by this direction.
template <typename Scalar>
Tensor<Scalar> composite_matrix(const LstmDirParams<Scalar>& p, const Tensor<Scalar>& out_proj_slice, CompositeOptions options) {
  const Eigen::Index h = p.hidden();
  if (p.w_ih.dim(0) != 4 * h || p.w_hh.dim(0) != 4 * h || p.b_ih.size() != 4 * h || p.b_hh.size() != 4 * h) {
    throw DimensionError("composite_matrix: inconsistent hidden size across w_ih " + shape_string(p.w_ih.shape()) + ", w_hh " +
                         shape_string(p.w_hh.shape()));
  }
  std::vector<Tensor<Scalar>> parts{gate_rows(p.w_ih, h), gate_rows(p.w_hh, h)};
  if (options.hh_columns) parts.push_back(transpose(p.w_hh));
  if (options.biases) {
    parts.push_back(gate_rows(p.b_ih, h));
    parts.push_back(gate_rows(p.b_hh, h));
  }
  if (options.out_proj) {
    if (!out_proj_slice.defined() || out_proj_slice.rank() != 2 || out_proj_slice.dim(1) != h) {
      throw DimensionError("composite_matrix: out_proj slice must have " + std::to_string(h) + " columns");
    }
    parts.push_back(transpose(out_proj_slice));
  }
  return concat(parts, 1);
}

template <typename Scalar>
Tensor<Scalar> composite_matrix(const FarBlockParams<Scalar>& block, int head, Direction d, CompositeOptions options) {
  const auto& dir = block.heads[static_cast<std::size_t>(head)].at(d);
  Tensor<Scalar> slice;
  if (options.out_proj) slice = narrow(block.out_proj.weight, 1, block.hidden_offset(head, d), dir.hidden());
  return composite_matrix(dir, slice, options);
}

/// Sum (or mean) of Hoyer penalties over every (layer, head, direction).
template <typename Scalar>
Tensor<Scalar> hoyer_regularizer(const VisionModel<Scalar>& m, PenaltyGroups groups = PenaltyGroups::mandatory,
                                 PenaltyReduction reduction = PenaltyReduction::sum) {
  if (m.variant() != Variant::far) throw ConfigError("hoyer_regularizer: model has no BiLSTM blocks");
  const auto options = CompositeOptions::from(groups);
  std::vector<Tensor<Scalar>> terms;
  for (const auto& block : m.far)
    for (int n = 0; n < static_cast<int>(block.heads.size()); ++n)
      for (auto d : {Direction::forward, Direction::reverse})
        terms.push_back(reshape(hoyer_penalty(composite_matrix(block, n, d, options)), Shape{1}));
  auto total = sum(concat(terms, 0));
  if (reduction == PenaltyReduction::mean) total = scale(total, Scalar(1) / Scalar(terms.size()));
  return total;
}

/// Zeroes every coordinate coupled to a pruned unit: its four gate rows in
/// w_ih and w_hh, its w_hh column, its bias entries and its out_proj column.
template <typename Scalar>
void apply_mask(FarBlockParams<Scalar>& block) {
  if (!block.mask) return;
  auto& out_w = block.out_proj.weight.mutable_value();
  for (int n = 0; n < static_cast<int>(block.heads.size()); ++n) {
    for (auto d : {Direction::forward, Direction::reverse}) {
      auto& dir = block.heads[static_cast<std::size_t>(n)].at(d);
      const auto& keep = block.mask->at(n, d).keep;
      const Eigen::Index h = dir.hidden();
      if (static_cast<Eigen::Index>(keep.size()) != h) throw DimensionError("apply_mask: mask size != hidden size");
      const Eigen::Index offset = block.hidden_offset(n, d);
      auto& w_ih = dir.w_ih.mutable_value();
      auto& w_hh = dir.w_hh.mutable_value();
      auto& b_ih = dir.b_ih.mutable_value();
      auto& b_hh = dir.b_hh.mutable_value();
      for (Eigen::Index j = 0; j < h; ++j) {
        if (keep[static_cast<std::size_t>(j)]) continue;
        for (Eigen::Index k = 0; k < 4; ++k) {
          w_ih.row(k * h + j).setZero();
          w_hh.row(k * h + j).setZero();
          b_ih.data()[k * h + j] = Scalar(0);
          b_hh.data()[k * h + j] = Scalar(0);
        }
        w_hh.col(j).setZero();
        out_w.col(offset + j).setZero();
      }
    }
  }
}

template <typename Scalar>
void apply_masks(VisionModel<Scalar>& m) {
  for (auto& block : m.far) apply_mask(block);
}

/// Row l2 norms of each direction's composite matrix (importance scores).
template <typename Scalar>
std::vector<double> unit_importance(const FarBlockParams<Scalar>& block, int head, Direction d, CompositeOptions options) {
  NoGradGuard no_grad;
  const auto composite = composite_matrix(block, head, d, options);
  std::vector<double> norms;
  for (Eigen::Index r = 0; r < composite.value().rows(); ++r) norms.push_back(static_cast<double>(composite.value().row(r).norm()));
  return norms;
}

/// Threshold pruning performed independently per (layer, head, direction).
/// Absolute mode keeps units with norm > threshold; relative mode keeps
/// units with norm > threshold * max norm of that direction. A threshold of
/// 0 keeps everything; at least one unit (the largest) always survives.
/// Masks are stored on the blocks and applied immediately.
template <typename Scalar>
std::vector<PruneMask> prune_by_threshold(VisionModel<Scalar>& m, double threshold,
                                          ThresholdMode mode = ThresholdMode::absolute,
                                          PenaltyGroups groups = PenaltyGroups::mandatory) {
  if (threshold < 0.0) throw std::invalid_argument("prune_by_threshold: threshold must be non-negative");
  if (m.variant() != Variant::far) throw ConfigError("prune_by_threshold: model has no BiLSTM blocks");
  const auto options = CompositeOptions::from(groups);
  std::vector<PruneMask> masks;
  for (auto& block : m.far) {
    PruneMask mask;
    for (int n = 0; n < static_cast<int>(block.heads.size()); ++n) {
      std::array<DirectionMask, 2> dirs;
      for (auto d : {Direction::forward, Direction::reverse}) {
        const auto norms = unit_importance(block, n, d, options);
        const auto best = std::max_element(norms.begin(), norms.end());
        const double cut = mode == ThresholdMode::relative ? threshold * *best : threshold;
        auto& keep = dirs[static_cast<std::size_t>(d)].keep;
        keep.resize(norms.size());
        // Units already removed by an earlier mask stay removed.
        const DirectionMask* previous = block.mask ? &block.mask->at(n, d) : nullptr;
        for (std::size_t j = 0; j < norms.size(); ++j) {
          const bool alive = !previous || previous->keep[j];
          keep[j] = alive && (threshold == 0.0 || norms[j] > cut) ? 1 : 0;
        }
        if (dirs[static_cast<std::size_t>(d)].retained() == 0) keep[static_cast<std::size_t>(best - norms.begin())] = 1;
      }
      mask.heads.push_back(std::move(dirs));
    }
    block.mask = mask;
    apply_mask(block);
    masks.push_back(std::move(mask));
  }
  return masks;
}

template <typename Scalar>
std::vector<PruneMask> model_masks(const VisionModel<Scalar>& m) {
  std::vector<PruneMask> masks;
  for (const auto& block : m.far) {
    if (!block.mask) return {};
    masks.push_back(*block.mask);
  }
  return masks;
}

/// Physically removes pruned units: every direction keeps only its retained
/// rows/columns and the output projection only the matching columns.
template <typename Scalar>
FarBlockParams<Scalar> shrink(const FarBlockParams<Scalar>& block) {
  FarBlockParams<Scalar> out = clone(block);
  out.mask.reset();
  if (!block.mask) return out;
  std::vector<Eigen::Index> out_cols;
  for (int n = 0; n < static_cast<int>(block.heads.size()); ++n) {
    for (auto d : {Direction::forward, Direction::reverse}) {
      const auto& src = block.heads[static_cast<std::size_t>(n)].at(d);
      const auto& keep = block.mask->at(n, d).keep;
      const Eigen::Index h = src.hidden();
      std::vector<Eigen::Index> idx;
      for (Eigen::Index j = 0; j < h; ++j)
        if (keep[static_cast<std::size_t>(j)]) idx.push_back(j);
      const auto hk = static_cast<Eigen::Index>(idx.size());
      const Eigen::Index offset = block.hidden_offset(n, d);
      for (auto j : idx) out_cols.push_back(offset + j);

      MatrixX<Scalar> w_ih(4 * hk, src.input());
      MatrixX<Scalar> w_hh(4 * hk, hk);
      MatrixX<Scalar> b_ih(1, 4 * hk);
      MatrixX<Scalar> b_hh(1, 4 * hk);
      for (Eigen::Index k = 0; k < 4; ++k) {
        for (Eigen::Index a = 0; a < hk; ++a) {
          const Eigen::Index row = k * h + idx[static_cast<std::size_t>(a)];
          w_ih.row(k * hk + a) = src.w_ih.value().row(row);
          for (Eigen::Index b = 0; b < hk; ++b) w_hh(k * hk + a, b) = src.w_hh.value()(row, idx[static_cast<std::size_t>(b)]);
          b_ih(0, k * hk + a) = src.b_ih.value().data()[row];
          b_hh(0, k * hk + a) = src.b_hh.value().data()[row];
        }
      }
      auto& dst = out.heads[static_cast<std::size_t>(n)].at(d);
      dst.w_ih = Tensor<Scalar>::from_matrix(std::move(w_ih), true);
      dst.w_hh = Tensor<Scalar>::from_matrix(std::move(w_hh), true);
      dst.b_ih = Tensor<Scalar>::from_matrix(std::move(b_ih), Shape{4 * hk}, true);
      dst.b_hh = Tensor<Scalar>::from_matrix(std::move(b_hh), Shape{4 * hk}, true);
    }
  }
  const auto& w = block.out_proj.weight.value();
  MatrixX<Scalar> packed(w.rows(), static_cast<Eigen::Index>(out_cols.size()));
  for (std::size_t c = 0; c < out_cols.size(); ++c) packed.col(static_cast<Eigen::Index>(c)) = w.col(out_cols[c]);
  out.out_proj.weight = Tensor<Scalar>::from_matrix(std::move(packed), true);
  return out;
}

template <typename Scalar>
VisionModel<Scalar> shrink_model(const VisionModel<Scalar>& m) {
  auto out = clone(m);
  for (auto& block : out.far) block = shrink(block);
  return out;
}

struct RetentionRow {
  int layer = 0;
  int head = 0;
  Direction direction = Direction::forward;
  int retained = 0;
  int total = 0;
  double ratio = 0.0;
};

std::vector<RetentionRow> retention_report(std::span<const PruneMask> masks);
std::string retention_csv(std::span<const RetentionRow> rows);
double mean_retention(std::span<const RetentionRow> rows);

}  // namespace far
