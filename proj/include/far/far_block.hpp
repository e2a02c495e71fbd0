#pragma once

#include "far/mask.hpp"
#include "far/params.hpp"
#include "far/vit.hpp"

#include <optional>

namespace far {

/// One LSTM direction. Gate blocks are stacked (input, forget, cell, output)
/// along the rows of w_ih (4H x in) and w_hh (4H x H); biases are {4H}.
template <typename Scalar>
struct LstmDirParams {
  Tensor<Scalar> w_ih;
  Tensor<Scalar> w_hh;
  Tensor<Scalar> b_ih;
  Tensor<Scalar> b_hh;

  int hidden() const { return static_cast<int>(w_hh.dim(1)); }
  int input() const { return static_cast<int>(w_ih.dim(1)); }
};

template <typename Scalar>
struct BiLstmHead {
  LstmDirParams<Scalar> forward;
  LstmDirParams<Scalar> reverse;

  const LstmDirParams<Scalar>& at(Direction d) const { return d == Direction::forward ? forward : reverse; }
  LstmDirParams<Scalar>& at(Direction d) { return d == Direction::forward ? forward : reverse; }
};

/// Substitute for one attention sublayer:
/// x + out_proj(concat_n BiLSTM_n(split_n(in_proj(LN(x))))).
template <typename Scalar>
struct FarBlockParams {
  LayerNormParams<Scalar> ln;
  LinearParams<Scalar> in_proj;   // D -> D
  std::vector<BiLstmHead<Scalar>> heads;
  LinearParams<Scalar> out_proj;  // sum of head output widths -> D
  std::optional<PruneMask> mask;

  int head_input() const { return heads.front().forward.input(); }
  /// Column offset of (head, direction) inside the concatenated hidden state.
  int hidden_offset(int head, Direction d) const {
    int offset = 0;
    for (int n = 0; n < head; ++n) offset += heads[static_cast<std::size_t>(n)].forward.hidden() + heads[static_cast<std::size_t>(n)].reverse.hidden();
    if (d == Direction::reverse) offset += heads[static_cast<std::size_t>(head)].forward.hidden();
    return offset;
  }
  int concat_width() const { return hidden_offset(static_cast<int>(heads.size()) - 1, Direction::reverse) + heads.back().reverse.hidden(); }
};

/// Selects which scan directions contribute; a disabled direction outputs zeros.
struct FarOptions {
  bool forward = true;
  bool reverse = true;
};

template <typename Scalar>
LstmDirParams<Scalar> make_lstm_direction(int input, int hidden, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  MatrixX<Scalar> b_ih = MatrixX<Scalar>::Zero(1, 4 * hidden);
  b_ih.block(0, hidden, 1, hidden).setOnes();
  return {Tensor<Scalar>::from_matrix(uniform<Scalar>(4 * hidden, input, bound, rng), true),
          Tensor<Scalar>::from_matrix(uniform<Scalar>(4 * hidden, hidden, bound, rng), true), vector_param<Scalar>(b_ih),
          vector_param<Scalar>(MatrixX<Scalar>::Zero(1, 4 * hidden))};
}

/// Fresh substitute; LN starts from `ln_init` (the teacher's LN1) when given.
template <typename Scalar>
FarBlockParams<Scalar> make_far_block(const ModelConfig& c, std::mt19937_64& rng,
                                      const LayerNormParams<Scalar>* ln_init = nullptr) {
  if (c.dim % c.heads != 0 || c.dim / c.heads != c.head_dim) {
    throw ConfigError("FAR block needs dim divisible by heads with dim/heads == head_dim");
  }
  FarBlockParams<Scalar> p;
  p.ln = ln_init ? clone(*ln_init) : make_layer_norm<Scalar>(c.dim);
  p.in_proj = make_linear<Scalar>(c.dim, c.dim, rng);
  for (int n = 0; n < c.heads; ++n) {
    auto fwd = make_lstm_direction<Scalar>(c.head_dim, c.head_dim, rng);
    auto rev = make_lstm_direction<Scalar>(c.head_dim, c.head_dim, rng);
    p.heads.push_back({std::move(fwd), std::move(rev)});
  }
  p.out_proj = make_linear<Scalar>(2 * c.dim, c.dim, rng);
  return p;
}

/// Single LSTM step assembled from graph primitives (row vectors, 1 x n).
template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> lstm_step(const Tensor<Scalar>& x, const Tensor<Scalar>& h, const Tensor<Scalar>& c,
                                                    const LstmDirParams<Scalar>& p) {
  const std::int64_t H = p.hidden();
  if (view_cols(x.shape()) != p.input() || view_cols(h.shape()) != H || view_cols(c.shape()) != H) {
    throw DimensionError("lstm_step: x " + shape_string(x.shape()) + ", h " + shape_string(h.shape()) + ", c " +
                         shape_string(c.shape()) + " vs w_ih " + shape_string(p.w_ih.shape()));
  }
  auto gates = add(linear(x, p.w_ih, p.b_ih), linear(h, p.w_hh, p.b_hh));
  auto parts = split(gates, {H, H, H, H}, -1);
  auto i = sigmoid(parts[0]);
  auto f = sigmoid(parts[1]);
  auto g = tanh(parts[2]);
  auto o = sigmoid(parts[3]);
  auto c_next = add(mul(f, c), mul(i, g));
  auto h_next = mul(o, tanh(c_next));
  return {h_next, c_next};
}

/// Fused scan of one direction over packed sequences.
///
/// `x` is (B*T) x in with row b*T + t; the result is (B*T) x H aligned to the
/// original positions. Initial states are zero. Units with keep[j] == 0 output
/// exactly zero and receive no gradient.
template <typename Scalar>
Tensor<Scalar> lstm_scan(const Tensor<Scalar>& x, const LstmDirParams<Scalar>& p, int tokens, bool reverse,
                         const DirectionMask* mask = nullptr) {
  const Eigen::Index H = p.hidden();
  const Eigen::Index in = p.input();
  const Eigen::Index T = tokens;
  const auto& xv = x.value();
  if (xv.cols() != in || xv.rows() % T != 0 || p.w_hh.dim(0) != 4 * H || p.b_ih.size() != 4 * H ||
      p.b_hh.size() != 4 * H) {
    throw DimensionError("lstm_scan: input " + shape_string(x.shape()) + " inconsistent with w_ih " +
                         shape_string(p.w_ih.shape()) + ", w_hh " + shape_string(p.w_hh.shape()));
  }
  if (mask && mask->total() != H) {
    throw DimensionError("lstm_scan: mask of " + std::to_string(mask->total()) + " units for hidden size " +
                         std::to_string(H));
  }
  const Eigen::Index B = xv.rows() / T;
  RowVectorX<Scalar> keep = RowVectorX<Scalar>::Ones(H);
  if (mask) {
    for (Eigen::Index j = 0; j < H; ++j) keep(j) = mask->keep[static_cast<std::size_t>(j)] ? Scalar(1) : Scalar(0);
  }

  const auto& w_hh = p.w_hh.value();
  RowVectorX<Scalar> bias = Eigen::Map<const RowVectorX<Scalar>>(p.b_ih.value().data(), 4 * H) +
                            Eigen::Map<const RowVectorX<Scalar>>(p.b_hh.value().data(), 4 * H);
  MatrixX<Scalar> xg = xv * p.w_ih.value().transpose();
  xg.rowwise() += bias;

  using Strided = Eigen::Map<const MatrixX<Scalar>, 0, Eigen::OuterStride<>>;
  std::vector<MatrixX<Scalar>> acts(static_cast<std::size_t>(T));
  std::vector<MatrixX<Scalar>> cells(static_cast<std::size_t>(T));
  std::vector<MatrixX<Scalar>> tanh_cells(static_cast<std::size_t>(T));
  MatrixX<Scalar> out(B * T, H);
  MatrixX<Scalar> h = MatrixX<Scalar>::Zero(B, H);
  MatrixX<Scalar> c = MatrixX<Scalar>::Zero(B, H);
  for (Eigen::Index s = 0; s < T; ++s) {
    const Eigen::Index t = reverse ? T - 1 - s : s;
    MatrixX<Scalar> a = Strided(xg.data() + t * 4 * H, B, 4 * H, Eigen::OuterStride<>(T * 4 * H));
    a.noalias() += h * w_hh.transpose();
    a.leftCols(2 * H) = a.leftCols(2 * H).unaryExpr([](Scalar v) { return sigmoid_value(v); });
    a.middleCols(2 * H, H) = a.middleCols(2 * H, H).array().tanh().matrix();
    a.rightCols(H) = a.rightCols(H).unaryExpr([](Scalar v) { return sigmoid_value(v); });
    c = a.middleCols(H, H).cwiseProduct(c) + a.leftCols(H).cwiseProduct(a.middleCols(2 * H, H));
    MatrixX<Scalar> tc = c.array().tanh().matrix();
    h = (a.rightCols(H).cwiseProduct(tc).array().rowwise() * keep.array()).matrix();
    for (Eigen::Index b = 0; b < B; ++b) out.row(b * T + t) = h.row(b);
    acts[static_cast<std::size_t>(s)] = std::move(a);
    cells[static_cast<std::size_t>(s)] = c;
    tanh_cells[static_cast<std::size_t>(s)] = std::move(tc);
  }

  MatrixX<Scalar> saved_out = out;
  return detail::make_result<Scalar>(
      Shape{B * T, H}, std::move(out), {x, p.w_ih, p.w_hh, p.b_ih, p.b_hh},
      [x, p, B, T, H, in, reverse, keep, acts = std::move(acts), cells = std::move(cells),
       tanh_cells = std::move(tanh_cells), hs = std::move(saved_out)](const MatrixX<Scalar>& g) {
        const auto& w_hh = p.w_hh.value();
        MatrixX<Scalar> dxg(B * T, 4 * H);
        MatrixX<Scalar> dw_hh = MatrixX<Scalar>::Zero(4 * H, H);
        MatrixX<Scalar> dh_next = MatrixX<Scalar>::Zero(B, H);
        MatrixX<Scalar> dc_next = MatrixX<Scalar>::Zero(B, H);
        MatrixX<Scalar> dh(B, H);
        MatrixX<Scalar> h_prev(B, H);
        MatrixX<Scalar> da(B, 4 * H);
        for (Eigen::Index s = T - 1; s >= 0; --s) {
          const Eigen::Index t = reverse ? T - 1 - s : s;
          const auto& a = acts[static_cast<std::size_t>(s)];
          const auto& tc = tanh_cells[static_cast<std::size_t>(s)];
          for (Eigen::Index b = 0; b < B; ++b) dh.row(b) = g.row(b * T + t);
          dh += dh_next;
          dh = (dh.array().rowwise() * keep.array()).matrix();
          const auto i = a.leftCols(H).array();
          const auto f = a.middleCols(H, H).array();
          const auto gg = a.middleCols(2 * H, H).array();
          const auto o = a.rightCols(H).array();
          MatrixX<Scalar> dc = (dh.array() * o * (Scalar(1) - tc.array().square())).matrix() + dc_next;
          if (s > 0) {
            da.middleCols(H, H) = (dc.array() * cells[static_cast<std::size_t>(s - 1)].array() * f * (Scalar(1) - f)).matrix();
          } else {
            da.middleCols(H, H).setZero();
          }
          da.leftCols(H) = (dc.array() * gg * i * (Scalar(1) - i)).matrix();
          da.middleCols(2 * H, H) = (dc.array() * i * (Scalar(1) - gg.square())).matrix();
          da.rightCols(H) = (dh.array() * tc.array() * o * (Scalar(1) - o)).matrix();
          dc_next = (dc.array() * f).matrix();
          if (s > 0) {
            const Eigen::Index tp = reverse ? t + 1 : t - 1;
            for (Eigen::Index b = 0; b < B; ++b) h_prev.row(b) = hs.row(b * T + tp);
            dw_hh.noalias() += da.transpose() * h_prev;
          }
          dh_next.noalias() = da * w_hh;
          for (Eigen::Index b = 0; b < B; ++b) dxg.row(b * T + t) = da.row(b);
        }
        if (x.requires_grad()) detail::accumulate(x, MatrixX<Scalar>(dxg * p.w_ih.value()));
        if (p.w_ih.requires_grad()) detail::accumulate(p.w_ih, MatrixX<Scalar>(dxg.transpose() * x.value()));
        if (p.w_hh.requires_grad()) detail::accumulate(p.w_hh, dw_hh);
        RowVectorX<Scalar> db = dxg.colwise().sum();
        if (p.b_ih.requires_grad()) detail::accumulate(p.b_ih, MatrixX<Scalar>(db));
        if (p.b_hh.requires_grad()) detail::accumulate(p.b_hh, MatrixX<Scalar>(db));
        (void)in;
      });
}

template <typename Scalar>
const DirectionMask* mask_for(const FarBlockParams<Scalar>& p, int head, Direction d) {
  return p.mask ? &p.mask->at(head, d) : nullptr;
}

/// Both scans of one head over (B*T) x D_h inputs; columns [0, H_fwd) hold the
/// forward scan and the rest the reverse scan, both aligned to input positions.
template <typename Scalar>
Tensor<Scalar> bilstm_head(const Tensor<Scalar>& input, const BiLstmHead<Scalar>& head, int tokens,
                           const DirectionMask* fwd_mask = nullptr, const DirectionMask* rev_mask = nullptr,
                           FarOptions options = {}) {
  auto run = [&](const LstmDirParams<Scalar>& dir, bool reverse, const DirectionMask* m, bool enabled) {
    if (enabled) return lstm_scan(input, dir, tokens, reverse, m);
    return Tensor<Scalar>::zeros(Shape{input.value().rows(), dir.hidden()});
  };
  return concat<Scalar>({run(head.forward, false, fwd_mask, options.forward),
                         run(head.reverse, true, rev_mask, options.reverse)},
                        -1);
}

/// Concatenated head outputs H = [H_1; ...; H_N] before the output projection.
template <typename Scalar>
Tensor<Scalar> far_block_hidden(const Tensor<Scalar>& x, const FarBlockParams<Scalar>& p, int tokens, FarOptions options = {}) {
  const auto n_heads = static_cast<int>(p.heads.size());
  if (p.mask && static_cast<int>(p.mask->heads.size()) != n_heads) {
    throw DimensionError("far block: mask covers " + std::to_string(p.mask->heads.size()) + " heads, block has " +
                         std::to_string(n_heads));
  }
  const std::int64_t dh = p.head_input();
  if (p.in_proj.weight.dim(0) != dh * n_heads) {
    throw DimensionError("far block: in_proj output " + std::to_string(p.in_proj.weight.dim(0)) + " != heads * head input " +
                         std::to_string(dh * n_heads));
  }
  auto projected = apply(p.in_proj, apply(p.ln, x));
  auto inputs = split(projected, std::vector<std::int64_t>(static_cast<std::size_t>(n_heads), dh), -1);
  std::vector<Tensor<Scalar>> outputs;
  outputs.reserve(static_cast<std::size_t>(n_heads));
  for (int n = 0; n < n_heads; ++n) {
    outputs.push_back(bilstm_head(inputs[static_cast<std::size_t>(n)], p.heads[static_cast<std::size_t>(n)], tokens,
                                  mask_for(p, n, Direction::forward), mask_for(p, n, Direction::reverse), options));
  }
  return concat(outputs, -1);
}

template <typename Scalar>
Tensor<Scalar> far_block_forward(const Tensor<Scalar>& x, const FarBlockParams<Scalar>& p, int tokens, FarOptions options = {}) {
  auto hidden = far_block_hidden(x, p, tokens, options);
  if (hidden.dim(1) != p.out_proj.weight.dim(1)) {
    throw DimensionError("far block: out_proj expects " + std::to_string(p.out_proj.weight.dim(1)) +
                         " hidden columns, heads produce " + std::to_string(hidden.dim(1)));
  }
  return add(x, apply(p.out_proj, hidden));
}

template <typename Scalar>
LstmDirParams<Scalar> clone(const LstmDirParams<Scalar>& p) {
  return {p.w_ih.clone(), p.w_hh.clone(), p.b_ih.clone(), p.b_hh.clone()};
}

template <typename Scalar>
FarBlockParams<Scalar> clone(const FarBlockParams<Scalar>& p) {
  FarBlockParams<Scalar> out;
  out.ln = clone(p.ln);
  out.in_proj = clone(p.in_proj);
  for (const auto& h : p.heads) out.heads.push_back({clone(h.forward), clone(h.reverse)});
  out.out_proj = clone(p.out_proj);
  out.mask = p.mask;
  return out;
}

}  // namespace far
