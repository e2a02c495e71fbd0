#pragma once

#include "far/model.hpp"

#include <string>

namespace far {

/// Scalar the FAR saliency backpropagates from.
enum class SaliencyTarget : std::uint8_t { norm, sum, logit };

std::string_view to_string(SaliencyTarget t);
SaliencyTarget parse_saliency_target(std::string_view text);

struct SaliencyMap {
  std::vector<double> scores;  // raw, one per token (index 0 is CLS)
  Eigen::MatrixXd map;         // patch scores on the grid, min-max normalized
};

Eigen::MatrixXd min_max_normalize(const Eigen::MatrixXd& m);

/// Row-normalizes a non-negative matrix; all-zero rows stay zero.
Eigen::MatrixXd row_normalize(const Eigen::MatrixXd& m);

/// Fraction of total mass with |q - k| <= width.
double band_mass_fraction(const Eigen::MatrixXd& m, int width);

/// Band fraction a uniform matrix of the same size would have.
double uniform_band_fraction(Eigen::Index size, int width);

void export_heatmap(const Eigen::MatrixXd& m, const std::string& prefix);
std::vector<unsigned char> pgm_bytes(const Eigen::MatrixXd& m);
std::string matrix_csv(const Eigen::MatrixXd& m);
Eigen::MatrixXd parse_matrix_csv(std::string_view text);
Eigen::MatrixXd read_matrix_csv(const std::string& path);

namespace detail {

inline void check_layer_head(const ModelConfig& c, int layer, int head) {
  if (layer < 0 || layer >= c.layers) {
    throw std::out_of_range("layer " + std::to_string(layer) + " out of range [0, " + std::to_string(c.layers) + ")");
  }
  if (head < 0 || head >= c.heads) {
    throw std::out_of_range("head " + std::to_string(head) + " out of range [0, " + std::to_string(c.heads) + ")");
  }
}

/// Tokens entering `layer` for a single image (T x D), no graph.
template <typename Scalar>
MatrixX<Scalar> layer_input(const VisionModel<Scalar>& m, const MatrixX<Scalar>& image, int layer, FarOptions options = {}) {
  NoGradGuard no_grad;
  if (image.rows() != 1) throw DimensionError("attribution expects a single image row");
  auto x = embed_images(m, image);
  for (int l = 0; l < layer; ++l) x = layer_forward(m, l, x, options);
  return x.value();
}

template <typename Scalar>
MatrixX<Scalar> teacher_attention(const VisionModel<Scalar>& m, const MatrixX<Scalar>& image, int layer) {
  NoGradGuard no_grad;
  auto x = Tensor<Scalar>::from_matrix(layer_input(m, image, layer));
  MatrixX<Scalar> attn;
  mixer_forward(m, layer, x, {}, &attn);
  return attn;  // (N*T) x T
}

inline Eigen::MatrixXd to_grid(const std::vector<double>& scores, int grid) {
  Eigen::MatrixXd g(grid, grid);
  for (int i = 0; i < grid; ++i)
    for (int j = 0; j < grid; ++j) g(i, j) = scores[static_cast<std::size_t>(1 + i * grid + j)];
  return g;
}

}  // namespace detail

/// CLS-to-patch importance of (layer, head) for one image (1 x C*H*W).
/// Teacher: the CLS row of that head's softmax attention. FAR: per-token l2
/// norm of the gradient of a scalar of the head's BiLSTM CLS output (or the
/// predicted logit) with respect to the layer's input tokens.
template <typename Scalar>
SaliencyMap cls_saliency(const VisionModel<Scalar>& m, const MatrixX<Scalar>& image, int layer, int head,
                         SaliencyTarget target = SaliencyTarget::norm) {
  detail::check_layer_head(m.config, layer, head);
  const int T = m.tokens();
  SaliencyMap out;
  out.scores.resize(static_cast<std::size_t>(T));
  if (m.variant() == Variant::attention) {
    const auto attn = detail::teacher_attention(m, image, layer);
    for (int k = 0; k < T; ++k) out.scores[static_cast<std::size_t>(k)] = static_cast<double>(attn(head * T, k));
  } else {
    auto x = Tensor<Scalar>::from_matrix(detail::layer_input(m, image, layer), true);
    Tensor<Scalar> objective;
    if (target == SaliencyTarget::logit) {
      const auto logits = forward_tokens(m, x, layer).logits;
      Eigen::Index best = 0;
      logits.value().row(0).maxCoeff(&best);
      objective = narrow(logits, 1, best, 1);
      objective = sum(objective);
    } else {
      const auto& block = m.far[static_cast<std::size_t>(layer)];
      auto hidden = far_block_hidden(x, block, T);
      const auto width = block.heads[static_cast<std::size_t>(head)].forward.hidden() +
                         block.heads[static_cast<std::size_t>(head)].reverse.hidden();
      auto cls = narrow(select_rows(hidden, {0}), 1, block.hidden_offset(head, Direction::forward), width);
      objective = target == SaliencyTarget::norm ? l2_norm(cls) : sum(cls);
    }
    backward(objective);
    if (!x.has_grad()) {
      std::fill(out.scores.begin(), out.scores.end(), 0.0);
    } else {
      for (int k = 0; k < T; ++k) out.scores[static_cast<std::size_t>(k)] = static_cast<double>(x.grad().row(k).norm());
    }
  }
  out.map = min_max_normalize(detail::to_grid(out.scores, m.config.grid()));
  return out;
}

/// Token-to-token dependency matrix of `layer`, row-normalized.
/// Teacher: head-averaged attention. FAR: entry (q, k) is the Frobenius norm
/// of the Jacobian of the substitute branch output at token q with respect
/// to input token k (the residual path is excluded).
template <typename Scalar>
Eigen::MatrixXd token_dependency(const VisionModel<Scalar>& m, const MatrixX<Scalar>& image, int layer, FarOptions options = {}) {
  detail::check_layer_head(m.config, layer, 0);
  const int T = m.tokens();
  Eigen::MatrixXd dep = Eigen::MatrixXd::Zero(T, T);
  if (m.variant() == Variant::attention) {
    const auto attn = detail::teacher_attention(m, image, layer);
    for (int n = 0; n < m.config.heads; ++n) dep += attn.block(n * T, 0, T, T).template cast<double>();
    dep /= static_cast<double>(m.config.heads);
    return row_normalize(dep);
  }
  const auto input = detail::layer_input(m, image, layer, options);
  const auto& block = m.far[static_cast<std::size_t>(layer)];
  const int D = m.config.dim;
  for (int q = 0; q < T; ++q) {
    Eigen::MatrixXd sq = Eigen::MatrixXd::Zero(1, T);
    for (int d = 0; d < D; ++d) {
      auto x = Tensor<Scalar>::from_matrix(input, true);
      auto branch = apply(block.out_proj, far_block_hidden(x, block, T, options));
      backward(sum(narrow(select_rows(branch, {q}), 1, d, 1)));
      if (!x.has_grad()) continue;
      sq += x.grad().rowwise().squaredNorm().transpose().template cast<double>();
    }
    dep.row(q) = sq.array().sqrt().matrix();
  }
  return row_normalize(dep);
}

}  // namespace far
