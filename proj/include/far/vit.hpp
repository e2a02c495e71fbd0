#pragma once

#include "far/config.hpp"
#include "far/params.hpp"

namespace far {

template <typename Scalar>
struct EmbedParams {
  LinearParams<Scalar> patch;  // (D x C*p*p)
  Tensor<Scalar> cls;          // {D}
  Tensor<Scalar> pos;          // {T, D}
};

template <typename Scalar>
struct AttentionParams {
  LayerNormParams<Scalar> ln;
  LinearParams<Scalar> qkv;   // D -> 3D, columns ordered [Q | K | V]
  LinearParams<Scalar> proj;  // D -> D
};

template <typename Scalar>
struct MlpParams {
  LayerNormParams<Scalar> ln;
  LinearParams<Scalar> fc1;
  LinearParams<Scalar> fc2;
};

template <typename Scalar>
EmbedParams<Scalar> make_embed(const ModelConfig& c, std::mt19937_64& rng) {
  EmbedParams<Scalar> e;
  e.patch = make_linear<Scalar>(c.patch_features(), c.dim, rng);
  e.cls = Tensor<Scalar>::from_matrix(trunc_normal<Scalar>(1, c.dim, 0.02, rng), Shape{c.dim}, true);
  e.pos = Tensor<Scalar>::from_matrix(trunc_normal<Scalar>(c.tokens(), c.dim, 0.02, rng), true);
  return e;
}

template <typename Scalar>
AttentionParams<Scalar> make_attention(const ModelConfig& c, std::mt19937_64& rng) {
  return {make_layer_norm<Scalar>(c.dim), make_linear<Scalar>(c.dim, 3 * c.dim, rng), make_linear<Scalar>(c.dim, c.dim, rng)};
}

template <typename Scalar>
MlpParams<Scalar> make_mlp(const ModelConfig& c, std::mt19937_64& rng) {
  const int hidden = c.mlp_ratio * c.dim;
  return {make_layer_norm<Scalar>(c.dim), make_linear<Scalar>(c.dim, hidden, rng), make_linear<Scalar>(hidden, c.dim, rng)};
}

/// Splits each C x H x W image row into non-overlapping patches; row
/// b*(T-1) + k holds patch k of image b flattened in (c, i, j) order.
template <typename Scalar>
MatrixX<Scalar> extract_patches(const MatrixX<Scalar>& images, const ModelConfig& c) {
  const int p = c.patch_size;
  const int grid = c.grid();
  const int hw = c.image_size;
  if (images.cols() != static_cast<Eigen::Index>(c.channels) * hw * hw) {
    throw DimensionError("patch_embed: image has " + std::to_string(images.cols()) + " values, expected " +
                         std::to_string(c.channels) + "x" + std::to_string(hw) + "x" + std::to_string(hw));
  }
  const Eigen::Index patches = static_cast<Eigen::Index>(grid) * grid;
  MatrixX<Scalar> out(images.rows() * patches, c.patch_features());
  for (Eigen::Index b = 0; b < images.rows(); ++b) {
    for (int py = 0; py < grid; ++py) {
      for (int px = 0; px < grid; ++px) {
        const Eigen::Index row = b * patches + py * grid + px;
        Eigen::Index col = 0;
        for (int ch = 0; ch < c.channels; ++ch)
          for (int i = 0; i < p; ++i)
            for (int j = 0; j < p; ++j)
              out(row, col++) = images(b, (static_cast<Eigen::Index>(ch) * hw + py * p + i) * hw + px * p + j);
      }
    }
  }
  return out;
}

/// Prepends the CLS token to every sequence and adds positional embeddings.
/// `patch_tokens` is (B*(T-1)) x D; the result is (B*T) x D.
template <typename Scalar>
Tensor<Scalar> assemble_tokens(const Tensor<Scalar>& patch_tokens, const Tensor<Scalar>& cls, const Tensor<Scalar>& pos) {
  const Eigen::Index tokens = pos.value().rows();
  const Eigen::Index d = pos.value().cols();
  const Eigen::Index per = tokens - 1;
  if (patch_tokens.value().cols() != d || cls.size() != d || patch_tokens.value().rows() % per != 0) {
    throw DimensionError("assemble_tokens: patch tokens " + shape_string(patch_tokens.shape()) +
                         " incompatible with positional table " + shape_string(pos.shape()));
  }
  const Eigen::Index batch = patch_tokens.value().rows() / per;
  MatrixX<Scalar> out(batch * tokens, d);
  Eigen::Map<const RowVectorX<Scalar>> cls_row(cls.value().data(), d);
  for (Eigen::Index b = 0; b < batch; ++b) {
    out.row(b * tokens) = cls_row + pos.value().row(0);
    out.block(b * tokens + 1, 0, per, d) = patch_tokens.value().block(b * per, 0, per, d) + pos.value().bottomRows(per);
  }
  return detail::make_result<Scalar>(Shape{batch * tokens, d}, std::move(out), {patch_tokens, cls, pos},
                                     [patch_tokens, cls, pos, batch, tokens, per, d](const MatrixX<Scalar>& g) {
                                       if (patch_tokens.requires_grad()) {
                                         MatrixX<Scalar> dp(batch * per, d);
                                         for (Eigen::Index b = 0; b < batch; ++b) dp.block(b * per, 0, per, d) = g.block(b * tokens + 1, 0, per, d);
                                         detail::accumulate(patch_tokens, dp);
                                       }
                                       MatrixX<Scalar> dpos = MatrixX<Scalar>::Zero(tokens, d);
                                       for (Eigen::Index b = 0; b < batch; ++b) dpos += g.block(b * tokens, 0, tokens, d);
                                       if (cls.requires_grad()) detail::accumulate(cls, MatrixX<Scalar>(dpos.row(0)));
                                       detail::accumulate(pos, dpos);
                                     });
}

/// Images (B x C*H*W) to tokens (B*T x D).
template <typename Scalar>
Tensor<Scalar> patch_embed(const MatrixX<Scalar>& images, const EmbedParams<Scalar>& embed, const ModelConfig& c) {
  auto patches = Tensor<Scalar>::from_matrix(extract_patches(images, c));
  return assemble_tokens(apply(embed.patch, patches), embed.cls, embed.pos);
}

/// Result of the fused multi-head attention kernel.
template <typename Scalar>
struct AttentionCore {
  Tensor<Scalar> out;      // (B*T) x D
  MatrixX<Scalar> probs;   // (B*N*T) x T, row (b*N + n)*T + q
};

/// softmax(Q K^T / sqrt(D_h)) V for every sequence and head of a packed
/// (B*T) x 3D QKV tensor.
template <typename Scalar>
AttentionCore<Scalar> attention_core(const Tensor<Scalar>& qkv, int tokens, int heads) {
  const auto& v = qkv.value();
  const Eigen::Index T = tokens;
  if (v.cols() % 3 != 0 || (v.cols() / 3) % heads != 0 || v.rows() % T != 0) {
    throw DimensionError("attention_core: qkv " + shape_string(qkv.shape()) + " incompatible with " +
                         std::to_string(heads) + " heads, " + std::to_string(tokens) + " tokens");
  }
  const Eigen::Index D = v.cols() / 3;
  const Eigen::Index Dh = D / heads;
  const Eigen::Index B = v.rows() / T;
  const Scalar scale_factor = Scalar(1) / std::sqrt(Scalar(Dh));
  MatrixX<Scalar> out(B * T, D);
  MatrixX<Scalar> probs(B * heads * T, T);
  for (Eigen::Index b = 0; b < B; ++b) {
    for (Eigen::Index n = 0; n < heads; ++n) {
      const auto q = v.block(b * T, n * Dh, T, Dh);
      const auto k = v.block(b * T, D + n * Dh, T, Dh);
      const auto val = v.block(b * T, 2 * D + n * Dh, T, Dh);
      MatrixX<Scalar> s = (q * k.transpose()) * scale_factor;
      for (Eigen::Index r = 0; r < T; ++r) {
        const Scalar mx = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - mx).exp().matrix();
        s.row(r) /= s.row(r).sum();
      }
      out.block(b * T, n * Dh, T, Dh).noalias() = s * val;
      probs.block((b * heads + n) * T, 0, T, T) = s;
    }
  }
  AttentionCore<Scalar> result;
  result.probs = probs;
  result.out = detail::make_result<Scalar>(
      Shape{B * T, D}, std::move(out), {qkv},
      [qkv, p = std::move(probs), B, T, D, Dh, heads, scale_factor](const MatrixX<Scalar>& g) {
        const auto& v = qkv.value();
        MatrixX<Scalar> dqkv(v.rows(), v.cols());
        for (Eigen::Index b = 0; b < B; ++b) {
          for (Eigen::Index n = 0; n < heads; ++n) {
            const auto q = v.block(b * T, n * Dh, T, Dh);
            const auto k = v.block(b * T, D + n * Dh, T, Dh);
            const auto val = v.block(b * T, 2 * D + n * Dh, T, Dh);
            const auto pn = p.block((b * heads + n) * T, 0, T, T);
            const auto go = g.block(b * T, n * Dh, T, Dh);
            dqkv.block(b * T, 2 * D + n * Dh, T, Dh).noalias() = pn.transpose() * go;
            MatrixX<Scalar> dp = go * val.transpose();
            MatrixX<Scalar> ds(T, T);
            for (Eigen::Index r = 0; r < T; ++r) {
              const Scalar dot = dp.row(r).dot(pn.row(r));
              ds.row(r) = pn.row(r).array() * (dp.row(r).array() - dot);
            }
            ds *= scale_factor;
            dqkv.block(b * T, n * Dh, T, Dh).noalias() = ds * k;
            dqkv.block(b * T, D + n * Dh, T, Dh).noalias() = ds.transpose() * q;
          }
        }
        detail::accumulate(qkv, dqkv);
      });
  return result;
}

template <typename Scalar>
struct AttentionBlockOutput {
  Tensor<Scalar> y;       // x + A(LN1(x))
  MatrixX<Scalar> attn;   // (B*N*T) x T softmax maps
};

template <typename Scalar>
AttentionBlockOutput<Scalar> attention_block(const Tensor<Scalar>& x, const AttentionParams<Scalar>& p, int tokens,
                                             int heads) {
  auto core = attention_core(apply(p.qkv, apply(p.ln, x)), tokens, heads);
  return {add(x, apply(p.proj, core.out)), std::move(core.probs)};
}

/// y + F(LN2(y)) with a GELU hidden layer.
template <typename Scalar>
Tensor<Scalar> mlp_block(const Tensor<Scalar>& y, const MlpParams<Scalar>& p) {
  return add(y, apply(p.fc2, gelu(apply(p.fc1, apply(p.ln, y)))));
}

}  // namespace far
