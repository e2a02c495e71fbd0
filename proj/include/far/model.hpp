#pragma once

#include "far/far_block.hpp"

#include <string>

namespace far {

/// Vision transformer whose token-mixing sublayers are either softmax
/// attention (teacher) or multi-head BiLSTM substitutes (student).
template <typename Scalar>
struct VisionModel {
  ModelConfig config;
  EmbedParams<Scalar> embed;
  std::vector<AttentionParams<Scalar>> attention;  // populated for Variant::attention
  std::vector<FarBlockParams<Scalar>> far;         // populated for Variant::far
  std::vector<MlpParams<Scalar>> mlp;
  LayerNormParams<Scalar> norm;
  LinearParams<Scalar> head;

  Variant variant() const { return config.variant; }
  int tokens() const { return config.tokens(); }
};

template <typename Scalar>
VisionModel<Scalar> make_teacher(ModelConfig config, std::uint64_t seed) {
  config.variant = Variant::attention;
  config.validate();
  std::mt19937_64 rng(seed);
  VisionModel<Scalar> m;
  m.config = config;
  m.embed = make_embed<Scalar>(config, rng);
  for (int l = 0; l < config.layers; ++l) {
    m.attention.push_back(make_attention<Scalar>(config, rng));
    m.mlp.push_back(make_mlp<Scalar>(config, rng));
  }
  m.norm = make_layer_norm<Scalar>(config.dim);
  m.head = make_linear<Scalar>(config.dim, config.num_classes, rng);
  return m;
}

/// Student with every attention sublayer swapped for a fresh BiLSTM block.
/// Embedding, MLP, final norm and head values are copied from the teacher.
template <typename Scalar>
VisionModel<Scalar> replace_attention(const VisionModel<Scalar>& teacher, std::uint64_t seed) {
  if (teacher.variant() != Variant::attention) throw ConfigError("replace_attention: model is not an attention teacher");
  const auto& c = teacher.config;
  if (c.dim % c.heads != 0) {
    throw ConfigError("replace_attention: dim " + std::to_string(c.dim) + " not divisible by " + std::to_string(c.heads) + " heads");
  }
  std::mt19937_64 rng(seed);
  VisionModel<Scalar> m;
  m.config = c;
  m.config.variant = Variant::far;
  m.embed = {clone(teacher.embed.patch), teacher.embed.cls.clone(), teacher.embed.pos.clone()};
  for (int l = 0; l < c.layers; ++l) {
    m.far.push_back(make_far_block<Scalar>(c, rng, &teacher.attention[static_cast<std::size_t>(l)].ln));
    const auto& src = teacher.mlp[static_cast<std::size_t>(l)];
    m.mlp.push_back({clone(src.ln), clone(src.fc1), clone(src.fc2)});
  }
  m.norm = clone(teacher.norm);
  m.head = clone(teacher.head);
  return m;
}

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar> tensor;
};

/// Every parameter of the model in a stable order. Handles share storage
/// with the model.
template <typename Scalar>
std::vector<NamedTensor<Scalar>> named_parameters(const VisionModel<Scalar>& m) {
  std::vector<NamedTensor<Scalar>> out;
  auto lin = [&](const std::string& prefix, const LinearParams<Scalar>& p) {
    out.push_back({prefix + ".weight", p.weight});
    out.push_back({prefix + ".bias", p.bias});
  };
  auto ln = [&](const std::string& prefix, const LayerNormParams<Scalar>& p) {
    out.push_back({prefix + ".gamma", p.gamma});
    out.push_back({prefix + ".beta", p.beta});
  };
  lin("embed.patch", m.embed.patch);
  out.push_back({"embed.cls", m.embed.cls});
  out.push_back({"embed.pos", m.embed.pos});
  for (std::size_t l = 0; l < m.mlp.size(); ++l) {
    const std::string layer = std::to_string(l);
    if (m.variant() == Variant::attention) {
      const auto& a = m.attention[l];
      ln("blocks." + layer + ".attn.ln", a.ln);
      lin("blocks." + layer + ".attn.qkv", a.qkv);
      lin("blocks." + layer + ".attn.proj", a.proj);
    } else {
      const auto& f = m.far[l];
      ln("far." + layer + ".ln", f.ln);
      lin("far." + layer + ".in_proj", f.in_proj);
      for (std::size_t n = 0; n < f.heads.size(); ++n) {
        for (auto d : {Direction::forward, Direction::reverse}) {
          const auto& dir = f.heads[n].at(d);
          const std::string prefix = "far." + layer + "." + std::to_string(n) + "." + direction_name(d) + ".";
          out.push_back({prefix + "w_ih", dir.w_ih});
          out.push_back({prefix + "w_hh", dir.w_hh});
          out.push_back({prefix + "b_ih", dir.b_ih});
          out.push_back({prefix + "b_hh", dir.b_hh});
        }
      }
      lin("far." + layer + ".out_proj", f.out_proj);
    }
    const auto& mlp = m.mlp[l];
    ln("blocks." + layer + ".mlp.ln", mlp.ln);
    lin("blocks." + layer + ".mlp.fc1", mlp.fc1);
    lin("blocks." + layer + ".mlp.fc2", mlp.fc2);
  }
  ln("norm", m.norm);
  lin("head", m.head);
  return out;
}

/// Number of scalar parameters held by the model, by enumeration.
template <typename Scalar>
std::int64_t parameter_count(const VisionModel<Scalar>& m) {
  std::int64_t total = 0;
  for (const auto& p : named_parameters(m)) total += p.tensor.size();
  return total;
}

template <typename Scalar>
VisionModel<Scalar> clone(const VisionModel<Scalar>& m) {
  VisionModel<Scalar> out;
  out.config = m.config;
  out.embed = {clone(m.embed.patch), m.embed.cls.clone(), m.embed.pos.clone()};
  for (const auto& a : m.attention) out.attention.push_back({clone(a.ln), clone(a.qkv), clone(a.proj)});
  for (const auto& f : m.far) out.far.push_back(clone(f));
  for (const auto& p : m.mlp) out.mlp.push_back({clone(p.ln), clone(p.fc1), clone(p.fc2)});
  out.norm = clone(m.norm);
  out.head = clone(m.head);
  return out;
}

template <typename Scalar>
struct ForwardResult {
  Tensor<Scalar> logits;                      // B x classes
  std::vector<Tensor<Scalar>> block_outputs;  // x_{l+1}, each (B*T) x D
  std::vector<MatrixX<Scalar>> attention;     // per teacher layer, (B*N*T) x T
};

/// Token mixing sublayer of layer `l`: attention or its substitute.
template <typename Scalar>
Tensor<Scalar> mixer_forward(const VisionModel<Scalar>& m, int l, const Tensor<Scalar>& x, FarOptions options = {},
                             MatrixX<Scalar>* attn = nullptr) {
  const auto idx = static_cast<std::size_t>(l);
  if (m.variant() == Variant::attention) {
    auto out = attention_block(x, m.attention[idx], m.tokens(), m.config.heads);
    if (attn) *attn = std::move(out.attn);
    return out.y;
  }
  return far_block_forward(x, m.far[idx], m.tokens(), options);
}

template <typename Scalar>
Tensor<Scalar> layer_forward(const VisionModel<Scalar>& m, int l, const Tensor<Scalar>& x, FarOptions options = {},
                             MatrixX<Scalar>* attn = nullptr) {
  return mlp_block(mixer_forward(m, l, x, options, attn), m.mlp[static_cast<std::size_t>(l)]);
}

/// Final norm and classifier applied to the CLS rows of (B*T) x D tokens.
template <typename Scalar>
Tensor<Scalar> classify(const VisionModel<Scalar>& m, const Tensor<Scalar>& x) {
  const Eigen::Index T = m.tokens();
  const Eigen::Index batch = x.value().rows() / T;
  std::vector<Eigen::Index> cls_rows;
  for (Eigen::Index b = 0; b < batch; ++b) cls_rows.push_back(b * T);
  return apply(m.head, apply(m.norm, select_rows(x, cls_rows)));
}

/// Runs layers [first_layer, L) on packed tokens and classifies.
template <typename Scalar>
ForwardResult<Scalar> forward_tokens(const VisionModel<Scalar>& m, Tensor<Scalar> x, int first_layer = 0,
                                     FarOptions options = {}, bool keep_attention = false) {
  if (x.value().cols() != m.config.dim || x.value().rows() % m.tokens() != 0) {
    throw DimensionError("forward: tokens " + shape_string(x.shape()) + " do not match T=" + std::to_string(m.tokens()) +
                         ", D=" + std::to_string(m.config.dim));
  }
  ForwardResult<Scalar> r;
  for (int l = first_layer; l < m.config.layers; ++l) {
    MatrixX<Scalar> attn;
    x = layer_forward(m, l, x, options, keep_attention ? &attn : nullptr);
    r.block_outputs.push_back(x);
    if (keep_attention && m.variant() == Variant::attention) r.attention.push_back(std::move(attn));
  }
  r.logits = classify(m, x);
  return r;
}

template <typename Scalar>
Tensor<Scalar> embed_images(const VisionModel<Scalar>& m, const MatrixX<Scalar>& images) {
  return patch_embed(images, m.embed, m.config);
}

/// Images are rows of C*H*W values.
template <typename Scalar>
ForwardResult<Scalar> model_forward(const VisionModel<Scalar>& m, const MatrixX<Scalar>& images, FarOptions options = {},
                                    bool keep_attention = false) {
  return forward_tokens(m, embed_images(m, images), 0, options, keep_attention);
}

/// Logits and the L recorded block outputs of an attention teacher.
template <typename Scalar>
ForwardResult<Scalar> teacher_forward(const VisionModel<Scalar>& teacher, const MatrixX<Scalar>& images,
                                      bool keep_attention = false) {
  if (teacher.variant() != Variant::attention) throw ConfigError("teacher_forward: model is not an attention teacher");
  return model_forward(teacher, images, {}, keep_attention);
}

template <typename Scalar>
std::vector<int> argmax_rows(const MatrixX<Scalar>& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::Index idx = 0;
    logits.row(r).maxCoeff(&idx);
    out[static_cast<std::size_t>(r)] = static_cast<int>(idx);
  }
  return out;
}

}  // namespace far
