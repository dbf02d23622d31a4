// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "clipsvd/encoder.hpp"
#include "clipsvd/errors.hpp"
#include "clipsvd/linalg.hpp"
#include "clipsvd/rng.hpp"
#include "clipsvd/svd_linear.hpp"

namespace clipsvd {

struct ModelConfig {
  EncoderConfig vision;
  EncoderConfig text;
  std::size_t embed_dim = 0;  // shared image/text space
  std::size_t patch_dim = 0;
  std::size_t max_patches = 0;
  std::size_t vocab_size = 0;
  std::size_t max_text_len = 0;
  double tau_init = 0.07;

  void validate() const {
    vision.validate();
    text.validate();
    if (embed_dim == 0 || patch_dim == 0 || max_patches == 0 || vocab_size == 0 || max_text_len == 0) {
      throw ConfigError("model config: embed_dim, patch_dim, max_patches, vocab_size, max_text_len must be >= 1");
    }
    if (!(tau_init > 0.0)) throw ConfigError("model config: tau must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Trainable singular values of both encoders, for a config.
inline std::size_t count_trainable(const ModelConfig& cfg, const RankMaskSpec& mask = {}) {
  const std::array<EncoderConfig, 2> encoders{cfg.vision, cfg.text};
  return count_trainable(std::span<const EncoderConfig>(encoders), mask);
}

struct VisionStem {
  Matrix patch_embed;  // patch_dim x D_v
  Vector class_token;  // D_v
  Matrix positions;    // (max_patches + 1) x D_v
  bool operator==(const VisionStem&) const = default;
};

struct TextStem {
  Matrix token_table;  // vocab x D_t
  Vector class_token;  // D_t
  Matrix positions;    // (max_text_len + 1) x D_t
  bool operator==(const TextStem&) const = default;
};

/// Image and text towers meeting in a shared, L2-normalized space.
/// Temperature is stored as logit_scale = ln(1/τ).
template <class Lin>
struct DualEncoderModel {
  ModelConfig config;
  VisionStem vision_stem;
  Encoder<Lin> vision;
  Matrix proj_v;  // D_v x D
  TextStem text_stem;
  Encoder<Lin> text;
  Matrix proj_t;  // D_t x D
  double logit_scale = 0.0;

  double tau() const { return std::exp(-logit_scale); }
  bool operator==(const DualEncoderModel&) const = default;
};

using DenseModel = DualEncoderModel<DenseLinear>;
using SvdModel = DualEncoderModel<SvdLinear>;

/// dL/ds for every decomposed matrix of both towers.
struct SingularGradients {
  Encoder<Vector> vision;
  Encoder<Vector> text;
};

/// Gradient container matching a model kind: a zero-initialized model for
/// dense training, singular-value vectors for adaptation.
template <class Lin>
using ModelGradients = std::conditional_t<GradTraits<Lin>::trains_all, DenseModel, SingularGradients>;

inline DenseModel init_dense_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  DenseModel m;
  m.config = cfg;
  const std::size_t dv = cfg.vision.embed_dim;
  const std::size_t dt = cfg.text.embed_dim;
  m.vision_stem.patch_embed = Matrix::random_normal(cfg.patch_dim, dv, rng, 1.0 / std::sqrt(static_cast<double>(cfg.patch_dim)));
  m.vision_stem.class_token = Matrix::random_normal(1, dv, rng).values();
  m.vision_stem.positions = Matrix::random_normal(cfg.max_patches + 1, dv, rng, 0.1);
  m.text_stem.token_table = Matrix::random_normal(cfg.vocab_size, dt, rng);
  m.text_stem.class_token = Matrix::random_normal(1, dt, rng).values();
  m.text_stem.positions = Matrix::random_normal(cfg.max_text_len + 1, dt, rng, 0.1);
  Rng vrng = rng.fork(1);
  Rng trng = rng.fork(2);
  m.vision = init_dense_encoder(cfg.vision, vrng);
  m.text = init_dense_encoder(cfg.text, trng);
  m.proj_v = Matrix::random_normal(dv, cfg.embed_dim, rng, 1.0 / std::sqrt(static_cast<double>(dv)));
  m.proj_t = Matrix::random_normal(dt, cfg.embed_dim, rng, 1.0 / std::sqrt(static_cast<double>(dt)));
  m.logit_scale = std::log(1.0 / cfg.tau_init);
  return m;
}

/// Swaps every encoder weight for its SVD factors; everything else is copied.
inline SvdModel decompose_model(const DenseModel& dense, const RankMaskSpec& mask = {}) {
  SvdModel m;
  m.config = dense.config;
  m.vision_stem = dense.vision_stem;
  m.text_stem = dense.text_stem;
  m.proj_v = dense.proj_v;
  m.proj_t = dense.proj_t;
  m.logit_scale = dense.logit_scale;
  m.vision = decompose_encoder(dense.vision, mask, dense.config.vision.qkv);
  m.text = decompose_encoder(dense.text, mask, dense.config.text.qkv);
  return m;
}

inline DenseModel densify_model(const SvdModel& svd_model) {
  DenseModel m;
  m.config = svd_model.config;
  m.vision_stem = svd_model.vision_stem;
  m.text_stem = svd_model.text_stem;
  m.proj_v = svd_model.proj_v;
  m.proj_t = svd_model.proj_t;
  m.logit_scale = svd_model.logit_scale;
  m.vision = densify_encoder(svd_model.vision);
  m.text = densify_encoder(svd_model.text);
  return m;
}

inline DenseModel zero_grads(const DenseModel& m) {
  DenseModel g;
  g.config = m.config;
  auto zeros = [](const Matrix& x) { return Matrix(x.rows(), x.cols()); };
  g.vision_stem = {zeros(m.vision_stem.patch_embed), Vector(m.vision_stem.class_token.size(), 0.0),
                   zeros(m.vision_stem.positions)};
  g.text_stem = {zeros(m.text_stem.token_table), Vector(m.text_stem.class_token.size(), 0.0),
                 zeros(m.text_stem.positions)};
  g.vision = zero_grads(m.vision);
  g.text = zero_grads(m.text);
  g.proj_v = zeros(m.proj_v);
  g.proj_t = zeros(m.proj_t);
  g.logit_scale = 0.0;
  return g;
}

inline SingularGradients zero_grads(const SvdModel& m) { return {zero_grads(m.vision), zero_grads(m.text)}; }

/// Walks every parameter of an encoder in canonical order, calling
/// v.linear / v.vector on the visitor.
template <class Enc, class Visitor>
void visit_encoder(Enc& enc, const std::string& prefix, Visitor& v) {
  for (std::size_t l = 0; l < enc.layers.size(); ++l) {
    auto& layer = enc.layers[l];
    const std::string base = prefix + "layers." + std::to_string(l) + ".";
    for_each_projection(layer, [&](const std::string& name, auto& lin) { v.linear(base + name, lin); });
    v.vector(base + "ln1.gain", layer.ln1.gain);
    v.vector(base + "ln1.bias", layer.ln1.bias);
    v.vector(base + "ln2.gain", layer.ln2.gain);
    v.vector(base + "ln2.bias", layer.ln2.bias);
  }
  v.vector(prefix + "ln_final.gain", enc.ln_final.gain);
  v.vector(prefix + "ln_final.bias", enc.ln_final.bias);
}

/// Walks every parameter of a model (dense or decomposed) in canonical order.
/// The visitor provides tensor(name, Matrix&), vector(name, Vector&),
/// linear(name, Lin&) and scalar(name, double&); constness follows `Model`.
template <class Model, class Visitor>
void visit_model(Model& m, Visitor& v) {
  v.tensor("vision.stem.patch_embed", m.vision_stem.patch_embed);
  v.vector("vision.stem.class_token", m.vision_stem.class_token);
  v.tensor("vision.stem.positions", m.vision_stem.positions);
  visit_encoder(m.vision, "vision.", v);
  v.tensor("vision.proj", m.proj_v);
  v.tensor("text.stem.token_table", m.text_stem.token_table);
  v.vector("text.stem.class_token", m.text_stem.class_token);
  v.tensor("text.stem.positions", m.text_stem.positions);
  visit_encoder(m.text, "text.", v);
  v.tensor("text.proj", m.proj_t);
  v.scalar("logit_scale", m.logit_scale);
}

/// Flat views of every dense parameter, in visit order.
struct DenseParamViews {
  std::vector<std::string> names;
  std::vector<std::span<double>> views;

  void tensor(const std::string& name, Matrix& m) { add(name, m.data()); }
  void vector(const std::string& name, Vector& v) { add(name, v); }
  void scalar(const std::string& name, double& x) { add(name, std::span<double>(&x, 1)); }
  void linear(const std::string& name, DenseLinear& lin) {
    add(name + ".weight", lin.weight.data());
    if (!lin.bias.empty()) add(name + ".bias", lin.bias);
  }

 private:
  void add(const std::string& name, std::span<double> view) {
    names.push_back(name);
    views.push_back(view);
  }
};

inline DenseParamViews dense_param_views(DenseModel& m) {
  DenseParamViews v;
  visit_model(m, v);
  return v;
}

// ---------------------------------------------------------------------------
// Embedding
// ---------------------------------------------------------------------------

enum class Modality { image, text };

/// Everything the reverse pass needs for one encoded input.
struct EmbeddingTrace {
  Modality modality = Modality::image;
  ForwardTrace encoder;
  Matrix patches;               // image inputs
  std::vector<std::size_t> ids;  // text inputs
  Vector pooled;
  Vector feature;  // projected, before normalization
  double feature_norm = 0.0;
  Vector embedding;
};

namespace detail {

inline Vector project_and_normalize(std::span<const double> pooled, const Matrix& proj, EmbeddingTrace* tr) {
  const Matrix feat = matmul(Matrix::row_vector(pooled), proj);
  double norm = 0.0;
  Vector emb = l2_normalize(feat.data(), &norm);
  if (tr != nullptr) {
    tr->pooled.assign(pooled.begin(), pooled.end());
    tr->feature = feat.values();
    tr->feature_norm = norm;
    tr->embedding = emb;
  }
  return emb;
}

}  // namespace detail

/// Token matrix fed to the vision encoder: [class; patches·E] + positions.
template <class Lin>
Matrix image_tokens(const DualEncoderModel<Lin>& model, const Matrix& patches) {
  const auto& cfg = model.config;
  if (patches.cols() != cfg.patch_dim || patches.rows() == 0 || patches.rows() > cfg.max_patches) {
    throw ShapeError("encode_image: patches " + patches.shape_string() + " vs patch_dim " +
                     std::to_string(cfg.patch_dim) + ", max_patches " + std::to_string(cfg.max_patches));
  }
  const Matrix embedded = matmul(patches, model.vision_stem.patch_embed);
  const std::size_t dv = cfg.vision.embed_dim;
  Matrix tokens(patches.rows() + 1, dv);
  for (std::size_t j = 0; j < dv; ++j) tokens(0, j) = model.vision_stem.class_token[j];
  for (std::size_t i = 0; i < embedded.rows(); ++i)
    for (std::size_t j = 0; j < dv; ++j) tokens(i + 1, j) = embedded(i, j);
  for (std::size_t i = 0; i < tokens.rows(); ++i)
    for (std::size_t j = 0; j < dv; ++j) tokens(i, j) += model.vision_stem.positions(i, j);
  return tokens;
}

template <class Lin>
Matrix text_tokens(const DualEncoderModel<Lin>& model, std::span<const std::size_t> ids) {
  const auto& cfg = model.config;
  if (ids.empty() || ids.size() > cfg.max_text_len) {
    throw InputError("encode_text: sequence length " + std::to_string(ids.size()) + " not in [1, " +
                     std::to_string(cfg.max_text_len) + "]");
  }
  const std::size_t dt = cfg.text.embed_dim;
  Matrix tokens(ids.size() + 1, dt);
  for (std::size_t j = 0; j < dt; ++j) tokens(0, j) = model.text_stem.class_token[j];
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= cfg.vocab_size) {
      throw InputError("encode_text: token id " + std::to_string(ids[i]) + " >= vocab size " +
                       std::to_string(cfg.vocab_size));
    }
    const auto row = model.text_stem.token_table.row(ids[i]);
    for (std::size_t j = 0; j < dt; ++j) tokens(i + 1, j) = row[j];
  }
  for (std::size_t i = 0; i < tokens.rows(); ++i)
    for (std::size_t j = 0; j < dt; ++j) tokens(i, j) += model.text_stem.positions(i, j);
  return tokens;
}

/// Unit-norm image embedding: embed, prepend class token, add positions,
/// encode, project, normalize.
template <class Lin>
Vector encode_image(const DualEncoderModel<Lin>& model, const Matrix& patches, EmbeddingTrace* trace = nullptr) {
  const Matrix tokens = image_tokens(model, patches);
  auto [pooled, enc_trace] = encoder_forward(model.vision, tokens);
  if (trace != nullptr) {
    trace->modality = Modality::image;
    trace->encoder = std::move(enc_trace);
    trace->patches = patches;
  }
  return detail::project_and_normalize(pooled, model.proj_v, trace);
}

template <class Lin>
Vector encode_text(const DualEncoderModel<Lin>& model, std::span<const std::size_t> ids,
                   EmbeddingTrace* trace = nullptr) {
  const Matrix tokens = text_tokens(model, ids);
  auto [pooled, enc_trace] = encoder_forward(model.text, tokens);
  if (trace != nullptr) {
    trace->modality = Modality::text;
    trace->encoder = std::move(enc_trace);
    trace->ids.assign(ids.begin(), ids.end());
  }
  return detail::project_and_normalize(pooled, model.proj_t, trace);
}

/// Propagates dL/d(embedding) back through normalization, projection, the
/// encoder and (for dense models) the token stem, accumulating into `grads`.
template <class Lin>
void embedding_backward(const DualEncoderModel<Lin>& model, const EmbeddingTrace& tr,
                        std::span<const double> d_embedding, ModelGradients<Lin>& grads) {
  const std::size_t dim = tr.embedding.size();
  if (d_embedding.size() != dim) throw ShapeError("embedding_backward: gradient length");
  const double radial = dot(tr.embedding, d_embedding);
  Matrix d_feat(1, dim);
  for (std::size_t j = 0; j < dim; ++j) {
    d_feat(0, j) = (d_embedding[j] - tr.embedding[j] * radial) / tr.feature_norm;
  }
  const bool image = tr.modality == Modality::image;
  const Matrix& proj = image ? model.proj_v : model.proj_t;
  const Matrix d_pooled = matmul_nt(d_feat, proj);
  const Encoder<Lin>& enc = image ? model.vision : model.text;
  auto& enc_grads = image ? grads.vision : grads.text;
  const Matrix d_tokens = encoder_backward_into(enc, tr.encoder, d_pooled.data(), enc_grads);

  if constexpr (GradTraits<Lin>::trains_all) {
    (image ? grads.proj_v : grads.proj_t) += matmul_tn(Matrix::row_vector(tr.pooled), d_feat);
    if (image) {
      auto& stem = grads.vision_stem;
      for (std::size_t j = 0; j < d_tokens.cols(); ++j) stem.class_token[j] += d_tokens(0, j);
      for (std::size_t i = 0; i < d_tokens.rows(); ++i)
        for (std::size_t j = 0; j < d_tokens.cols(); ++j) stem.positions(i, j) += d_tokens(i, j);
      stem.patch_embed += matmul_tn(tr.patches, row_slice(d_tokens, 1, d_tokens.rows() - 1));
    } else {
      auto& stem = grads.text_stem;
      for (std::size_t j = 0; j < d_tokens.cols(); ++j) stem.class_token[j] += d_tokens(0, j);
      for (std::size_t i = 0; i < d_tokens.rows(); ++i)
        for (std::size_t j = 0; j < d_tokens.cols(); ++j) stem.positions(i, j) += d_tokens(i, j);
      for (std::size_t i = 0; i < tr.ids.size(); ++i) {
        auto row = stem.token_table.row(tr.ids[i]);
        for (std::size_t j = 0; j < d_tokens.cols(); ++j) row[j] += d_tokens(i + 1, j);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Zero-shot classification
// ---------------------------------------------------------------------------

/// Rows of unit-norm embeddings tagged with their modality.
struct EmbeddingBatch {
  Matrix rows;
  Modality modality = Modality::text;

  void validate(double tol = 1e-10) const {
    for (std::size_t i = 0; i < rows.rows(); ++i) {
      if (std::abs(norm2(rows.row(i)) - 1.0) > tol) {
        throw InputError("embedding batch row " + std::to_string(i) + " is not unit norm");
      }
    }
  }
};

/// Cosine similarities of one image against every class (plain dot products).
inline Vector class_similarities(std::span<const double> image_emb, const EmbeddingBatch& classes) {
  if (image_emb.size() != classes.rows.cols()) throw ShapeError("class_similarities: dimension mismatch");
  Vector sims(classes.rows.rows());
  for (std::size_t c = 0; c < sims.size(); ++c) sims[c] = dot(image_emb, classes.rows.row(c));
  return sims;
}

/// softmax(sim / τ) over classes.
inline Vector class_probabilities(std::span<const double> image_emb, const EmbeddingBatch& classes, double tau) {
  if (!(tau > 0.0)) throw ConfigError("class_probabilities: tau must be positive");
  Vector logits = class_similarities(image_emb, classes);
  for (auto& x : logits) x /= tau;
  softmax_inplace(logits);
  return logits;
}

/// Argmax of the similarities; the lowest index wins exact ties. Independent
/// of τ because softmax is monotone.
inline std::size_t predict(std::span<const double> image_emb, const EmbeddingBatch& classes, double tau = 1.0) {
  if (!(tau > 0.0)) throw ConfigError("predict: tau must be positive");
  const Vector sims = class_similarities(image_emb, classes);
  std::size_t best = 0;
  for (std::size_t c = 1; c < sims.size(); ++c)
    if (sims[c] > sims[best]) best = c;
  return best;
}

template <class Lin>
EmbeddingBatch encode_texts(const DualEncoderModel<Lin>& model, const std::vector<std::vector<std::size_t>>& texts) {
  EmbeddingBatch batch{Matrix(texts.size(), model.config.embed_dim), Modality::text};
  for (std::size_t c = 0; c < texts.size(); ++c) {
    const Vector e = encode_text(model, texts[c]);
    std::copy(e.begin(), e.end(), batch.rows.row(c).begin());
  }
  return batch;
}

}  // namespace clipsvd
