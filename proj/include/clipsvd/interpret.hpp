// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "clipsvd/adapt.hpp"
#include "clipsvd/encoder.hpp"
#include "clipsvd/errors.hpp"
#include "clipsvd/linalg.hpp"
#include "clipsvd/model.hpp"

namespace clipsvd {

/// Inclusive-exclusive range of encoder layers.
struct LayerRange {
  std::size_t first = 0;
  std::size_t last = 0;  // one past the end

  /// The final `count` layers of an encoder with `num_layers` blocks.
  static LayerRange last_n(std::size_t num_layers, std::size_t count = 4) {
    return {num_layers > count ? num_layers - count : 0, num_layers};
  }
};

/// Per-image contribution of one vision head to the class-token residual
/// stream, both in the residual space (D_v) and mapped into the shared
/// embedding space through the final norm (linearized at the image's own
/// statistics) and the projection.
struct HeadOutputs {
  std::size_t layer = 0;
  std::size_t head = 0;
  Matrix residual;  // images x D_v
  Matrix joint;     // images x D
};

/// Class-token decomposition of one image: direct path, per-(layer, head)
/// attention contributions, attention-output biases and MLP outputs.
/// Their sum is the class-token row entering the final norm.
struct ResidualDecomposition {
  Vector direct;                        // input token row 0
  std::vector<std::vector<Vector>> heads;  // [layer][head]
  std::vector<Vector> attn_bias;        // [layer]
  std::vector<Vector> mlp;              // [layer]
  Vector final_inv_std;                 // 1-element: the final norm's 1/σ
};

namespace detail {

/// Head h's share of the class-token attention output:
/// Σ_i α_0i · v_i^h · W_O[rows of head h].
inline Vector head_contribution(const MhsaTrace& tr, const Matrix& o_weight, std::size_t head, std::size_t head_dim) {
  const Matrix& attn = tr.attention[head];
  Vector mixed(head_dim, 0.0);
  for (std::size_t i = 0; i < attn.cols(); ++i) {
    const double a = attn(0, i);
    for (std::size_t j = 0; j < head_dim; ++j) mixed[j] += a * tr.v(i, head * head_dim + j);
  }
  const Matrix out = matmul(Matrix::row_vector(mixed), row_slice(o_weight, head * head_dim, head_dim));
  return out.values();
}

}  // namespace detail

template <class Lin>
ResidualDecomposition decompose_class_token(const DualEncoderModel<Lin>& model, const Matrix& patches) {
  const auto& enc = model.vision;
  const auto& cfg = enc.config;
  const Matrix tokens = image_tokens(model, patches);
  auto [pooled, tr] = encoder_forward(enc, tokens);
  ResidualDecomposition d;
  d.direct.assign(tokens.row(0).begin(), tokens.row(0).end());
  const std::size_t hd = cfg.head_dim();
  for (std::size_t l = 0; l < enc.layers.size(); ++l) {
    const Matrix o_weight = effective_weight(enc.layers[l].o);
    std::vector<Vector> per_head;
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      per_head.push_back(detail::head_contribution(tr.attn[l], o_weight, h, hd));
    }
    d.heads.push_back(std::move(per_head));
    const auto& ob = enc.layers[l].o.bias;
    d.attn_bias.push_back(ob.empty() ? Vector(cfg.embed_dim, 0.0) : ob);
    const Matrix mlp_out = forward(enc.layers[l].mlp_out, row_slice(tr.mlp[l].act, 0, 1));
    d.mlp.push_back(mlp_out.values());
  }
  d.final_inv_std = {tr.final_ln.inv_std[0]};
  return d;
}

/// Maps a residual-space vector into the shared space: the final norm is
/// linear once the image's 1/σ is fixed (centering, scaling, gain), then the
/// projection applies. The norm's bias is not attributed to any component.
template <class Lin>
Vector residual_to_joint(const DualEncoderModel<Lin>& model, std::span<const double> r, double inv_std) {
  const auto& gain = model.vision.ln_final.gain;
  double mean = 0.0;
  for (double x : r) mean += x;
  mean /= static_cast<double>(r.size());
  Matrix z(1, r.size());
  for (std::size_t j = 0; j < r.size(); ++j) z(0, j) = (r[j] - mean) * inv_std * gain[j];
  return matmul(z, model.proj_v).values();
}

/// Contributions of vision head (layer, head) for every probe image.
/// With `mean_center` the per-head mean over images is subtracted.
template <class Lin>
HeadOutputs collect_head_outputs(const DualEncoderModel<Lin>& model, const std::vector<Matrix>& probe_images,
                                 std::size_t layer, std::size_t head, bool mean_center = false) {
  const auto& cfg = model.vision.config;
  if (layer >= model.vision.layers.size() || head >= cfg.num_heads) {
    throw InputError("collect_head_outputs: (layer " + std::to_string(layer) + ", head " + std::to_string(head) +
                     ") out of range");
  }
  if (probe_images.empty()) throw InputError("collect_head_outputs: no probe images");
  HeadOutputs out{layer, head, Matrix(probe_images.size(), cfg.embed_dim),
                  Matrix(probe_images.size(), model.config.embed_dim)};
  const Matrix o_weight = effective_weight(model.vision.layers[layer].o);
  for (std::size_t n = 0; n < probe_images.size(); ++n) {
    const Matrix tokens = image_tokens(model, probe_images[n]);
    auto [pooled, tr] = encoder_forward(model.vision, tokens);
    const Vector c = detail::head_contribution(tr.attn[layer], o_weight, head, cfg.head_dim());
    std::copy(c.begin(), c.end(), out.residual.row(n).begin());
    const Vector j = residual_to_joint(model, c, tr.final_ln.inv_std[0]);
    std::copy(j.begin(), j.end(), out.joint.row(n).begin());
  }
  if (mean_center) {
    for (Matrix* m : {&out.residual, &out.joint}) {
      for (std::size_t c = 0; c < m->cols(); ++c) {
        double mean = 0.0;
        for (std::size_t r = 0; r < m->rows(); ++r) mean += (*m)(r, c);
        mean /= static_cast<double>(m->rows());
        for (std::size_t r = 0; r < m->rows(); ++r) (*m)(r, c) -= mean;
      }
    }
  }
  return out;
}

struct CorpusFeatures {
  std::vector<std::string> texts;
  Matrix embeddings;  // texts x D
};

template <class Lin>
CorpusFeatures embed_corpus(const DualEncoderModel<Lin>& model, std::vector<std::string> texts,
                            const std::vector<std::vector<std::size_t>>& token_ids) {
  if (texts.size() != token_ids.size()) throw InputError("embed_corpus: texts and token ids are not aligned");
  CorpusFeatures f{std::move(texts), encode_texts(model, token_ids).rows};
  return f;
}

struct CorpusProjection {
  Matrix projected;    // T̃: corpus rows projected onto the row space of X
  Matrix similarity;   // P = X·T̃ᵀ, images x texts
  std::size_t rank = 0;
};

/// Orthogonal projection of the corpus onto span(rows of X). X⁺X is built
/// from the SVD of X, dropping singular values below 1e-10·s_max, so it is
/// well defined for rank-deficient X.
inline CorpusProjection project_corpus(const Matrix& head_outputs, const Matrix& corpus) {
  if (head_outputs.cols() != corpus.cols()) throw ShapeError("project_corpus: dimension mismatch");
  if (max_abs(head_outputs) == 0.0) throw NumericError("project_corpus: head outputs are all zero", 0.0);
  const SvdFactors f = svd(head_outputs);
  const double smax = f.s.front();
  std::size_t rank = 0;
  while (rank < f.rank() && f.s[rank] > 1e-10 * smax) ++rank;
  const Matrix basis = column_slice(f.v, 0, rank);  // D x rank
  CorpusProjection out;
  out.rank = rank;
  out.projected = matmul_nt(matmul(corpus, basis), basis);
  out.similarity = matmul_nt(head_outputs, out.projected);
  return out;
}

inline CorpusProjection project_corpus(const HeadOutputs& head, const CorpusFeatures& corpus) {
  return project_corpus(head.joint, corpus.embeddings);
}

struct TextSpanResult {
  std::vector<std::size_t> indices;
  Vector explained;  // variance explained by each pick
  double total_variance = 0.0;
  bool stopped_early = false;

  double explained_ratio() const {
    double s = 0.0;
    for (double e : explained) s += e;
    return total_variance > 0.0 ? s / total_variance : 0.0;
  }
};

namespace detail {

inline double centered_energy_along(const Matrix& x, std::span<const double> dir) {
  const Matrix proj = matmul(x, Matrix(dir.size(), 1, Vector(dir.begin(), dir.end())));
  double mean = 0.0;
  for (double v : proj.data()) mean += v;
  mean /= static_cast<double>(proj.rows());
  double e = 0.0;
  for (double v : proj.data()) e += (v - mean) * (v - mean);
  return e;
}

inline double centered_energy(const Matrix& x) {
  double e = 0.0;
  for (std::size_t c = 0; c < x.cols(); ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r) mean += x(r, c);
    mean /= static_cast<double>(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) e += (x(r, c) - mean) * (x(r, c) - mean);
  }
  return e;
}

}  // namespace detail

/// Greedy description selection. Each round picks the remaining projected text
/// whose unit direction explains the most mean-centered variance of the
/// current head outputs (lowest index on ties), then removes that direction
/// from the head outputs and from every remaining text.
inline TextSpanResult textspan_select(const Matrix& head_outputs, const Matrix& projected, std::size_t m) {
  if (head_outputs.cols() != projected.cols()) throw ShapeError("textspan_select: dimension mismatch");
  if (m > projected.rows()) throw InputError("textspan_select: m exceeds corpus size");
  TextSpanResult out;
  Matrix x = head_outputs;
  Matrix texts = projected;
  out.total_variance = detail::centered_energy(x);
  std::vector<bool> taken(texts.rows(), false);
  const double floor = 1e-12 * std::max(1.0, out.total_variance);
  for (std::size_t round = 0; round < m; ++round) {
    if (detail::centered_energy(x) <= floor) {
      out.stopped_early = true;
      break;
    }
    std::size_t best = texts.rows();
    double best_var = -1.0;
    Vector best_dir;
    for (std::size_t j = 0; j < texts.rows(); ++j) {
      if (taken[j]) continue;
      const double n = norm2(texts.row(j));
      if (!(n > 1e-12)) continue;
      Vector dir(texts.row(j).begin(), texts.row(j).end());
      for (auto& v : dir) v /= n;
      const double var = detail::centered_energy_along(x, dir);
      if (var > best_var) {
        best_var = var;
        best = j;
        best_dir = std::move(dir);
      }
    }
    if (best == texts.rows()) {
      out.stopped_early = true;
      break;
    }
    taken[best] = true;
    out.indices.push_back(best);
    out.explained.push_back(best_var);
    for (Matrix* mat : {&x, &texts}) {
      for (std::size_t r = 0; r < mat->rows(); ++r) {
        const double c = dot(mat->row(r), best_dir);
        auto row = mat->row(r);
        for (std::size_t k = 0; k < row.size(); ++k) row[k] -= c * best_dir[k];
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Head ranking
// ---------------------------------------------------------------------------

struct HeadReport {
  std::size_t layer = 0;
  std::size_t head = 0;
  double score = 0.0;
  double v_change = 0.0;
  double o_change = 0.0;
  std::vector<std::size_t> top_descriptions;

  std::string label() const { return "(L" + std::to_string(layer) + ".H" + std::to_string(head) + ")"; }
};

/// Σ|after − before| / Σ before.
inline double normalized_change(std::span<const double> before, std::span<const double> after) {
  if (before.size() != after.size()) throw ShapeError("normalized_change: spectrum lengths differ");
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < before.size(); ++i) {
    num += std::abs(after[i] - before[i]);
    den += before[i];
  }
  if (num == 0.0) return 0.0;
  if (!(den > 0.0)) throw NumericError("normalized_change: zero reference spectrum", num);
  return num / den;
}

namespace detail {

/// Spectrum of a head's V map: its own trained singular values when Q/K/V are
/// decomposed per head, otherwise the SVD of the head's column slice.
inline std::pair<Vector, Vector> v_head_spectra(const EncoderLayer<SvdLinear>& before,
                                                const EncoderLayer<SvdLinear>& after, std::size_t head,
                                                std::size_t head_dim) {
  if (before.v.size() > 1) return {before.v[head].s_current, after.v[head].s_current};
  const auto slice_spectrum = [&](const SvdLinear& v) {
    return svd(column_slice(effective_weight(v), head * head_dim, head_dim)).s;
  };
  return {slice_spectrum(before.v[0]), slice_spectrum(after.v[0])};
}

inline Vector o_head_spectrum(const SvdLinear& o, std::size_t head, std::size_t head_dim) {
  return svd(row_slice(effective_weight(o), head * head_dim, head_dim)).s;
}

inline void check_same_architecture(const SvdModel& a, const SvdModel& b) {
  if (!(a.config == b.config) || a.vision.layers.size() != b.vision.layers.size()) {
    throw ShapeError("rank_heads: before/after architectures differ");
  }
  for (std::size_t l = 0; l < a.vision.layers.size(); ++l) {
    if (a.vision.layers[l].v.size() != b.vision.layers[l].v.size()) {
      throw ShapeError("rank_heads: before/after Q/K/V granularity differs");
    }
  }
}

}  // namespace detail

/// Ranks vision heads by normalized singular-value change of their V map plus
/// that of their W_O row slice (spectra compared as sorted multisets).
/// Sorted by descending score; ties keep (layer, head) order.
inline std::vector<HeadReport> rank_heads(const SvdModel& before, const SvdModel& after, LayerRange layers) {
  detail::check_same_architecture(before, after);
  const auto& cfg = before.vision.config;
  layers.last = std::min(layers.last, before.vision.layers.size());
  std::vector<HeadReport> out;
  const std::size_t hd = cfg.head_dim();
  for (std::size_t l = layers.first; l < layers.last; ++l) {
    const auto& lb = before.vision.layers[l];
    const auto& la = after.vision.layers[l];
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      HeadReport r;
      r.layer = l;
      r.head = h;
      const auto [vb, va] = detail::v_head_spectra(lb, la, h, hd);
      r.v_change = normalized_change(vb, va);
      r.o_change = normalized_change(detail::o_head_spectrum(lb.o, h, hd), detail::o_head_spectrum(la.o, h, hd));
      r.score = r.v_change + r.o_change;
      out.push_back(std::move(r));
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const HeadReport& a, const HeadReport& b) { return a.score > b.score; });
  return out;
}

/// Same ranking, after checking that `record` describes the `after` state
/// (its final spectra are the after checkpoint's singular values).
inline std::vector<HeadReport> rank_heads(const AdaptationRecord& record, const SvdModel& before, const SvdModel& after,
                                          LayerRange layers) {
  for_each_linear(after.vision, "vision.", [&](const std::string& name, const SvdLinear& lin) {
    const auto* e = record.find(name);
    if (e == nullptr) throw ShapeError("rank_heads: record has no entry for " + name);
    if (e->s_final != lin.s_current) throw ShapeError("rank_heads: record does not match the after state at " + name);
  });
  return rank_heads(before, after, layers);
}

/// Principal cosines between the column spaces of two matrices: singular
/// values of B_beforeᵀ·B_after for orthonormal bases of each column space.
inline Vector span_alignment(const Matrix& before, const Matrix& after) {
  if (before.rows() != after.rows() || before.cols() != after.cols()) {
    throw ShapeError("span_alignment: " + before.shape_string() + " vs " + after.shape_string());
  }
  const Matrix bb = column_space_basis(before);
  const Matrix ba = column_space_basis(after);
  if (bb.cols() == 0 || ba.cols() == 0) return {};
  return svd(matmul_tn(bb, ba)).s;
}

inline Vector span_alignment(const SvdLinear& before, const SvdLinear& after) {
  return span_alignment(effective_weight(before), effective_weight(after));
}

}  // namespace clipsvd
