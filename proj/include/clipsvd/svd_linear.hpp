// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "clipsvd/errors.hpp"
#include "clipsvd/linalg.hpp"

namespace clipsvd {

enum class MaskMode { all, top_k, bottom_k };

inline std::string to_string(MaskMode mode) {
  switch (mode) {
    case MaskMode::all: return "all";
    case MaskMode::top_k: return "top_k";
    case MaskMode::bottom_k: return "bottom_k";
  }
  return "all";
}

inline MaskMode parse_mask_mode(const std::string& s) {
  if (s == "all") return MaskMode::all;
  if (s == "top_k") return MaskMode::top_k;
  if (s == "bottom_k") return MaskMode::bottom_k;
  throw ConfigError("unknown mask mode '" + s + "'");
}

/// Which singular values of a decomposed matrix are trainable.
///
/// `k` is an absolute count. When `ratio` is positive it takes precedence and
/// each matrix gets max(1, round(ratio·r)), which lets one spec cover matrices
/// of different rank.
struct RankMaskSpec {
  MaskMode mode = MaskMode::all;
  std::size_t k = 0;
  double ratio = 0.0;

  std::size_t resolve(std::size_t rank) const {
    if (mode == MaskMode::all) return rank;
    std::size_t count = k;
    if (ratio > 0.0) {
      if (ratio > 1.0) throw ConfigError("rank mask ratio must be in (0, 1]");
      count = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(ratio * static_cast<double>(rank))));
    }
    if (count == 0 || count > rank) {
      throw ConfigError("rank mask k=" + std::to_string(count) + " out of range for rank " +
                        std::to_string(rank));
    }
    return count;
  }

  std::vector<bool> build(std::size_t rank) const {
    const std::size_t count = resolve(rank);
    std::vector<bool> mask(rank, mode == MaskMode::all);
    if (mode == MaskMode::top_k) {
      for (std::size_t i = 0; i < count; ++i) mask[i] = true;
    } else if (mode == MaskMode::bottom_k) {
      for (std::size_t i = rank - count; i < rank; ++i) mask[i] = true;
    }
    return mask;
  }
};

/// Ordinary dense affine map y = x·weight + bias. Used for pretraining and as
/// the materialized reference path.
struct DenseLinear {
  Matrix weight;  // in x out
  Vector bias;    // empty or out

  std::size_t in_dim() const noexcept { return weight.rows(); }
  std::size_t out_dim() const noexcept { return weight.cols(); }
  bool operator==(const DenseLinear&) const = default;
};

/// Linear map with frozen singular vectors and trainable singular values:
/// y = x·U·diag(s_current)·Vᵀ + bias.
struct SvdLinear {
  SvdFactors factors;
  Vector s_current;
  Vector s_initial;
  std::vector<bool> mask;
  Vector bias;  // empty when absent

  std::size_t in_dim() const noexcept { return factors.source_rows; }
  std::size_t out_dim() const noexcept { return factors.source_cols; }
  std::size_t rank() const noexcept { return factors.rank(); }
  std::size_t trainable_count() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
  }
  bool operator==(const SvdLinear&) const = default;
};

inline void add_bias_rows(Matrix& y, const Vector& bias) {
  if (bias.empty()) return;
  if (bias.size() != y.cols()) throw ShapeError("bias length does not match output width");
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += bias[j];
}

inline SvdLinear decompose_layer(const Matrix& w, Vector bias = {}, const RankMaskSpec& mask_spec = {}) {
  if (!all_finite(w)) throw NumericError("decompose_layer: non-finite weight", 0.0);
  if (!bias.empty() && bias.size() != w.cols()) throw ShapeError("decompose_layer: bias length");
  SvdLinear layer;
  layer.factors = svd(w);
  layer.mask = mask_spec.build(layer.factors.rank());
  layer.s_current = layer.factors.s;
  layer.s_initial = layer.factors.s;
  layer.bias = std::move(bias);
  return layer;
}

inline Matrix effective_weight(const SvdLinear& layer) {
  return recompose(layer.factors.u, layer.s_current, layer.factors.v);
}

inline Matrix effective_weight(const DenseLinear& layer) { return layer.weight; }

// ---------------------------------------------------------------------------
// Forward / reverse passes. Both layer kinds expose the same free functions so
// the encoder can be written once as a template.
// ---------------------------------------------------------------------------

inline Matrix forward(const DenseLinear& layer, const Matrix& x) {
  if (x.cols() != layer.in_dim()) {
    throw ShapeError("linear forward: input " + x.shape_string() + " vs weight " +
                     layer.weight.shape_string());
  }
  Matrix y = matmul(x, layer.weight);
  add_bias_rows(y, layer.bias);
  return y;
}

/// Factor-wise: (x·U)·diag(s)·Vᵀ, never forming W.
inline Matrix forward(const SvdLinear& layer, const Matrix& x) {
  if (x.cols() != layer.in_dim()) {
    throw ShapeError("svd linear forward: input " + x.shape_string() + " vs in_dim " +
                     std::to_string(layer.in_dim()));
  }
  Matrix t = matmul(x, layer.factors.u);
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t k = 0; k < t.cols(); ++k) t(i, k) *= layer.s_current[k];
  Matrix y = matmul_nt(t, layer.factors.v);
  add_bias_rows(y, layer.bias);
  return y;
}

inline DenseLinear zeros_like(const DenseLinear& layer) {
  return {Matrix(layer.weight.rows(), layer.weight.cols()), Vector(layer.bias.size(), 0.0)};
}

inline Vector zeros_like(const SvdLinear& layer) { return Vector(layer.rank(), 0.0); }

/// Accumulates weight/bias gradients into `grad` and returns dL/dx.
inline Matrix backward(const DenseLinear& layer, const Matrix& x, const Matrix& dy, DenseLinear& grad) {
  if (dy.cols() != layer.out_dim() || x.rows() != dy.rows()) throw ShapeError("linear backward shape");
  grad.weight += matmul_tn(x, dy);
  if (!layer.bias.empty()) {
    for (std::size_t i = 0; i < dy.rows(); ++i)
      for (std::size_t j = 0; j < dy.cols(); ++j) grad.bias[j] += dy(i, j);
  }
  return matmul_nt(dy, layer.weight);
}

/// Accumulates dL/ds into `grad_s` (masked entries stay untouched) and returns
/// dL/dx. With t = x·U and a = dy·V: dL/ds_j = Σ_i t_ij·a_ij.
inline Matrix backward(const SvdLinear& layer, const Matrix& x, const Matrix& dy, Vector& grad_s) {
  if (dy.cols() != layer.out_dim() || x.rows() != dy.rows()) throw ShapeError("svd linear backward shape");
  const Matrix t = matmul(x, layer.factors.u);
  Matrix a = matmul(dy, layer.factors.v);
  for (std::size_t k = 0; k < layer.rank(); ++k) {
    if (!layer.mask[k]) continue;
    double g = 0.0;
    for (std::size_t i = 0; i < t.rows(); ++i) g += t(i, k) * a(i, k);
    grad_s[k] += g;
  }
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) a(i, k) *= layer.s_current[k];
  return matmul_nt(a, layer.factors.u);
}

/// g_j = u_jᵀ·grad_w·v_j, zero where the mask is off.
inline Vector grad_singular(const SvdLinear& layer, const Matrix& grad_w) {
  if (grad_w.rows() != layer.in_dim() || grad_w.cols() != layer.out_dim()) {
    throw ShapeError("grad_singular: gradient " + grad_w.shape_string() + " vs weight [" +
                     std::to_string(layer.in_dim()) + "x" + std::to_string(layer.out_dim()) + "]");
  }
  const Matrix gv = matmul(grad_w, layer.factors.v);
  Vector g(layer.rank(), 0.0);
  for (std::size_t k = 0; k < layer.rank(); ++k) {
    if (!layer.mask[k]) continue;
    double acc = 0.0;
    for (std::size_t i = 0; i < gv.rows(); ++i) acc += layer.factors.u(i, k) * gv(i, k);
    g[k] = acc;
  }
  return g;
}

}  // namespace clipsvd
