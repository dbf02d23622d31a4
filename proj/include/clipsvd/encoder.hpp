// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "clipsvd/errors.hpp"
#include "clipsvd/linalg.hpp"
#include "clipsvd/rng.hpp"
#include "clipsvd/svd_linear.hpp"

namespace clipsvd {

enum class Activation { relu, gelu };

/// Granularity of the Q/K/V decomposition: one SVD per head slice, or one per
/// full D x D projection.
enum class QkvGranularity { per_head, full };

struct EncoderConfig {
  std::size_t embed_dim = 0;
  std::size_t num_heads = 1;
  std::size_t mlp_dim = 0;
  std::size_t num_layers = 0;
  Activation activation = Activation::relu;
  QkvGranularity qkv = QkvGranularity::per_head;

  std::size_t head_dim() const noexcept { return num_heads == 0 ? 0 : embed_dim / num_heads; }
  std::size_t qkv_parts() const noexcept { return qkv == QkvGranularity::per_head ? num_heads : 1; }

  void validate() const {
    if (embed_dim == 0 || num_heads == 0 || mlp_dim == 0) {
      throw ConfigError("encoder config: embed_dim, num_heads and mlp_dim must be >= 1");
    }
    if (embed_dim % num_heads != 0) {
      throw ConfigError("encoder config: embed_dim " + std::to_string(embed_dim) +
                        " not divisible by num_heads " + std::to_string(num_heads));
    }
  }

  bool operator==(const EncoderConfig&) const = default;
};

/// One pre-norm transformer block. `q`, `k`, `v` hold either one projection
/// per head (each D x d) or a single D x D projection.
template <class Lin>
struct EncoderLayer {
  std::vector<Lin> q, k, v;
  Lin o;
  Lin mlp_in;
  Lin mlp_out;
  LayerNormParams ln1, ln2;

  bool operator==(const EncoderLayer&) const = default;
};

template <class Lin>
struct Encoder {
  EncoderConfig config;
  std::vector<EncoderLayer<Lin>> layers;
  LayerNormParams ln_final;
  /// Bumped on every parameter update; traces from older epochs are rejected.
  std::uint64_t epoch = 0;

  bool operator==(const Encoder&) const = default;
};

/// Gradient carrier per layer kind: full dense grads, or dL/ds only.
template <class Lin>
struct GradTraits;

template <>
struct GradTraits<DenseLinear> {
  using type = DenseLinear;
  static constexpr bool trains_all = true;
};

template <>
struct GradTraits<SvdLinear> {
  using type = Vector;
  static constexpr bool trains_all = false;
};

template <class Lin>
using GradOf = typename GradTraits<Lin>::type;

/// Calls fn(suffix, a_member, b_member...) for each projection in a block, in
/// the canonical order q.h*, k.h*, v.h*, o, mlp.in, mlp.out. Works on any
/// block-shaped type so models and gradient sets walk identically.
template <class Layer, class Fn>
void for_each_projection(Layer& layer, Fn&& fn) {
  auto parts = [&](auto& list, const char* tag) {
    if (list.size() == 1) {
      fn(std::string("attn.") + tag, list[0]);
    } else {
      for (std::size_t h = 0; h < list.size(); ++h) {
        fn(std::string("attn.") + tag + ".h" + std::to_string(h), list[h]);
      }
    }
  };
  parts(layer.q, "q");
  parts(layer.k, "k");
  parts(layer.v, "v");
  fn(std::string("attn.o"), layer.o);
  fn(std::string("mlp.in"), layer.mlp_in);
  fn(std::string("mlp.out"), layer.mlp_out);
}

/// Visits every linear map in an encoder with a fully qualified name.
template <class Enc, class Fn>
void for_each_linear(Enc& enc, const std::string& prefix, Fn&& fn) {
  for (std::size_t l = 0; l < enc.layers.size(); ++l) {
    const std::string base = prefix + "layers." + std::to_string(l) + ".";
    for_each_projection(enc.layers[l], [&](const std::string& name, auto& lin) { fn(base + name, lin); });
  }
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

namespace detail {

inline DenseLinear random_dense(std::size_t in, std::size_t out, Rng& rng, double stddev, double bias_std) {
  DenseLinear lin{Matrix::random_normal(in, out, rng, stddev), Vector(out, 0.0)};
  for (auto& b : lin.bias) b = rng.normal() * bias_std;
  return lin;
}

}  // namespace detail

/// Freshly initialized dense encoder. Q/K/V are stored as single D x D maps.
inline Encoder<DenseLinear> init_dense_encoder(const EncoderConfig& cfg, Rng& rng, double bias_std = 0.0) {
  cfg.validate();
  Encoder<DenseLinear> enc;
  enc.config = cfg;
  const std::size_t d = cfg.embed_dim;
  const double attn_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double depth = std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(1, cfg.num_layers)));
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    EncoderLayer<DenseLinear> layer;
    layer.q = {detail::random_dense(d, d, rng, attn_std, bias_std)};
    layer.k = {detail::random_dense(d, d, rng, attn_std, bias_std)};
    layer.v = {detail::random_dense(d, d, rng, attn_std, bias_std)};
    layer.o = detail::random_dense(d, d, rng, attn_std / depth, bias_std);
    layer.mlp_in = detail::random_dense(d, cfg.mlp_dim, rng, attn_std, bias_std);
    layer.mlp_out = detail::random_dense(cfg.mlp_dim, d, rng,
                                         1.0 / std::sqrt(static_cast<double>(cfg.mlp_dim)) / depth, bias_std);
    layer.ln1 = LayerNormParams::identity(d);
    layer.ln2 = LayerNormParams::identity(d);
    enc.layers.push_back(std::move(layer));
  }
  enc.ln_final = LayerNormParams::identity(d);
  return enc;
}

namespace detail {

inline std::vector<SvdLinear> decompose_parts(const std::vector<DenseLinear>& parts, std::size_t heads,
                                              QkvGranularity granularity, const RankMaskSpec& mask) {
  Matrix full = parts.size() == 1 ? parts[0].weight : Matrix();
  Vector bias = parts.size() == 1 ? parts[0].bias : Vector();
  if (parts.size() != 1) {
    // Already split: join first so both granularities start from the same W.
    std::size_t cols = 0;
    for (const auto& p : parts) cols += p.out_dim();
    full = Matrix(parts[0].in_dim(), cols);
    std::size_t off = 0;
    for (const auto& p : parts) {
      set_column_slice(full, off, p.weight);
      bias.insert(bias.end(), p.bias.begin(), p.bias.end());
      off += p.out_dim();
    }
  }
  std::vector<SvdLinear> out;
  if (granularity == QkvGranularity::full) {
    out.push_back(decompose_layer(full, bias, mask));
    return out;
  }
  const std::size_t hd = full.cols() / heads;
  for (std::size_t h = 0; h < heads; ++h) {
    Vector b;
    if (!bias.empty()) b.assign(bias.begin() + static_cast<std::ptrdiff_t>(h * hd),
                                bias.begin() + static_cast<std::ptrdiff_t>((h + 1) * hd));
    out.push_back(decompose_layer(column_slice(full, h * hd, hd), std::move(b), mask));
  }
  return out;
}

inline DenseLinear join_parts(const std::vector<SvdLinear>& parts) {
  std::size_t cols = 0;
  for (const auto& p : parts) cols += p.out_dim();
  DenseLinear out{Matrix(parts[0].in_dim(), cols), {}};
  std::size_t off = 0;
  for (const auto& p : parts) {
    set_column_slice(out.weight, off, effective_weight(p));
    out.bias.insert(out.bias.end(), p.bias.begin(), p.bias.end());
    off += p.out_dim();
  }
  return out;
}

inline DenseLinear densify_linear(const SvdLinear& lin) { return {effective_weight(lin), lin.bias}; }

}  // namespace detail

/// Replaces every weight by its SVD factors. `granularity` overrides the
/// config's Q/K/V split.
inline Encoder<SvdLinear> decompose_encoder(const Encoder<DenseLinear>& dense, const RankMaskSpec& mask,
                                            QkvGranularity granularity) {
  Encoder<SvdLinear> enc;
  enc.config = dense.config;
  enc.config.qkv = granularity;
  enc.ln_final = dense.ln_final;
  const std::size_t heads = dense.config.num_heads;
  for (const auto& dl : dense.layers) {
    EncoderLayer<SvdLinear> layer;
    layer.q = detail::decompose_parts(dl.q, heads, granularity, mask);
    layer.k = detail::decompose_parts(dl.k, heads, granularity, mask);
    layer.v = detail::decompose_parts(dl.v, heads, granularity, mask);
    layer.o = decompose_layer(dl.o.weight, dl.o.bias, mask);
    layer.mlp_in = decompose_layer(dl.mlp_in.weight, dl.mlp_in.bias, mask);
    layer.mlp_out = decompose_layer(dl.mlp_out.weight, dl.mlp_out.bias, mask);
    layer.ln1 = dl.ln1;
    layer.ln2 = dl.ln2;
    enc.layers.push_back(std::move(layer));
  }
  return enc;
}

/// Materializes U·diag(s)·Vᵀ everywhere; Q/K/V become single D x D maps.
inline Encoder<DenseLinear> densify_encoder(const Encoder<SvdLinear>& enc) {
  Encoder<DenseLinear> dense;
  dense.config = enc.config;
  dense.ln_final = enc.ln_final;
  for (const auto& sl : enc.layers) {
    EncoderLayer<DenseLinear> layer;
    layer.q = {detail::join_parts(sl.q)};
    layer.k = {detail::join_parts(sl.k)};
    layer.v = {detail::join_parts(sl.v)};
    layer.o = detail::densify_linear(sl.o);
    layer.mlp_in = detail::densify_linear(sl.mlp_in);
    layer.mlp_out = detail::densify_linear(sl.mlp_out);
    layer.ln1 = sl.ln1;
    layer.ln2 = sl.ln2;
    dense.layers.push_back(std::move(layer));
  }
  return dense;
}

/// Zero gradient set shaped like `enc`. Layer-norm slots are only allocated
/// when the layer kind trains them.
template <class Lin>
Encoder<GradOf<Lin>> zero_grads(const Encoder<Lin>& enc) {
  Encoder<GradOf<Lin>> g;
  g.config = enc.config;
  auto zero_ln = [](const LayerNormParams& p) {
    if constexpr (GradTraits<Lin>::trains_all) {
      return LayerNormParams{Vector(p.gain.size(), 0.0), Vector(p.bias.size(), 0.0)};
    } else {
      return LayerNormParams{};
    }
  };
  for (const auto& layer : enc.layers) {
    EncoderLayer<GradOf<Lin>> gl;
    for (const auto& p : layer.q) gl.q.push_back(zeros_like(p));
    for (const auto& p : layer.k) gl.k.push_back(zeros_like(p));
    for (const auto& p : layer.v) gl.v.push_back(zeros_like(p));
    gl.o = zeros_like(layer.o);
    gl.mlp_in = zeros_like(layer.mlp_in);
    gl.mlp_out = zeros_like(layer.mlp_out);
    gl.ln1 = zero_ln(layer.ln1);
    gl.ln2 = zero_ln(layer.ln2);
    g.layers.push_back(std::move(gl));
  }
  g.ln_final = zero_ln(enc.ln_final);
  return g;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

struct MhsaTrace {
  Matrix input;
  LayerNormCache ln;
  Matrix normed;
  Matrix q, k, v;                // L x D, heads side by side
  std::vector<Matrix> attention;  // per head, L x L, rows sum to 1
  Matrix heads;                   // L x D concatenated head outputs
};

struct MlpTrace {
  Matrix input;
  LayerNormCache ln;
  Matrix normed;
  Matrix pre;  // L x mlp_dim
  Matrix act;
};

struct ForwardTrace {
  std::vector<MhsaTrace> attn;
  std::vector<MlpTrace> mlp;
  Matrix final_input;  // 1 x D, class-token row before the final norm
  LayerNormCache final_ln;
  Vector pooled;
  std::uint64_t epoch = 0;
  std::size_t num_tokens = 0;
  std::size_t embed_dim = 0;
};

namespace detail {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline double activate(Activation a, double x) {
  if (a == Activation::relu) return x > 0.0 ? x : 0.0;
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

inline double activate_grad(Activation a, double x) {
  if (a == Activation::relu) return x > 0.0 ? 1.0 : 0.0;
  const double inner = kGeluC * (x + 0.044715 * x * x * x);
  const double t = std::tanh(inner);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

template <class Lin>
Matrix project_parts(const std::vector<Lin>& parts, const Matrix& x) {
  if (parts.size() == 1) return forward(parts[0], x);
  std::size_t cols = 0;
  for (const auto& p : parts) cols += p.out_dim();
  Matrix out(x.rows(), cols);
  std::size_t off = 0;
  for (const auto& p : parts) {
    set_column_slice(out, off, forward(p, x));
    off += p.out_dim();
  }
  return out;
}

template <class Lin, class G>
Matrix project_parts_backward(const std::vector<Lin>& parts, const Matrix& x, const Matrix& dy,
                              std::vector<G>& grads) {
  if (parts.size() == 1) return backward(parts[0], x, dy, grads[0]);
  Matrix dx(x.rows(), x.cols());
  std::size_t off = 0;
  for (std::size_t h = 0; h < parts.size(); ++h) {
    dx += backward(parts[h], x, column_slice(dy, off, parts[h].out_dim()), grads[h]);
    off += parts[h].out_dim();
  }
  return dx;
}

}  // namespace detail

/// x + O(Concat_h softmax(Q_h K_hᵀ/√d)·V_h) on ln1(x).
template <class Lin>
std::pair<Matrix, MhsaTrace> mhsa_forward(const EncoderLayer<Lin>& layer, const EncoderConfig& cfg,
                                          const Matrix& x) {
  if (x.cols() != cfg.embed_dim) {
    throw ShapeError("mhsa_forward: input " + x.shape_string() + " vs embed_dim " +
                     std::to_string(cfg.embed_dim));
  }
  MhsaTrace tr;
  tr.input = x;
  tr.normed = layer_norm(x, layer.ln1, &tr.ln);
  tr.q = detail::project_parts(layer.q, tr.normed);
  tr.k = detail::project_parts(layer.k, tr.normed);
  tr.v = detail::project_parts(layer.v, tr.normed);
  const std::size_t hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  tr.heads = Matrix(x.rows(), cfg.embed_dim);
  for (std::size_t h = 0; h < cfg.num_heads; ++h) {
    const Matrix qh = column_slice(tr.q, h * hd, hd);
    const Matrix kh = column_slice(tr.k, h * hd, hd);
    const Matrix vh = column_slice(tr.v, h * hd, hd);
    Matrix attn = scale * matmul_nt(qh, kh);
    for (std::size_t i = 0; i < attn.rows(); ++i) softmax_inplace(attn.row(i));
    set_column_slice(tr.heads, h * hd, matmul(attn, vh));
    tr.attention.push_back(std::move(attn));
  }
  Matrix out = forward(layer.o, tr.heads);
  out += x;
  return {std::move(out), std::move(tr)};
}

/// x + mlp_out(act(mlp_in(ln2(x)))).
template <class Lin>
std::pair<Matrix, MlpTrace> mlp_forward(const EncoderLayer<Lin>& layer, const EncoderConfig& cfg,
                                        const Matrix& x) {
  if (x.cols() != cfg.embed_dim) throw ShapeError("mlp_forward: input " + x.shape_string());
  MlpTrace tr;
  tr.input = x;
  tr.normed = layer_norm(x, layer.ln2, &tr.ln);
  tr.pre = forward(layer.mlp_in, tr.normed);
  tr.act = tr.pre;
  for (auto& a : tr.act.data()) a = detail::activate(cfg.activation, a);
  Matrix out = forward(layer.mlp_out, tr.act);
  out += x;
  return {std::move(out), std::move(tr)};
}

/// Runs all blocks and returns the final-normed class-token (row 0) vector.
template <class Lin>
std::pair<Vector, ForwardTrace> encoder_forward(const Encoder<Lin>& enc, const Matrix& tokens) {
  const auto& cfg = enc.config;
  if (tokens.cols() != cfg.embed_dim || tokens.rows() == 0) {
    throw ShapeError("encoder_forward: tokens " + tokens.shape_string() + " vs embed_dim " +
                     std::to_string(cfg.embed_dim));
  }
  ForwardTrace tr;
  tr.epoch = enc.epoch;
  tr.num_tokens = tokens.rows();
  tr.embed_dim = cfg.embed_dim;
  Matrix x = tokens;
  for (const auto& layer : enc.layers) {
    auto [after_attn, at] = mhsa_forward(layer, cfg, x);
    auto [after_mlp, mt] = mlp_forward(layer, cfg, after_attn);
    tr.attn.push_back(std::move(at));
    tr.mlp.push_back(std::move(mt));
    x = std::move(after_mlp);
  }
  tr.final_input = row_slice(x, 0, 1);
  const Matrix pooled = layer_norm(tr.final_input, enc.ln_final, &tr.final_ln);
  tr.pooled.assign(pooled.data().begin(), pooled.data().end());
  Vector out = tr.pooled;
  return {std::move(out), std::move(tr)};
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

template <class Lin>
struct EncoderGradients {
  Encoder<GradOf<Lin>> params;
  Matrix d_tokens;
};

namespace detail {

template <class Lin, class G>
Matrix mlp_backward(const EncoderLayer<Lin>& layer, const EncoderConfig& cfg, const MlpTrace& tr,
                    const Matrix& dout, EncoderLayer<G>& grad) {
  Matrix dact = backward(layer.mlp_out, tr.act, dout, grad.mlp_out);
  for (std::size_t i = 0; i < dact.size(); ++i) {
    dact.data()[i] *= activate_grad(cfg.activation, tr.pre.data()[i]);
  }
  const Matrix dnormed = backward(layer.mlp_in, tr.normed, dact, grad.mlp_in);
  LayerNormParams* ln_grad = nullptr;
  if constexpr (GradTraits<Lin>::trains_all) ln_grad = &grad.ln2;
  Matrix dx = layer_norm_backward(tr.ln, layer.ln2.gain, dnormed, ln_grad);
  dx += dout;
  return dx;
}

template <class Lin, class G>
Matrix mhsa_backward(const EncoderLayer<Lin>& layer, const EncoderConfig& cfg, const MhsaTrace& tr,
                     const Matrix& dout, EncoderLayer<G>& grad) {
  const Matrix dheads = backward(layer.o, tr.heads, dout, grad.o);
  const std::size_t hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const std::size_t n = tr.input.rows();
  Matrix dq(n, cfg.embed_dim), dk(n, cfg.embed_dim), dv(n, cfg.embed_dim);
  for (std::size_t h = 0; h < cfg.num_heads; ++h) {
    const Matrix& attn = tr.attention[h];
    const Matrix qh = column_slice(tr.q, h * hd, hd);
    const Matrix kh = column_slice(tr.k, h * hd, hd);
    const Matrix vh = column_slice(tr.v, h * hd, hd);
    const Matrix dz = column_slice(dheads, h * hd, hd);
    const Matrix dattn = matmul_nt(dz, vh);
    set_column_slice(dv, h * hd, matmul_tn(attn, dz));
    Matrix dscore(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      double row_dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) row_dot += dattn(i, j) * attn(i, j);
      for (std::size_t j = 0; j < n; ++j) dscore(i, j) = attn(i, j) * (dattn(i, j) - row_dot) * scale;
    }
    set_column_slice(dq, h * hd, matmul(dscore, kh));
    set_column_slice(dk, h * hd, matmul_tn(dscore, qh));
  }
  Matrix dnormed = project_parts_backward(layer.q, tr.normed, dq, grad.q);
  dnormed += project_parts_backward(layer.k, tr.normed, dk, grad.k);
  dnormed += project_parts_backward(layer.v, tr.normed, dv, grad.v);
  LayerNormParams* ln_grad = nullptr;
  if constexpr (GradTraits<Lin>::trains_all) ln_grad = &grad.ln1;
  Matrix dx = layer_norm_backward(tr.ln, layer.ln1.gain, dnormed, ln_grad);
  dx += dout;
  return dx;
}

}  // namespace detail

/// Accumulating reverse pass: adds this sample's gradients into `grads` and
/// returns dL/dtokens. For SVD layers only dL/ds is produced (mask applied).
template <class Lin>
Matrix encoder_backward_into(const Encoder<Lin>& enc, const ForwardTrace& trace,
                             std::span<const double> grad_pooled, Encoder<GradOf<Lin>>& grads) {
  const auto& cfg = enc.config;
  if (trace.epoch != enc.epoch || trace.attn.size() != enc.layers.size() ||
      trace.embed_dim != cfg.embed_dim) {
    throw UsageError("encoder_backward: stale or mismatched trace (trace epoch " +
                     std::to_string(trace.epoch) + ", encoder epoch " + std::to_string(enc.epoch) + ")");
  }
  if (grad_pooled.size() != cfg.embed_dim) throw ShapeError("encoder_backward: grad_pooled length");
  if (grads.layers.size() != enc.layers.size()) throw ShapeError("encoder_backward: gradient set shape");

  LayerNormParams* ln_grad = nullptr;
  if constexpr (GradTraits<Lin>::trains_all) ln_grad = &grads.ln_final;
  const Matrix drow = layer_norm_backward(trace.final_ln, enc.ln_final.gain, Matrix::row_vector(grad_pooled), ln_grad);
  Matrix dx(trace.num_tokens, cfg.embed_dim);
  std::copy(drow.data().begin(), drow.data().end(), dx.row(0).begin());
  for (std::size_t l = enc.layers.size(); l-- > 0;) {
    dx = detail::mlp_backward(enc.layers[l], cfg, trace.mlp[l], dx, grads.layers[l]);
    dx = detail::mhsa_backward(enc.layers[l], cfg, trace.attn[l], dx, grads.layers[l]);
  }
  return dx;
}

template <class Lin>
EncoderGradients<Lin> encoder_backward(const Encoder<Lin>& enc, const ForwardTrace& trace,
                                       std::span<const double> grad_pooled) {
  EncoderGradients<Lin> out{zero_grads(enc), {}};
  out.d_tokens = encoder_backward_into(enc, trace, grad_pooled, out.params);
  return out;
}

// ---------------------------------------------------------------------------
// Trainable-parameter accounting
// ---------------------------------------------------------------------------

struct MatrixShape {
  std::size_t rows = 0;
  std::size_t cols = 0;
};

/// Shapes of every decomposed matrix in one encoder, in canonical order.
inline std::vector<MatrixShape> decomposed_shapes(const EncoderConfig& cfg) {
  std::vector<MatrixShape> shapes;
  const std::size_t d = cfg.embed_dim;
  const std::size_t parts = cfg.qkv_parts();
  const std::size_t part_cols = d / parts;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    for (int qkv = 0; qkv < 3; ++qkv)
      for (std::size_t p = 0; p < parts; ++p) shapes.push_back({d, part_cols});
    shapes.push_back({d, d});
    shapes.push_back({d, cfg.mlp_dim});
    shapes.push_back({cfg.mlp_dim, d});
  }
  return shapes;
}

/// Number of trainable singular values over all decomposed matrices.
inline std::size_t count_trainable(std::span<const EncoderConfig> encoders, const RankMaskSpec& mask = {}) {
  std::size_t total = 0;
  for (const auto& cfg : encoders) {
    cfg.validate();
    for (const auto& s : decomposed_shapes(cfg)) total += mask.resolve(std::min(s.rows, s.cols));
  }
  return total;
}

template <class Enc>
std::size_t count_trainable(const Enc& enc) {
  std::size_t total = 0;
  for_each_linear(enc, "", [&](const std::string&, const auto& lin) { total += lin.trainable_count(); });
  return total;
}

}  // namespace clipsvd
