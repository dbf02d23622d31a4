// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "clipsvd/errors.hpp"
#include "clipsvd/rng.hpp"

namespace clipsvd {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, Vector data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) + " != " +
                       std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& row : rows) {
      if (row.size() != cols_) throw ShapeError("ragged matrix initializer");
      data_.insert(data_.end(), row.begin(), row.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix diagonal(std::span<const double> values) {
    Matrix m(values.size(), values.size());
    for (std::size_t i = 0; i < values.size(); ++i) m(i, i) = values[i];
    return m;
  }

  static Matrix row_vector(std::span<const double> values) {
    return Matrix(1, values.size(), Vector(values.begin(), values.end()));
  }

  static Matrix random_normal(std::size_t rows, std::size_t cols, Rng& rng, double stddev = 1.0) {
    Matrix m(rows, cols);
    for (auto& x : m.data_) x = rng.normal() * stddev;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const Vector& values() const noexcept { return data_; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  Vector column(std::size_t c) const {
    Vector out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
    return out;
  }

  std::string shape_string() const {
    return "[" + std::to_string(rows_) + "x" + std::to_string(cols_) + "]";
  }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vector data_;
};

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                     b.shape_string());
  }
}

/// Plain product. Each output entry accumulates a(i,k)*b(k,j) for k = 0, 1, ...
/// starting from 0.0, so results match a naive triple loop bit for bit.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + a.shape_string() + " x " + b.shape_string());
  }
  Matrix c(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* out = c.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const double* brow = b.row(k).data();
      for (std::size_t j = 0; j < n; ++j) out[j] += aik * brow[j];
    }
  }
  return c;
}

/// aᵀ·b without materializing the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: " + a.shape_string() + "ᵀ x " + b.shape_string());
  }
  Matrix c(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* brow = b.row(k).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      double* out = c.row(i).data();
      for (std::size_t j = 0; j < b.cols(); ++j) out[j] += aki * brow[j];
    }
  }
  return c;
}

/// a·bᵀ without materializing the transpose.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + a.shape_string() + " x " + b.shape_string() + "ᵀ");
  }
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* arow = a.row(i).data();
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* brow = b.row(j).data();
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += arow[k] * brow[k];
      c(i, j) = s;
    }
  }
  return c;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline Matrix operator+(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] += b.data()[i];
  return c;
}

inline Matrix operator-(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "sub");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] -= b.data()[i];
  return c;
}

inline Matrix operator*(double s, const Matrix& a) {
  Matrix c = a;
  for (auto& x : c.data()) x *= s;
  return c;
}

inline Matrix& operator+=(Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += b.data()[i];
  return a;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  assert(a.size() == b.size());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double frobenius_norm(const Matrix& a) { return norm2(a.data()); }

inline double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double x : a.data()) m = std::max(m, std::abs(x));
  return m;
}

inline bool all_finite(const Matrix& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](double x) { return std::isfinite(x); });
}

/// Columns [first, first + count) as a new matrix.
inline Matrix column_slice(const Matrix& a, std::size_t first, std::size_t count) {
  if (first + count > a.cols()) throw ShapeError("column_slice out of range");
  Matrix out(a.rows(), count);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = a(i, first + j);
  return out;
}

/// Rows [first, first + count) as a new matrix.
inline Matrix row_slice(const Matrix& a, std::size_t first, std::size_t count) {
  if (first + count > a.rows()) throw ShapeError("row_slice out of range");
  Matrix out(count, a.cols());
  std::copy_n(a.row(first).data(), count * a.cols(), out.data().data());
  return out;
}

inline void set_column_slice(Matrix& dst, std::size_t first, const Matrix& src) {
  if (src.rows() != dst.rows() || first + src.cols() > dst.cols())
    throw ShapeError("set_column_slice out of range");
  for (std::size_t i = 0; i < src.rows(); ++i)
    for (std::size_t j = 0; j < src.cols(); ++j) dst(i, first + j) = src(i, j);
}

// ---------------------------------------------------------------------------
// Row-wise neural-net primitives
// ---------------------------------------------------------------------------

inline void softmax_inplace(std::span<double> row) {
  if (row.empty()) return;
  const double peak = *std::max_element(row.begin(), row.end());
  double total = 0.0;
  for (auto& x : row) {
    x = std::exp(x - peak);
    total += x;
  }
  for (auto& x : row) x /= total;
}

/// Per-row softmax with max subtraction.
inline Matrix softmax_rows(const Matrix& x) {
  Matrix out = x;
  for (std::size_t i = 0; i < out.rows(); ++i) softmax_inplace(out.row(i));
  return out;
}

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormParams {
  Vector gain;
  Vector bias;

  static LayerNormParams identity(std::size_t dim) { return {Vector(dim, 1.0), Vector(dim, 0.0)}; }
  bool operator==(const LayerNormParams&) const = default;
};

/// Normalized rows and inverse standard deviations, kept for the reverse pass.
struct LayerNormCache {
  Matrix normalized;
  Vector inv_std;
};

inline Matrix layer_norm(const Matrix& x, std::span<const double> gain, std::span<const double> bias,
                         double eps, LayerNormCache* cache = nullptr) {
  if (gain.size() != x.cols() || bias.size() != x.cols()) {
    throw ShapeError("layer_norm: gain/bias length " + std::to_string(gain.size()) + "/" +
                     std::to_string(bias.size()) + " vs cols " + std::to_string(x.cols()));
  }
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  const auto n = static_cast<double>(x.cols());
  Matrix out(x.rows(), x.cols());
  Matrix normalized(x.rows(), x.cols());
  Vector inv_std(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto row = x.row(i);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= n;
    const double rstd = 1.0 / std::sqrt(var + eps);
    inv_std[i] = rstd;
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const double xhat = (row[j] - mean) * rstd;
      normalized(i, j) = xhat;
      out(i, j) = xhat * gain[j] + bias[j];
    }
  }
  if (cache != nullptr) *cache = {std::move(normalized), std::move(inv_std)};
  return out;
}

inline Matrix layer_norm(const Matrix& x, const LayerNormParams& p, LayerNormCache* cache = nullptr) {
  return layer_norm(x, p.gain, p.bias, kLayerNormEps, cache);
}

/// Reverse pass of layer_norm. Parameter gradients are accumulated only when
/// `param_grad` is non-null.
inline Matrix layer_norm_backward(const LayerNormCache& cache, std::span<const double> gain,
                                  const Matrix& dy, LayerNormParams* param_grad = nullptr) {
  const Matrix& xhat = cache.normalized;
  require_same_shape(xhat, dy, "layer_norm_backward");
  const std::size_t n = dy.cols();
  Matrix dx(dy.rows(), n);
  Vector dxhat(n);
  for (std::size_t i = 0; i < dy.rows(); ++i) {
    double mean_d = 0.0;
    double mean_dx = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      dxhat[j] = dy(i, j) * gain[j];
      mean_d += dxhat[j];
      mean_dx += dxhat[j] * xhat(i, j);
    }
    mean_d /= static_cast<double>(n);
    mean_dx /= static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j) {
      dx(i, j) = cache.inv_std[i] * (dxhat[j] - mean_d - xhat(i, j) * mean_dx);
    }
    if (param_grad != nullptr) {
      for (std::size_t j = 0; j < n; ++j) {
        param_grad->gain[j] += dy(i, j) * xhat(i, j);
        param_grad->bias[j] += dy(i, j);
      }
    }
  }
  return dx;
}

inline Vector l2_normalize(std::span<const double> v, double* norm_out = nullptr) {
  const double n = norm2(v);
  if (norm_out != nullptr) *norm_out = n;
  if (!(n > 0.0)) throw NumericError("l2_normalize: zero vector", 0.0);
  Vector out(v.begin(), v.end());
  for (auto& x : out) x /= n;
  return out;
}

// ---------------------------------------------------------------------------
// Singular value decomposition
// ---------------------------------------------------------------------------

/// Thin SVD W = u·diag(s)·vᵀ of a source_rows x source_cols matrix.
struct SvdFactors {
  Matrix u;  // source_rows x r, orthonormal columns
  Vector s;  // r values, descending
  Matrix v;  // source_cols x r, orthonormal columns
  std::size_t source_rows = 0;
  std::size_t source_cols = 0;

  std::size_t rank() const noexcept { return s.size(); }
  bool operator==(const SvdFactors&) const = default;
};

struct SvdOptions {
  int max_sweeps = 60;
  /// A column pair is rotated while |a_pᵀa_q| > tolerance·‖a_p‖·‖a_q‖.
  double tolerance = 1e-12;
};

namespace detail {

/// One-sided Jacobi on the columns of a tall (rows >= cols) matrix.
/// Returns unsorted column-major work columns and the accumulated rotation.
inline void jacobi_orthogonalize(std::vector<Vector>& cols, std::vector<Vector>& rot,
                                 const SvdOptions& opts) {
  const std::size_t m = cols.size();
  double worst = 0.0;
  for (int sweep = 0; sweep < opts.max_sweeps; ++sweep) {
    bool rotated = false;
    worst = 0.0;
    for (std::size_t p = 0; p + 1 < m; ++p) {
      for (std::size_t q = p + 1; q < m; ++q) {
        Vector& ap = cols[p];
        Vector& aq = cols[q];
        const double alpha = dot(ap, ap);
        const double beta = dot(aq, aq);
        const double gamma = dot(ap, aq);
        if (gamma == 0.0) continue;
        const double scale = std::sqrt(alpha) * std::sqrt(beta);
        const double rel = std::abs(gamma) / scale;
        if (!(rel > opts.tolerance)) continue;
        worst = std::max(worst, rel);
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < ap.size(); ++i) {
          const double x = ap[i];
          const double y = aq[i];
          ap[i] = c * x - s * y;
          aq[i] = s * x + c * y;
        }
        Vector& vp = rot[p];
        Vector& vq = rot[q];
        for (std::size_t i = 0; i < vp.size(); ++i) {
          const double x = vp[i];
          const double y = vq[i];
          vp[i] = c * x - s * y;
          vq[i] = s * x + c * y;
        }
      }
    }
    if (!rotated) return;
  }
  throw NumericError("svd: one-sided Jacobi did not converge in " +
                         std::to_string(opts.max_sweeps) + " sweeps",
                     worst);
}

/// Extends `basis` (orthonormal columns, possibly fewer than needed) with
/// unit vectors orthogonal to everything already present.
inline Vector complete_basis_vector(const std::vector<Vector>& basis, std::size_t dim) {
  for (std::size_t e = 0; e < dim; ++e) {
    Vector w(dim, 0.0);
    w[e] = 1.0;
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& b : basis) {
        const double proj = dot(b, w);
        for (std::size_t i = 0; i < dim; ++i) w[i] -= proj * b[i];
      }
    }
    const double n = norm2(w);
    if (n > 0.5) {
      for (auto& x : w) x /= n;
      return w;
    }
  }
  throw NumericError("svd: could not complete orthonormal basis", 0.0);
}

/// SVD of a matrix with rows >= cols; u is rows x cols.
inline SvdFactors svd_tall(const Matrix& w, const SvdOptions& opts) {
  const std::size_t n = w.rows();
  const std::size_t m = w.cols();
  std::vector<Vector> cols(m, Vector(n));
  std::vector<Vector> rot(m, Vector(m, 0.0));
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t i = 0; i < n; ++i) cols[j][i] = w(i, j);
    rot[j][j] = 1.0;
  }
  jacobi_orthogonalize(cols, rot, opts);

  Vector sigma(m);
  for (std::size_t j = 0; j < m; ++j) sigma[j] = norm2(cols[j]);
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

  SvdFactors f;
  f.source_rows = n;
  f.source_cols = m;
  f.s.resize(m);
  f.u = Matrix(n, m);
  f.v = Matrix(m, m);
  std::vector<Vector> ucols;
  std::vector<std::size_t> null_slots;
  for (std::size_t k = 0; k < m; ++k) {
    const std::size_t j = order[k];
    f.s[k] = sigma[j];
    for (std::size_t i = 0; i < m; ++i) f.v(i, k) = rot[j][i];
    if (sigma[j] > std::numeric_limits<double>::min()) {
      Vector u = cols[j];
      for (auto& x : u) x /= sigma[j];
      for (std::size_t i = 0; i < n; ++i) f.u(i, k) = u[i];
      ucols.push_back(std::move(u));
    } else {
      f.s[k] = 0.0;
      null_slots.push_back(k);
    }
  }
  for (std::size_t k : null_slots) {
    Vector u = complete_basis_vector(ucols, n);
    for (std::size_t i = 0; i < n; ++i) f.u(i, k) = u[i];
    ucols.push_back(std::move(u));
  }
  return f;
}

/// Makes the largest-magnitude entry of each u column positive (first index
/// wins ties), flipping the paired v column.
inline void canonicalize_signs(SvdFactors& f) {
  for (std::size_t k = 0; k < f.rank(); ++k) {
    std::size_t best = 0;
    double best_mag = -1.0;
    for (std::size_t i = 0; i < f.u.rows(); ++i) {
      const double mag = std::abs(f.u(i, k));
      if (mag > best_mag) {
        best_mag = mag;
        best = i;
      }
    }
    if (f.u(best, k) < 0.0) {
      for (std::size_t i = 0; i < f.u.rows(); ++i) f.u(i, k) = -f.u(i, k);
      for (std::size_t i = 0; i < f.v.rows(); ++i) f.v(i, k) = -f.v(i, k);
    }
  }
}

}  // namespace detail

/// Thin SVD by one-sided Jacobi on the taller orientation of `w`.
///
/// Guarantees: r = min(rows, cols); u and v have orthonormal columns; s is
/// non-negative and sorted descending (stable for ties); the largest-magnitude
/// entry of every u column is positive. Throws NumericError carrying the worst
/// remaining relative column correlation if the sweep cap is exhausted.
inline SvdFactors svd(const Matrix& w, const SvdOptions& opts = {}) {
  if (w.rows() == 0 || w.cols() == 0) throw ShapeError("svd: empty matrix " + w.shape_string());
  if (!all_finite(w)) throw NumericError("svd: non-finite input", 0.0);
  SvdFactors f;
  if (w.cols() > w.rows()) {
    SvdFactors t = detail::svd_tall(transpose(w), opts);
    f.u = std::move(t.v);
    f.v = std::move(t.u);
    f.s = std::move(t.s);
    f.source_rows = w.rows();
    f.source_cols = w.cols();
  } else {
    f = detail::svd_tall(w, opts);
  }
  detail::canonicalize_signs(f);
  return f;
}

/// u·diag(s)·vᵀ for an arbitrary singular-value vector.
inline Matrix recompose(const Matrix& u, std::span<const double> s, const Matrix& v) {
  if (u.cols() != s.size() || v.cols() != s.size()) throw ShapeError("recompose: rank mismatch");
  Matrix us = u;
  for (std::size_t i = 0; i < us.rows(); ++i)
    for (std::size_t k = 0; k < s.size(); ++k) us(i, k) *= s[k];
  return matmul_nt(us, v);
}

inline Matrix recompose(const SvdFactors& f) { return recompose(f.u, f.s, f.v); }

/// Orthonormal basis of the column space: u columns whose singular value
/// exceeds rel_cutoff·s_max.
inline Matrix column_space_basis(const Matrix& w, double rel_cutoff = 1e-10) {
  const SvdFactors f = svd(w);
  const double smax = f.s.empty() ? 0.0 : f.s.front();
  std::size_t keep = 0;
  while (keep < f.rank() && f.s[keep] > rel_cutoff * smax) ++keep;
  return column_slice(f.u, 0, keep);
}

/// Random orthogonal n x n matrix (left singular vectors of a Gaussian matrix).
inline Matrix random_orthogonal(std::size_t n, Rng& rng) {
  return svd(Matrix::random_normal(n, n, rng)).u;
}

}  // namespace clipsvd
