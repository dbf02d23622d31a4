// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "clipsvd/errors.hpp"
#include "clipsvd/linalg.hpp"
#include "clipsvd/rng.hpp"

namespace clipsvd {

/// Synthetic paired corpus. Classes live in a latent space; images are a fixed
/// random linear render of (prototype + noise), texts are a per-class token
/// sequence with a small cyclic shift.
///
/// `world_seed` fixes the render and is shared by corpora that should look
/// like the same domain; `seed` draws the classes, samples and noise.
struct SyntheticCorpusConfig {
  std::size_t num_classes = 8;
  std::size_t patches_per_image = 8;
  std::size_t patch_dim = 12;
  std::size_t latent_dim = 16;
  std::size_t text_length = 6;
  std::size_t vocab_size = 64;
  std::size_t samples_per_class = 40;
  std::size_t max_jitter = 1;
  double noise = 0.1;
  std::uint64_t seed = 1;
  std::uint64_t world_seed = 0;

  void validate() const {
    if (num_classes == 0 || patches_per_image == 0 || patch_dim == 0 || latent_dim == 0 || text_length == 0 ||
        vocab_size == 0 || samples_per_class == 0) {
      throw ConfigError("synthetic corpus: all counts must be >= 1");
    }
    if (!(noise >= 0.0)) throw ConfigError("synthetic corpus: noise must be >= 0");
  }

  bool operator==(const SyntheticCorpusConfig&) const = default;
};

struct PairedSample {
  Matrix patches;                 // patches_per_image x patch_dim
  std::vector<std::size_t> text;  // text_length ids
  std::size_t label = 0;
  Vector latent;                  // prototype + noise, kept for diagnostics

  bool operator==(const PairedSample&) const = default;
};

struct Dataset {
  SyntheticCorpusConfig config;
  std::vector<PairedSample> samples;
  std::vector<std::vector<std::size_t>> class_texts;  // unshifted template per class
  Matrix prototypes;                                  // num_classes x latent_dim

  std::size_t num_classes() const noexcept { return class_texts.size(); }
  bool operator==(const Dataset&) const = default;
};

/// Render matrix latent_dim x (patches·patch_dim), a function of world_seed only.
inline Matrix render_matrix(const SyntheticCorpusConfig& cfg) {
  Rng world(cfg.world_seed ^ 0x5EEDF00DULL);
  return Matrix::random_normal(cfg.latent_dim, cfg.patches_per_image * cfg.patch_dim, world);
}

inline Dataset generate(const SyntheticCorpusConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.config = cfg;
  const Matrix render = render_matrix(cfg);
  Rng rng(cfg.seed);
  Rng class_rng = rng.fork(1);
  Rng sample_rng = rng.fork(2);

  ds.prototypes = Matrix(cfg.num_classes, cfg.latent_dim);
  for (std::size_t c = 0; c < cfg.num_classes; ++c) {
    auto row = ds.prototypes.row(c);
    for (auto& x : row) x = class_rng.normal();
    const double n = norm2(row);
    for (auto& x : row) x /= n;
    std::vector<std::size_t> text(cfg.text_length);
    for (auto& t : text) t = static_cast<std::size_t>(class_rng.below(cfg.vocab_size));
    ds.class_texts.push_back(std::move(text));
  }

  for (std::size_t c = 0; c < cfg.num_classes; ++c) {
    for (std::size_t n = 0; n < cfg.samples_per_class; ++n) {
      PairedSample s;
      s.label = c;
      s.latent.resize(cfg.latent_dim);
      for (std::size_t j = 0; j < cfg.latent_dim; ++j) {
        s.latent[j] = ds.prototypes(c, j) + cfg.noise * sample_rng.normal();
      }
      const Matrix flat = matmul(Matrix::row_vector(s.latent), render);
      s.patches = Matrix(cfg.patches_per_image, cfg.patch_dim, flat.values());
      const auto shift = static_cast<std::size_t>(sample_rng.below(cfg.max_jitter + 1));
      s.text = ds.class_texts[c];
      std::rotate(s.text.begin(), s.text.begin() + static_cast<std::ptrdiff_t>(shift % cfg.text_length),
                  s.text.end());
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

struct BaseNovelSplit {
  std::vector<std::size_t> base;
  std::vector<std::size_t> novel;

  void validate(std::size_t num_classes) const {
    if (base.empty() || novel.empty()) throw ConfigError("base/novel split: both sides must be non-empty");
    std::vector<int> seen(num_classes, 0);
    for (auto c : base) {
      if (c >= num_classes) throw ConfigError("base/novel split: class out of range");
      ++seen[c];
    }
    for (auto c : novel) {
      if (c >= num_classes) throw ConfigError("base/novel split: class out of range");
      ++seen[c];
    }
    if (std::any_of(seen.begin(), seen.end(), [](int n) { return n != 1; })) {
      throw ConfigError("base/novel split: classes must be disjoint and covering");
    }
  }
};

/// Class-level base/novel split plus a sample-level train/test partition
/// within each class (indices into Dataset::samples).
struct DataSplit {
  BaseNovelSplit classes;
  std::vector<std::vector<std::size_t>> train;  // per class
  std::vector<std::vector<std::size_t>> test;   // per class
};

inline DataSplit split(const Dataset& ds, double base_fraction, std::uint64_t seed, double train_fraction = 0.5) {
  if (!(base_fraction > 0.0 && base_fraction < 1.0)) throw ConfigError("split: base_fraction must be in (0, 1)");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("split: train_fraction must be in (0, 1)");
  const std::size_t c = ds.num_classes();
  const auto n_base = static_cast<std::size_t>(std::lround(base_fraction * static_cast<double>(c)));
  if (n_base == 0 || n_base >= c) {
    throw ConfigError("split: base_fraction " + std::to_string(base_fraction) + " leaves an empty side for " +
                      std::to_string(c) + " classes");
  }
  Rng rng(seed);
  std::vector<std::size_t> order(c);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  DataSplit out;
  out.classes.base.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_base));
  out.classes.novel.assign(order.begin() + static_cast<std::ptrdiff_t>(n_base), order.end());
  std::sort(out.classes.base.begin(), out.classes.base.end());
  std::sort(out.classes.novel.begin(), out.classes.novel.end());

  std::vector<std::vector<std::size_t>> by_class(c);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) by_class[ds.samples[i].label].push_back(i);
  out.train.resize(c);
  out.test.resize(c);
  for (std::size_t k = 0; k < c; ++k) {
    auto ids = by_class[k];
    rng.shuffle(ids);
    auto n_train = static_cast<std::size_t>(std::lround(train_fraction * static_cast<double>(ids.size())));
    n_train = std::clamp<std::size_t>(n_train, ids.empty() ? 0 : 1, ids.size());
    out.train[k].assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.test[k].assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
    std::sort(out.train[k].begin(), out.train[k].end());
    std::sort(out.test[k].begin(), out.test[k].end());
  }
  return out;
}

}  // namespace clipsvd
