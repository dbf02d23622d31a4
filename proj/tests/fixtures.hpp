// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "clipsvd/adapt.hpp"
#include "clipsvd/config.hpp"
#include "clipsvd/model.hpp"
#include "clipsvd/synth_data.hpp"

namespace fixtures {

using namespace clipsvd;

inline ModelConfig toy_config(std::size_t layers, std::size_t dim = 8, std::size_t heads = 2, std::size_t mlp = 16,
                              Activation act = Activation::relu, QkvGranularity qkv = QkvGranularity::per_head) {
  ModelConfig c;
  c.vision = {dim, heads, mlp, layers, act, qkv};
  c.text = {dim, heads, mlp, layers, act, qkv};
  c.embed_dim = 6;
  c.patch_dim = 5;
  c.max_patches = 4;
  c.vocab_size = 10;
  c.max_text_len = 4;
  return c;
}

/// Dense model with every bias and norm parameter moved off its default, so
/// gradient and oracle checks exercise those paths too.
inline DenseModel perturbed_dense(const ModelConfig& cfg, std::uint64_t seed) {
  DenseModel m = init_dense_model(cfg, seed);
  Rng rng(seed ^ 0xB1A5ULL);
  auto views = dense_param_views(m);
  for (std::size_t i = 0; i < views.names.size(); ++i) {
    const std::string& n = views.names[i];
    const bool is_gain = n.find(".gain") != std::string::npos;
    const bool is_bias = n.size() >= 5 && n.compare(n.size() - 5, 5, ".bias") == 0;
    if (!is_gain && !is_bias) continue;
    for (auto& x : views.views[i]) x += 0.1 * rng.normal();
  }
  return m;
}

inline SvdModel toy_svd_model(std::size_t layers, std::uint64_t seed, QkvGranularity qkv = QkvGranularity::per_head,
                              Activation act = Activation::relu) {
  return decompose_model(perturbed_dense(toy_config(layers, 8, 2, 16, act, qkv), seed));
}

inline Matrix random_patches(const ModelConfig& cfg, std::size_t count, Rng& rng) {
  return Matrix::random_normal(count, cfg.patch_dim, rng);
}

inline std::vector<std::size_t> random_ids(const ModelConfig& cfg, std::size_t count, Rng& rng) {
  std::vector<std::size_t> ids(count);
  for (auto& id : ids) id = static_cast<std::size_t>(rng.below(cfg.vocab_size));
  return ids;
}

/// Small dataset shaped for toy_config.
inline Dataset toy_dataset(std::uint64_t seed, std::size_t classes = 3, std::size_t per_class = 4) {
  SyntheticCorpusConfig c;
  c.num_classes = classes;
  c.patches_per_image = 3;
  c.patch_dim = 5;
  c.latent_dim = 4;
  c.text_length = 3;
  c.vocab_size = 10;
  c.samples_per_class = per_class;
  c.seed = seed;
  return generate(c);
}

/// Visits every SvdLinear of both encoders with a stable name.
template <class Fn>
void for_each_svd(SvdModel& m, Fn&& fn) {
  for_each_linear(m.vision, "vision.", fn);
  for_each_linear(m.text, "text.", fn);
}

template <class Fn>
void for_each_svd(const SvdModel& m, Fn&& fn) {
  for_each_linear(m.vision, "vision.", fn);
  for_each_linear(m.text, "text.", fn);
}

/// The default desk setup: pretraining corpus, task corpus and the dense
/// pretrained model, built once per process.
struct Desk {
  RunConfig config;
  Dataset pretrain_data;
  Dataset task_data;
  DenseModel pretrained;
};

inline const Desk& desk() {
  static const Desk d = [] {
    Desk x;
    x.pretrain_data = generate(x.config.pretrain_data);
    x.task_data = generate(x.config.task_data);
    x.pretrained = init_dense_model(x.config.model, x.config.seed);
    contrastive_pretrain(x.pretrained, x.pretrain_data.samples, x.config.pretrain_options());
    return x;
  }();
  return d;
}

inline std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

}  // namespace fixtures
