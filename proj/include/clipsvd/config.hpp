// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "clipsvd/adapt.hpp"
#include "clipsvd/encoder.hpp"
#include "clipsvd/errors.hpp"
#include "clipsvd/model.hpp"
#include "clipsvd/svd_linear.hpp"
#include "clipsvd/synth_data.hpp"

namespace clipsvd {

using Json = nlohmann::json;

namespace detail {

/// Strict reader over one JSON object: typed lookups with defaults, and a
/// final check that no unknown key was present.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw SchemaError(path_ + ": expected an object");
  }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    check_type<T>(*it, path_ + "." + key);
    out = it->template get<T>();
  }

  const Json* child(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string path(const std::string& key) const { return path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.contains(it.key())) throw SchemaError(path_ + ": unknown key '" + it.key() + "'");
    }
  }

 private:
  template <class T>
  static void check_type(const Json& v, const std::string& where) {
    bool ok = false;
    if constexpr (std::is_same_v<T, bool>) {
      ok = v.is_boolean();
    } else if constexpr (std::is_integral_v<T>) {
      ok = std::is_signed_v<T> ? v.is_number_integer() : v.is_number_unsigned();
    } else if constexpr (std::is_floating_point_v<T>) {
      ok = v.is_number();
    } else if constexpr (std::is_same_v<T, std::string>) {
      ok = v.is_string();
    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
      ok = v.is_array() && std::all_of(v.begin(), v.end(), [](const Json& e) { return e.is_number(); });
    } else if constexpr (std::is_same_v<T, std::vector<std::uint64_t>>) {
      ok = v.is_array() && std::all_of(v.begin(), v.end(), [](const Json& e) { return e.is_number_unsigned(); });
    } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
      ok = v.is_array() && std::all_of(v.begin(), v.end(), [](const Json& e) { return e.is_string(); });
    } else {
      static_assert(sizeof(T) == 0, "unsupported schema type");
    }
    if (!ok) throw SchemaError(where + ": wrong type (" + std::string(v.type_name()) + ")");
  }

  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Component configs <-> JSON
// ---------------------------------------------------------------------------

inline Json to_json(const EncoderConfig& c) {
  return {{"embed_dim", c.embed_dim},
          {"num_heads", c.num_heads},
          {"mlp_dim", c.mlp_dim},
          {"num_layers", c.num_layers},
          {"activation", c.activation == Activation::relu ? "relu" : "gelu"},
          {"qkv", c.qkv == QkvGranularity::per_head ? "per_head" : "full"}};
}

inline EncoderConfig encoder_config_from_json(const Json& j, const std::string& path, EncoderConfig c = {}) {
  detail::ObjectReader r(j, path);
  r.get("embed_dim", c.embed_dim);
  r.get("num_heads", c.num_heads);
  r.get("mlp_dim", c.mlp_dim);
  r.get("num_layers", c.num_layers);
  std::string act = c.activation == Activation::relu ? "relu" : "gelu";
  r.get("activation", act);
  if (act == "relu") {
    c.activation = Activation::relu;
  } else if (act == "gelu") {
    c.activation = Activation::gelu;
  } else {
    throw SchemaError(r.path("activation") + ": expected relu or gelu");
  }
  std::string qkv = c.qkv == QkvGranularity::per_head ? "per_head" : "full";
  r.get("qkv", qkv);
  if (qkv == "per_head") {
    c.qkv = QkvGranularity::per_head;
  } else if (qkv == "full") {
    c.qkv = QkvGranularity::full;
  } else {
    throw SchemaError(r.path("qkv") + ": expected per_head or full");
  }
  r.finish();
  return c;
}

inline Json to_json(const ModelConfig& c) {
  return {{"vision", to_json(c.vision)},       {"text", to_json(c.text)},
          {"embed_dim", c.embed_dim},          {"patch_dim", c.patch_dim},
          {"max_patches", c.max_patches},      {"vocab_size", c.vocab_size},
          {"max_text_len", c.max_text_len},    {"tau_init", c.tau_init}};
}

inline ModelConfig model_config_from_json(const Json& j, const std::string& path, ModelConfig c = {}) {
  detail::ObjectReader r(j, path);
  if (const Json* v = r.child("vision")) c.vision = encoder_config_from_json(*v, r.path("vision"), c.vision);
  if (const Json* t = r.child("text")) c.text = encoder_config_from_json(*t, r.path("text"), c.text);
  r.get("embed_dim", c.embed_dim);
  r.get("patch_dim", c.patch_dim);
  r.get("max_patches", c.max_patches);
  r.get("vocab_size", c.vocab_size);
  r.get("max_text_len", c.max_text_len);
  r.get("tau_init", c.tau_init);
  r.finish();
  return c;
}

inline Json to_json(const SyntheticCorpusConfig& c) {
  return {{"num_classes", c.num_classes},   {"patches_per_image", c.patches_per_image},
          {"patch_dim", c.patch_dim},       {"latent_dim", c.latent_dim},
          {"text_length", c.text_length},   {"vocab_size", c.vocab_size},
          {"samples_per_class", c.samples_per_class}, {"max_jitter", c.max_jitter},
          {"noise", c.noise},               {"seed", c.seed},
          {"world_seed", c.world_seed}};
}

inline SyntheticCorpusConfig corpus_config_from_json(const Json& j, const std::string& path,
                                                     SyntheticCorpusConfig c = {}) {
  detail::ObjectReader r(j, path);
  r.get("num_classes", c.num_classes);
  r.get("patches_per_image", c.patches_per_image);
  r.get("patch_dim", c.patch_dim);
  r.get("latent_dim", c.latent_dim);
  r.get("text_length", c.text_length);
  r.get("vocab_size", c.vocab_size);
  r.get("samples_per_class", c.samples_per_class);
  r.get("max_jitter", c.max_jitter);
  r.get("noise", c.noise);
  r.get("seed", c.seed);
  r.get("world_seed", c.world_seed);
  r.finish();
  return c;
}

inline Json to_json(const RankMaskSpec& m) { return {{"mode", to_string(m.mode)}, {"k", m.k}, {"ratio", m.ratio}}; }

inline RankMaskSpec mask_from_json(const Json& j, const std::string& path, RankMaskSpec m = {}) {
  detail::ObjectReader r(j, path);
  std::string mode = to_string(m.mode);
  r.get("mode", mode);
  try {
    m.mode = parse_mask_mode(mode);
  } catch (const ConfigError&) {
    throw SchemaError(r.path("mode") + ": expected all, top_k or bottom_k");
  }
  r.get("k", m.k);
  r.get("ratio", m.ratio);
  r.finish();
  return m;
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct PretrainSettings {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double lr = 3e-3;
  double weight_decay = 0.0;
};

struct AdaptSettings {
  std::size_t shots = 16;
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t iterations = 300;  // 0: 200·shots·iteration_scale
  double iteration_scale = 1.0;
  std::size_t batch_size = 32;
  RankMaskSpec mask{};
  /// "all": adapt and score on every class; "base": adapt on base classes only.
  std::string classes = "all";
};

struct SplitSettings {
  double base_fraction = 0.5;
  double train_fraction = 0.5;
};

struct AblationSettings {
  std::vector<std::string> modes{"top_k", "bottom_k"};
  std::vector<double> ratios{0.125, 0.25, 0.5, 1.0};
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

struct InterpretSettings {
  std::size_t last_layers = 4;
  std::size_t descriptions = 5;
  std::size_t probe_images = 64;
  bool mean_center = true;
};

/// Everything a CLI run needs. Defaults are the desk-scale settings used by
/// the test suite.
struct RunConfig {
  ModelConfig model{
      EncoderConfig{32, 4, 64, 2, Activation::relu, QkvGranularity::per_head},
      EncoderConfig{32, 4, 64, 2, Activation::relu, QkvGranularity::per_head},
      16, 12, 8, 64, 6, 0.07};
  SyntheticCorpusConfig pretrain_data{128, 8, 12, 16, 6, 64, 4, 1, 0.1, 100, 0};
  SyntheticCorpusConfig task_data{8, 8, 12, 16, 6, 64, 40, 1, 0.1, 200, 0};
  PretrainSettings pretrain{};
  AdaptSettings adapt{};
  SplitSettings split{};
  AblationSettings ablation{};
  InterpretSettings interpret{};
  std::uint64_t seed = 1;

  void validate() const {
    model.validate();
    pretrain_data.validate();
    task_data.validate();
    if (adapt.shots == 0) throw ConfigError("adapt.shots must be >= 1");
    if (adapt.classes != "all" && adapt.classes != "base") throw ConfigError("adapt.classes must be all or base");
    if (!(split.base_fraction > 0.0 && split.base_fraction < 1.0)) throw ConfigError("split.base_fraction must be in (0, 1)");
    if (!(split.train_fraction > 0.0 && split.train_fraction < 1.0)) {
      throw ConfigError("split.train_fraction must be in (0, 1)");
    }
    for (const auto& m : ablation.modes) parse_mask_mode(m);
    for (double r : ablation.ratios) {
      if (!(r > 0.0 && r <= 1.0)) throw ConfigError("ablation.ratios must lie in (0, 1]");
    }
    if (interpret.descriptions == 0 || interpret.probe_images == 0) {
      throw ConfigError("interpret.descriptions and interpret.probe_images must be >= 1");
    }
  }

  AdaptOptions adapt_options(std::uint64_t run_seed) const {
    AdaptOptions o;
    o.optimizer = {adapt.lr, adapt.beta1, adapt.beta2, adapt.eps, adapt.weight_decay};
    o.iterations = adapt.iterations;
    o.iteration_scale = adapt.iteration_scale;
    o.batch_size = adapt.batch_size;
    o.mask = adapt.mask;
    o.seed = run_seed;
    return o;
  }

  PretrainOptions pretrain_options() const {
    PretrainOptions o;
    o.epochs = pretrain.epochs;
    o.batch_size = pretrain.batch_size;
    o.lr = pretrain.lr;
    o.weight_decay = pretrain.weight_decay;
    o.seed = seed;
    return o;
  }
};

inline Json to_json(const RunConfig& c) {
  Json j;
  j["model"] = to_json(c.model);
  j["pretrain_data"] = to_json(c.pretrain_data);
  j["task_data"] = to_json(c.task_data);
  j["pretrain"] = {{"epochs", c.pretrain.epochs},
                   {"batch_size", c.pretrain.batch_size},
                   {"lr", c.pretrain.lr},
                   {"weight_decay", c.pretrain.weight_decay}};
  j["adapt"] = {{"shots", c.adapt.shots},
                {"lr", c.adapt.lr},
                {"beta1", c.adapt.beta1},
                {"beta2", c.adapt.beta2},
                {"eps", c.adapt.eps},
                {"weight_decay", c.adapt.weight_decay},
                {"iterations", c.adapt.iterations},
                {"iteration_scale", c.adapt.iteration_scale},
                {"batch_size", c.adapt.batch_size},
                {"mask", to_json(c.adapt.mask)},
                {"classes", c.adapt.classes}};
  j["split"] = {{"base_fraction", c.split.base_fraction}, {"train_fraction", c.split.train_fraction}};
  j["ablation"] = {{"modes", c.ablation.modes}, {"ratios", c.ablation.ratios}, {"seeds", c.ablation.seeds}};
  j["interpret"] = {{"last_layers", c.interpret.last_layers},
                    {"descriptions", c.interpret.descriptions},
                    {"probe_images", c.interpret.probe_images},
                    {"mean_center", c.interpret.mean_center}};
  j["seed"] = c.seed;
  return j;
}

/// Parses a run config, layering the document over the defaults. Unknown keys
/// and mistyped values throw SchemaError; semantic checks throw ConfigError.
inline RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  detail::ObjectReader r(j, "config");
  if (const Json* m = r.child("model")) c.model = model_config_from_json(*m, "config.model", c.model);
  if (const Json* d = r.child("pretrain_data")) {
    c.pretrain_data = corpus_config_from_json(*d, "config.pretrain_data", c.pretrain_data);
  }
  if (const Json* d = r.child("task_data")) c.task_data = corpus_config_from_json(*d, "config.task_data", c.task_data);
  if (const Json* p = r.child("pretrain")) {
    detail::ObjectReader pr(*p, "config.pretrain");
    pr.get("epochs", c.pretrain.epochs);
    pr.get("batch_size", c.pretrain.batch_size);
    pr.get("lr", c.pretrain.lr);
    pr.get("weight_decay", c.pretrain.weight_decay);
    pr.finish();
  }
  if (const Json* a = r.child("adapt")) {
    detail::ObjectReader ar(*a, "config.adapt");
    ar.get("shots", c.adapt.shots);
    ar.get("lr", c.adapt.lr);
    ar.get("beta1", c.adapt.beta1);
    ar.get("beta2", c.adapt.beta2);
    ar.get("eps", c.adapt.eps);
    ar.get("weight_decay", c.adapt.weight_decay);
    ar.get("iterations", c.adapt.iterations);
    ar.get("iteration_scale", c.adapt.iteration_scale);
    ar.get("batch_size", c.adapt.batch_size);
    if (const Json* m = ar.child("mask")) c.adapt.mask = mask_from_json(*m, "config.adapt.mask", c.adapt.mask);
    ar.get("classes", c.adapt.classes);
    ar.finish();
  }
  if (const Json* s = r.child("split")) {
    detail::ObjectReader sr(*s, "config.split");
    sr.get("base_fraction", c.split.base_fraction);
    sr.get("train_fraction", c.split.train_fraction);
    sr.finish();
  }
  if (const Json* a = r.child("ablation")) {
    detail::ObjectReader ar(*a, "config.ablation");
    ar.get("modes", c.ablation.modes);
    ar.get("ratios", c.ablation.ratios);
    ar.get("seeds", c.ablation.seeds);
    ar.finish();
  }
  if (const Json* i = r.child("interpret")) {
    detail::ObjectReader ir(*i, "config.interpret");
    ir.get("last_layers", c.interpret.last_layers);
    ir.get("descriptions", c.interpret.descriptions);
    ir.get("probe_images", c.interpret.probe_images);
    ir.get("mean_center", c.interpret.mean_center);
    ir.finish();
  }
  r.get("seed", c.seed);
  r.finish();
  c.validate();
  return c;
}

}  // namespace clipsvd
