// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "clipsvd/encoder.hpp"
#include "clipsvd/errors.hpp"
#include "clipsvd/linalg.hpp"
#include "clipsvd/model.hpp"
#include "clipsvd/optim.hpp"
#include "clipsvd/rng.hpp"
#include "clipsvd/synth_data.hpp"

namespace clipsvd {

// ---------------------------------------------------------------------------
// Contrastive pretraining
// ---------------------------------------------------------------------------

/// Symmetric InfoNCE over in-batch pairs: row i of `images` matches row i of
/// `texts`. Logits are scale·images·textsᵀ. Gradients are written when the
/// output pointers are non-null.
inline double info_nce_loss(const Matrix& images, const Matrix& texts, double scale, Matrix* d_images = nullptr,
                            Matrix* d_texts = nullptr, double* d_scale = nullptr) {
  require_same_shape(images, texts, "info_nce_loss");
  const std::size_t b = images.rows();
  if (b == 0) throw InputError("info_nce_loss: empty batch");
  const Matrix sims = matmul_nt(images, texts);
  Matrix logits = scale * sims;
  Matrix row_p = logits;
  Matrix col_p = transpose(logits);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double row_peak = *std::max_element(row_p.row(i).begin(), row_p.row(i).end());
    const double col_peak = *std::max_element(col_p.row(i).begin(), col_p.row(i).end());
    double row_sum = 0.0;
    double col_sum = 0.0;
    for (std::size_t j = 0; j < b; ++j) {
      row_sum += std::exp(row_p(i, j) - row_peak);
      col_sum += std::exp(col_p(i, j) - col_peak);
    }
    loss += (row_peak + std::log(row_sum) - logits(i, i)) + (col_peak + std::log(col_sum) - logits(i, i));
    softmax_inplace(row_p.row(i));
    softmax_inplace(col_p.row(i));
  }
  loss /= 2.0 * static_cast<double>(b);

  // dL/dlogits = (softmax_rows - I + (softmax_cols - I)ᵀ) / 2b
  Matrix dlogits(b, b);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      const double eye = i == j ? 1.0 : 0.0;
      dlogits(i, j) = ((row_p(i, j) - eye) + (col_p(j, i) - eye)) / (2.0 * static_cast<double>(b));
    }
  }
  if (d_images != nullptr) *d_images = scale * matmul(dlogits, texts);
  if (d_texts != nullptr) *d_texts = scale * matmul_tn(dlogits, images);
  if (d_scale != nullptr) {
    double g = 0.0;
    for (std::size_t i = 0; i < dlogits.size(); ++i) g += dlogits.data()[i] * sims.data()[i];
    *d_scale = g;
  }
  return loss;
}

struct PretrainOptions {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double lr = 3e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  double max_logit_scale = 4.605170185988092;  // ln 100
};

struct PretrainReport {
  Vector epoch_losses;
};

/// Forward + backward of one contrastive batch; returns the loss and adds
/// gradients into `grads`.
inline double contrastive_batch(const DenseModel& model, const std::vector<PairedSample>& pairs,
                                std::span<const std::size_t> batch, DenseModel& grads) {
  const std::size_t b = batch.size();
  const std::size_t dim = model.config.embed_dim;
  std::vector<EmbeddingTrace> itr(b), ttr(b);
  Matrix images(b, dim), texts(b, dim);
  for (std::size_t i = 0; i < b; ++i) {
    const auto& s = pairs[batch[i]];
    const Vector ie = encode_image(model, s.patches, &itr[i]);
    const Vector te = encode_text(model, s.text, &ttr[i]);
    std::copy(ie.begin(), ie.end(), images.row(i).begin());
    std::copy(te.begin(), te.end(), texts.row(i).begin());
  }
  const double scale = std::exp(model.logit_scale);
  Matrix d_images, d_texts;
  double d_scale = 0.0;
  const double loss = info_nce_loss(images, texts, scale, &d_images, &d_texts, &d_scale);
  for (std::size_t i = 0; i < b; ++i) {
    embedding_backward(model, itr[i], d_images.row(i), grads);
    embedding_backward(model, ttr[i], d_texts.row(i), grads);
  }
  grads.logit_scale += d_scale * scale;
  return loss;
}

/// Trains every parameter of a dense model with symmetric InfoNCE. This is the
/// run that manufactures the "pretrained" checkpoint.
inline PretrainReport contrastive_pretrain(DenseModel& model, const std::vector<PairedSample>& pairs,
                                           const PretrainOptions& opts) {
  if (pairs.empty()) throw InputError("contrastive_pretrain: empty dataset");
  if (opts.batch_size == 0) throw ConfigError("contrastive_pretrain: batch_size must be >= 1");
  AdamWState state({opts.lr, 0.9, 0.999, 1e-8, opts.weight_decay});
  Rng rng(opts.seed);
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  PretrainReport report;
  auto params = dense_param_views(model);
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    rng.shuffle(order);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      const std::span<const std::size_t> batch(order.data() + start, end - start);
      DenseModel grads = zero_grads(model);
      total += contrastive_batch(model, pairs, batch, grads);
      ++batches;
      const auto gviews = dense_param_views(grads);
      state.advance();
      for (std::size_t p = 0; p < params.views.size(); ++p) {
        adamw_step(state, p, params.views[p], gviews.views[p]);
      }
      model.logit_scale = std::min(model.logit_scale, opts.max_logit_scale);
      ++model.vision.epoch;
      ++model.text.epoch;
    }
    const double mean = total / static_cast<double>(batches);
    if (!std::isfinite(mean)) throw NumericError("contrastive_pretrain: loss diverged", mean);
    report.epoch_losses.push_back(mean);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Few-shot adaptation
// ---------------------------------------------------------------------------

struct FewShotTask {
  std::size_t shots = 0;
  std::vector<std::size_t> classes;  // dataset labels, in local index order
  std::vector<std::size_t> support;  // sample ids
  std::vector<std::size_t> test;     // sample ids
  std::uint64_t seed = 0;

  std::size_t local_label(std::size_t label) const {
    const auto it = std::find(classes.begin(), classes.end(), label);
    if (it == classes.end()) throw InputError("few-shot task: label " + std::to_string(label) + " not in task");
    return static_cast<std::size_t>(it - classes.begin());
  }
};

/// K support samples per class drawn uniformly without replacement from each
/// class's train partition; the query set is the classes' test partition.
inline FewShotTask sample_few_shot(const DataSplit& split, const std::vector<std::size_t>& classes, std::size_t shots,
                                   std::uint64_t seed) {
  if (shots == 0) throw ConfigError("sample_few_shot: shots must be >= 1");
  if (classes.empty()) throw ConfigError("sample_few_shot: no classes");
  FewShotTask task;
  task.shots = shots;
  task.classes = classes;
  task.seed = seed;
  Rng rng(seed);
  for (std::size_t c : classes) {
    if (c >= split.train.size()) throw ConfigError("sample_few_shot: class out of range");
    const auto& pool = split.train[c];
    if (pool.size() < shots) {
      throw ConfigError("sample_few_shot: class " + std::to_string(c) + " has " + std::to_string(pool.size()) +
                        " train samples, need " + std::to_string(shots));
    }
    for (std::size_t i : rng.sample_without_replacement(pool.size(), shots)) task.support.push_back(pool[i]);
    task.test.insert(task.test.end(), split.test[c].begin(), split.test[c].end());
  }
  return task;
}

struct AdaptOptions {
  AdamWParams optimizer{5e-4, 0.9, 0.999, 1e-8, 0.01};
  /// 0 means 200·K·iteration_scale.
  std::size_t iterations = 0;
  double iteration_scale = 1.0;
  std::size_t batch_size = 32;
  RankMaskSpec mask{};
  std::uint64_t seed = 0;

  std::size_t resolved_iterations(std::size_t shots) const {
    if (iterations > 0) return iterations;
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(200.0 * static_cast<double>(shots) * iteration_scale)));
  }
};

/// Per decomposed matrix: singular values before and after adaptation.
struct AdaptationRecord {
  struct Entry {
    std::string name;
    Vector s_initial;
    Vector s_final;
    std::vector<bool> mask;
  };
  std::vector<Entry> layers;
  Vector losses;                                   // per-iteration batch loss
  std::vector<std::vector<std::size_t>> batches;  // dataset labels seen per iteration

  const Entry* find(const std::string& name) const {
    for (const auto& e : layers)
      if (e.name == name) return &e;
    return nullptr;
  }
};

/// Applies `spec` to every decomposed matrix. Coordinates that become frozen
/// must still hold their decomposition-time value.
inline void apply_mask(SvdModel& model, const RankMaskSpec& spec) {
  auto apply = [&](const std::string& name, SvdLinear& lin) {
    lin.mask = spec.build(lin.rank());
    for (std::size_t j = 0; j < lin.rank(); ++j) {
      if (!lin.mask[j] && lin.s_current[j] != lin.s_initial[j]) {
        throw UsageError("apply_mask: " + name + " has a modified singular value outside the new mask");
      }
    }
  };
  for_each_linear(model.vision, "vision.", apply);
  for_each_linear(model.text, "text.", apply);
}

/// Every field except s_current matches: the singular-value-only invariant.
inline bool frozen_parts_equal(const SvdModel& a, const SvdModel& b) {
  SvdModel probe = a;
  std::vector<const Vector*> currents;
  for_each_linear(b.vision, "", [&](const std::string&, const SvdLinear& l) { currents.push_back(&l.s_current); });
  for_each_linear(b.text, "", [&](const std::string&, const SvdLinear& l) { currents.push_back(&l.s_current); });
  std::size_t i = 0;
  bool shape_ok = true;
  auto copy_current = [&](const std::string&, SvdLinear& l) {
    if (i >= currents.size() || currents[i]->size() != l.s_current.size()) {
      shape_ok = false;
      return;
    }
    l.s_current = *currents[i++];
  };
  for_each_linear(probe.vision, "", copy_current);
  for_each_linear(probe.text, "", copy_current);
  if (!shape_ok || i != currents.size()) return false;
  probe.vision.epoch = b.vision.epoch;
  probe.text.epoch = b.text.epoch;
  return probe == b;
}

inline std::vector<std::vector<std::size_t>> class_prototype_texts(const Dataset& ds,
                                                                    const std::vector<std::size_t>& classes) {
  std::vector<std::vector<std::size_t>> texts;
  for (std::size_t c : classes) texts.push_back(ds.class_texts.at(c));
  return texts;
}

/// Cross-entropy over temperature-scaled class similarities for one batch of
/// images against fixed class prompts. Adds dL/ds into `grads`.
inline double few_shot_batch(const SvdModel& model, const Dataset& ds, const FewShotTask& task,
                             const std::vector<std::vector<std::size_t>>& class_texts,
                             std::span<const std::size_t> batch, SingularGradients& grads) {
  const std::size_t n_classes = class_texts.size();
  const std::size_t dim = model.config.embed_dim;
  std::vector<EmbeddingTrace> ttr(n_classes);
  Matrix class_embs(n_classes, dim);
  for (std::size_t c = 0; c < n_classes; ++c) {
    const Vector e = encode_text(model, class_texts[c], &ttr[c]);
    std::copy(e.begin(), e.end(), class_embs.row(c).begin());
  }
  const double scale = std::exp(model.logit_scale);
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  Matrix d_class(n_classes, dim);
  double loss = 0.0;
  for (std::size_t id : batch) {
    const auto& sample = ds.samples.at(id);
    const std::size_t y = task.local_label(sample.label);
    EmbeddingTrace itr;
    const Vector img = encode_image(model, sample.patches, &itr);
    Vector logits(n_classes);
    for (std::size_t c = 0; c < n_classes; ++c) logits[c] = scale * dot(img, class_embs.row(c));
    const double peak = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - peak);
    loss += (peak + std::log(z) - logits[y]) * inv_b;
    Vector p = logits;
    softmax_inplace(p);
    Vector d_img(dim, 0.0);
    for (std::size_t c = 0; c < n_classes; ++c) {
      const double dl = (p[c] - (c == y ? 1.0 : 0.0)) * inv_b;
      const auto t = class_embs.row(c);
      for (std::size_t j = 0; j < dim; ++j) {
        d_img[j] += scale * dl * t[j];
        d_class(c, j) += scale * dl * img[j];
      }
    }
    embedding_backward(model, itr, d_img, grads);
  }
  for (std::size_t c = 0; c < n_classes; ++c) embedding_backward(model, ttr[c], d_class.row(c), grads);
  return loss;
}

/// Singular-value-only few-shot adaptation with AdamW. Returns the adapted
/// model and the before/after spectra of every decomposed matrix.
inline std::pair<SvdModel, AdaptationRecord> adapt_few_shot(const SvdModel& pretrained, const Dataset& ds,
                                                            const FewShotTask& task, const AdaptOptions& opts) {
  if (task.support.empty()) throw ConfigError("adapt_few_shot: empty support set");
  if (opts.batch_size == 0) throw ConfigError("adapt_few_shot: batch_size must be >= 1");
  SvdModel model = pretrained;
  apply_mask(model, opts.mask);
  if (count_trainable(model.vision) + count_trainable(model.text) == 0) {
    throw ConfigError("adapt_few_shot: mask leaves no trainable singular values");
  }
  const auto class_texts = class_prototype_texts(ds, task.classes);
  AdamWState state(opts.optimizer);
  AdaptationRecord record;
  Rng rng(opts.seed);
  std::vector<std::size_t> order = task.support;
  std::size_t cursor = order.size();
  const bool full_batch = opts.batch_size >= order.size();
  const std::size_t iterations = opts.resolved_iterations(task.shots);

  for (std::size_t it = 0; it < iterations; ++it) {
    std::vector<std::size_t> batch;
    if (full_batch) {
      batch = task.support;
    } else {
      while (batch.size() < opts.batch_size) {
        if (cursor == order.size()) {
          rng.shuffle(order);
          cursor = 0;
        }
        batch.push_back(order[cursor++]);
      }
    }
    std::vector<std::size_t> labels;
    for (std::size_t id : batch) labels.push_back(ds.samples.at(id).label);
    record.batches.push_back(std::move(labels));

    SingularGradients grads = zero_grads(model);
    record.losses.push_back(few_shot_batch(model, ds, task, class_texts, batch, grads));
    state.advance();
    std::size_t slot = 0;
    auto step = [&](Encoder<SvdLinear>& enc, Encoder<Vector>& g) {
      std::vector<Vector*> gs;
      for_each_linear(g, "", [&](const std::string&, Vector& v) { gs.push_back(&v); });
      std::size_t i = 0;
      for_each_linear(enc, "", [&](const std::string&, SvdLinear& lin) {
        adamw_step(state, slot++, lin.s_current, *gs[i++], &lin.mask);
      });
      ++enc.epoch;
    };
    step(model.vision, grads.vision);
    step(model.text, grads.text);
  }

  auto collect = [&](const Encoder<SvdLinear>& enc, const std::string& prefix) {
    for_each_linear(enc, prefix, [&](const std::string& name, const SvdLinear& lin) {
      record.layers.push_back({name, lin.s_initial, lin.s_current, lin.mask});
    });
  };
  collect(model.vision, "vision.");
  collect(model.text, "text.");

  SvdModel masked_pretrained = pretrained;
  apply_mask(masked_pretrained, opts.mask);
  if (!frozen_parts_equal(masked_pretrained, model)) {
    throw NumericError("adapt_few_shot: a frozen parameter changed", 0.0);
  }
  return {std::move(model), std::move(record)};
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Predicted dataset label for each sample id.
template <class Lin>
std::vector<std::size_t> predict_samples(const DualEncoderModel<Lin>& model, const Dataset& ds,
                                         std::span<const std::size_t> ids, const std::vector<std::size_t>& classes) {
  const EmbeddingBatch class_embs = encode_texts(model, class_prototype_texts(ds, classes));
  std::vector<std::size_t> out;
  out.reserve(ids.size());
  for (std::size_t id : ids) {
    const Vector img = encode_image(model, ds.samples.at(id).patches);
    out.push_back(classes[predict(img, class_embs, model.tau())]);
  }
  return out;
}

/// Fraction of samples whose predicted class (among `classes`) equals the label.
template <class Lin>
double evaluate(const DualEncoderModel<Lin>& model, const Dataset& ds, std::span<const std::size_t> ids,
                const std::vector<std::size_t>& classes) {
  if (ids.empty()) throw InputError("evaluate: empty slice");
  const auto preds = predict_samples(model, ds, ids, classes);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) correct += preds[i] == ds.samples[ids[i]].label ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(ids.size());
}

inline double accuracy(std::span<const std::size_t> predictions, std::span<const std::size_t> labels) {
  if (predictions.empty() || predictions.size() != labels.size()) throw InputError("accuracy: empty or mismatched slice");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

/// 2ab/(a+b).
inline double harmonic_mean(double base_acc, double novel_acc) {
  if (base_acc < 0.0 || novel_acc < 0.0 || base_acc > 100.0 || novel_acc > 100.0) {
    throw InputError("harmonic_mean: accuracies must lie in [0, 100]");
  }
  if (base_acc + novel_acc == 0.0) throw InputError("harmonic_mean: both accuracies are zero");
  return 2.0 * base_acc * novel_acc / (base_acc + novel_acc);
}

struct BaseNovelResult {
  double zero_shot_base = 0.0;
  double zero_shot_novel = 0.0;
  double base_acc = 0.0;
  double novel_acc = 0.0;
  double hm = 0.0;
  AdaptationRecord record;
};

/// Adapts on base-class support only, then scores base and novel test sets,
/// each against its own class set.
inline BaseNovelResult run_base_to_novel(const SvdModel& model, const Dataset& ds, const DataSplit& split,
                                         std::size_t shots, const AdaptOptions& opts, std::uint64_t task_seed) {
  split.classes.validate(ds.num_classes());
  const FewShotTask task = sample_few_shot(split, split.classes.base, shots, task_seed);
  std::vector<std::size_t> novel_test;
  for (std::size_t c : split.classes.novel) novel_test.insert(novel_test.end(), split.test[c].begin(), split.test[c].end());

  BaseNovelResult r;
  r.zero_shot_base = evaluate(model, ds, task.test, split.classes.base);
  r.zero_shot_novel = evaluate(model, ds, novel_test, split.classes.novel);
  auto [adapted, record] = adapt_few_shot(model, ds, task, opts);
  r.base_acc = evaluate(adapted, ds, task.test, split.classes.base);
  r.novel_acc = evaluate(adapted, ds, novel_test, split.classes.novel);
  r.hm = r.base_acc + r.novel_acc > 0.0 ? harmonic_mean(100.0 * r.base_acc, 100.0 * r.novel_acc) / 100.0 : 0.0;
  r.record = std::move(record);
  return r;
}

}  // namespace clipsvd
