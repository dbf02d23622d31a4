// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "clipsvd/adapt.hpp"
#include "clipsvd/config.hpp"
#include "clipsvd/corpus.hpp"
#include "clipsvd/errors.hpp"
#include "clipsvd/interpret.hpp"
#include "clipsvd/io.hpp"
#include "clipsvd/synth_data.hpp"

namespace clipsvd {

/// Process exit code for each error kind. 0 is success, 1 an unexpected
/// failure.
inline int exit_code_for(const std::string& kind) {
  if (kind == "usage_error") return 2;
  if (kind == "schema_error") return 3;
  if (kind == "missing_file") return 4;
  if (kind == "checksum_error") return 5;
  if (kind == "format_error") return 6;
  if (kind == "config_error") return 7;
  if (kind == "input_error") return 8;
  if (kind == "shape_error") return 9;
  if (kind == "numeric_error") return 10;
  return 1;
}

/// Defaults, overlaid with the config file if given, then the seed override.
inline RunConfig resolve_config(const std::optional<std::filesystem::path>& path,
                                std::optional<std::uint64_t> seed_override) {
  RunConfig cfg;
  if (path) cfg = run_config_from_json(parse_json_file(*path));
  if (seed_override) cfg.seed = *seed_override;
  cfg.validate();
  return cfg;
}

inline Json results_envelope(const std::string& command, const RunConfig& cfg) {
  return {{"command", command}, {"seed", cfg.seed}, {"config", to_json(cfg)}};
}

inline void write_json(const std::filesystem::path& path, const Json& j) { write_file(path, j.dump(2) + "\n"); }

/// Sample-level split of the task dataset shared by adapt, eval and ablate.
inline DataSplit task_split(const RunConfig& cfg, const Dataset& ds) {
  return split(ds, cfg.split.base_fraction, cfg.seed, cfg.split.train_fraction);
}

inline std::vector<std::size_t> all_classes(const Dataset& ds) {
  std::vector<std::size_t> c(ds.num_classes());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = i;
  return c;
}

inline std::vector<std::size_t> test_ids(const DataSplit& s, const std::vector<std::size_t>& classes) {
  std::vector<std::size_t> ids;
  for (std::size_t c : classes) ids.insert(ids.end(), s.test[c].begin(), s.test[c].end());
  return ids;
}

inline void check_compatible(const ModelConfig& m, const Dataset& ds) {
  if (ds.config.patch_dim != m.patch_dim || ds.config.patches_per_image > m.max_patches ||
      ds.config.vocab_size > m.vocab_size || ds.config.text_length > m.max_text_len) {
    throw ConfigError("dataset shapes do not fit the model (patch_dim, patches, vocab or text length)");
  }
}

// ---------------------------------------------------------------------------

inline Dataset cmd_generate_data(const RunConfig& cfg, const std::string& which, const std::filesystem::path& out) {
  SyntheticCorpusConfig c;
  if (which == "task") {
    c = cfg.task_data;
  } else if (which == "pretrain") {
    c = cfg.pretrain_data;
  } else {
    throw UsageError("generate-data: --which must be task or pretrain");
  }
  Dataset ds = generate(c);
  save_dataset(out, ds);
  return ds;
}

inline DenseModel cmd_pretrain(const RunConfig& cfg, const std::filesystem::path& data,
                               const std::filesystem::path& out, std::ostream& log) {
  const Dataset ds = load_dataset(data);
  check_compatible(cfg.model, ds);
  DenseModel model = init_dense_model(cfg.model, cfg.seed);
  const auto report = contrastive_pretrain(model, ds.samples, cfg.pretrain_options());
  for (std::size_t e = 0; e < report.epoch_losses.size(); ++e) {
    log << "epoch " << e + 1 << " loss " << std::setprecision(6) << report.epoch_losses[e] << "\n";
  }
  save_checkpoint(out, model);
  return model;
}

struct AdaptOutcome {
  SvdModel model;
  AdaptationRecord record;
  FewShotTask task;
};

inline AdaptOutcome cmd_adapt(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                              const std::filesystem::path& data, const std::filesystem::path& out,
                              const std::optional<std::filesystem::path>& record_path, std::ostream& log) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Dataset ds = load_dataset(data);
  check_compatible(ck.config, ds);
  const DataSplit s = task_split(cfg, ds);
  const auto classes = cfg.adapt.classes == "base" ? s.classes.base : all_classes(ds);
  FewShotTask task = sample_few_shot(s, classes, cfg.adapt.shots, cfg.seed);
  auto [model, record] = adapt_few_shot(ck.as_svd(), ds, task, cfg.adapt_options(cfg.seed));
  log << "adapted " << record.losses.size() << " iterations; loss " << std::setprecision(6)
      << (record.losses.empty() ? 0.0 : record.losses.front()) << " -> "
      << (record.losses.empty() ? 0.0 : record.losses.back()) << "\n";
  save_checkpoint(out, model);
  if (record_path) {
    Json j = results_envelope("adapt", cfg);
    j["record"] = to_json(record);
    write_json(*record_path, j);
  }
  return {std::move(model), std::move(record), std::move(task)};
}

/// Accuracy on the held-out split: over all classes, base classes and novel
/// classes (each scored against its own class set), plus their HM.
inline Json cmd_eval(const RunConfig& cfg, const std::filesystem::path& checkpoint, const std::filesystem::path& data,
                     const std::optional<std::filesystem::path>& out) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Dataset ds = load_dataset(data);
  check_compatible(ck.config, ds);
  const SvdModel model = ck.as_svd();
  const DataSplit s = task_split(cfg, ds);
  const auto all = all_classes(ds);
  const double acc_all = evaluate(model, ds, test_ids(s, all), all);
  const double base = evaluate(model, ds, test_ids(s, s.classes.base), s.classes.base);
  const double novel = evaluate(model, ds, test_ids(s, s.classes.novel), s.classes.novel);
  Json j = results_envelope("eval", cfg);
  j["checkpoint"] = checkpoint.string();
  j["dataset"] = data.string();
  j["accuracy"] = acc_all;
  j["base_accuracy"] = base;
  j["novel_accuracy"] = novel;
  j["harmonic_mean"] = base + novel > 0.0 ? harmonic_mean(100.0 * base, 100.0 * novel) / 100.0 : 0.0;
  j["num_test"] = test_ids(s, all).size();
  if (out) write_json(*out, j);
  return j;
}

inline std::vector<HeadReport> cmd_rank_heads(const RunConfig& cfg, const std::filesystem::path& before_path,
                                              const std::filesystem::path& after_path,
                                              const std::optional<std::filesystem::path>& record_path,
                                              const std::optional<std::filesystem::path>& out, std::ostream& log) {
  const Checkpoint after_ck = load_checkpoint(after_path);
  if (!after_ck.is_svd()) throw InputError("rank-heads: the after checkpoint is not a decomposed model");
  const SvdModel after = *after_ck.svd;
  const SvdModel before = load_checkpoint(before_path).as_svd();
  const LayerRange layers = LayerRange::last_n(after.vision.layers.size(), cfg.interpret.last_layers);
  std::vector<HeadReport> reports;
  if (record_path) {
    const Json j = parse_json_file(*record_path);
    reports = rank_heads(record_from_json(j.contains("record") ? j["record"] : j), before, after, layers);
  } else {
    reports = rank_heads(before, after, layers);
  }
  log << "rank  head       score      V        O\n";
  Json rows = Json::array();
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    log << std::setw(4) << i + 1 << "  " << std::left << std::setw(9) << r.label() << std::right << std::fixed
        << std::setprecision(6) << "  " << r.score << "  " << r.v_change << "  " << r.o_change << "\n";
    rows.push_back({{"layer", r.layer}, {"head", r.head}, {"label", r.label()}, {"score", r.score},
                    {"v_change", r.v_change}, {"o_change", r.o_change}});
  }
  log.unsetf(std::ios::floatfield);
  if (out) {
    Json j = results_envelope("rank-heads", cfg);
    j["before"] = before_path.string();
    j["after"] = after_path.string();
    j["heads"] = rows;
    write_json(*out, j);
  }
  return reports;
}

/// Evenly strided probe images from the dataset.
inline std::vector<Matrix> probe_images(const Dataset& ds, std::size_t count) {
  count = std::min(count, ds.samples.size());
  std::vector<Matrix> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(ds.samples[i * ds.samples.size() / count].patches);
  return out;
}

struct TextSpanHead {
  HeadReport head;
  TextSpanResult selection;
  bool degenerate = false;
};

inline std::vector<TextSpanHead> cmd_textspan(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                                              const std::filesystem::path& data, const std::filesystem::path& corpus,
                                              const std::optional<std::filesystem::path>& out, std::ostream& log) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const SvdModel model = ck.as_svd();
  const Dataset ds = load_dataset(data);
  check_compatible(ck.config, ds);
  const auto lines = load_corpus(corpus);
  std::vector<std::vector<std::size_t>> ids;
  for (const auto& l : lines) ids.push_back(corpus_line_ids(l, ck.config.vocab_size, ck.config.max_text_len));
  const CorpusFeatures features = embed_corpus(model, lines, ids);
  const auto probes = probe_images(ds, cfg.interpret.probe_images);
  const std::size_t m = std::min(cfg.interpret.descriptions, lines.size());
  const LayerRange layers = LayerRange::last_n(model.vision.layers.size(), cfg.interpret.last_layers);

  std::vector<TextSpanHead> heads;
  Json rows = Json::array();
  for (std::size_t l = layers.first; l < layers.last; ++l) {
    for (std::size_t h = 0; h < model.vision.config.num_heads; ++h) {
      TextSpanHead th;
      th.head.layer = l;
      th.head.head = h;
      const HeadOutputs outs = collect_head_outputs(model, probes, l, h, cfg.interpret.mean_center);
      try {
        const CorpusProjection proj = project_corpus(outs, features);
        th.selection = textspan_select(outs.joint, proj.projected, m);
        th.head.top_descriptions = th.selection.indices;
      } catch (const NumericError&) {
        th.degenerate = true;
      }
      log << th.head.label() << (th.degenerate ? "  (zero output)" : "") << "\n";
      Json descs = Json::array();
      for (std::size_t k = 0; k < th.selection.indices.size(); ++k) {
        const std::size_t idx = th.selection.indices[k];
        log << "  " << lines[idx] << "\n";
        descs.push_back({{"index", idx}, {"text", lines[idx]}, {"explained", th.selection.explained[k]}});
      }
      rows.push_back({{"layer", l}, {"head", h}, {"label", th.head.label()}, {"degenerate", th.degenerate},
                      {"stopped_early", th.selection.stopped_early},
                      {"explained_ratio", th.selection.explained_ratio()}, {"descriptions", descs}});
      heads.push_back(std::move(th));
    }
  }
  if (out) {
    Json j = results_envelope("textspan", cfg);
    j["checkpoint"] = checkpoint.string();
    j["corpus"] = corpus.string();
    j["heads"] = rows;
    write_json(*out, j);
  }
  return heads;
}

struct AblationRow {
  std::string mode;
  double ratio = 0.0;
  std::uint64_t seed = 0;
  std::size_t trainable = 0;
  double accuracy = 0.0;
  /// Final singular values of every decomposed matrix, for bitwise comparisons.
  std::vector<Vector> s_final;
};

/// Shortest decimal that parses back to the same double.
inline std::string shortest(double x) {
  std::array<char, 32> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), x);
  return std::string(buf.data(), res.ptr);
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "mode,ratio,seed,trainable,accuracy\n";
  for (const auto& r : rows) {
    os << r.mode << "," << shortest(r.ratio) << "," << r.seed << "," << r.trainable << "," << shortest(r.accuracy)
       << "\n";
  }
  return os.str();
}

/// Rank-mask sweep: for each (mode, ratio, seed), adapt on every class and
/// score the held-out split. Rows follow config order.
inline std::vector<AblationRow> cmd_ablate_rank(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                                                const std::filesystem::path& data,
                                                const std::optional<std::filesystem::path>& out, std::ostream& log) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const SvdModel base_model = ck.as_svd();
  const Dataset ds = load_dataset(data);
  check_compatible(ck.config, ds);
  const DataSplit s = task_split(cfg, ds);
  const auto classes = all_classes(ds);
  std::vector<AblationRow> rows;
  for (const auto& mode_name : cfg.ablation.modes) {
    const MaskMode mode = parse_mask_mode(mode_name);
    for (double ratio : cfg.ablation.ratios) {
      for (std::uint64_t seed : cfg.ablation.seeds) {
        AdaptOptions opts = cfg.adapt_options(seed);
        opts.mask = {mode, 0, mode == MaskMode::all ? 0.0 : ratio};
        const FewShotTask task = sample_few_shot(s, classes, cfg.adapt.shots, seed);
        auto [model, record] = adapt_few_shot(base_model, ds, task, opts);
        AblationRow row{mode_name, ratio, seed, count_trainable(model.vision) + count_trainable(model.text),
                        evaluate(model, ds, task.test, classes), {}};
        for (const auto& e : record.layers) row.s_final.push_back(e.s_final);
        log << mode_name << " ratio " << ratio << " seed " << seed << " trainable " << row.trainable << " accuracy "
            << row.accuracy << "\n";
        rows.push_back(std::move(row));
      }
    }
  }
  if (out) write_file(*out, ablation_csv(rows));
  return rows;
}

}  // namespace clipsvd
