// SPDX-License-Identifier: Apache-2.0
#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "clipsvd/commands.hpp"

namespace {

using clipsvd::RunConfig;
namespace fs = std::filesystem;

template <class T>
std::optional<T> opt(const CLI::Option* o, const T& value) {
  return o->count() > 0 ? std::optional<T>(value) : std::nullopt;
}

int report(const std::string& kind, const std::string& what) {
  std::cerr << "error: " << kind << ": " << what << "\n";
  return clipsvd::exit_code_for(kind);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Singular-value fine-tuning and head interpretability for toy dual encoders"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  std::string config_path;
  std::uint64_t seed = 0;
  std::string out;
  CLI::Option* config_opt = app.add_option("--config", config_path, "Run config (JSON)");
  CLI::Option* seed_opt = app.add_option("--seed", seed, "Override the config seed");
  app.add_option("--out", out, "Output file");

  auto* gen = app.add_subcommand("generate-data", "Write a synthetic dataset container");
  std::string which = "task";
  gen->add_option("--which", which, "task or pretrain")->check(CLI::IsMember({"task", "pretrain"}));

  auto* pre = app.add_subcommand("pretrain", "Contrastive pretraining; writes a dense checkpoint");
  std::string pre_data;
  pre->add_option("--data", pre_data, "Pretraining dataset")->required();

  auto* ad = app.add_subcommand("adapt", "Few-shot singular-value adaptation");
  std::string ad_ckpt, ad_data, ad_record;
  ad->add_option("--checkpoint", ad_ckpt, "Input checkpoint")->required();
  ad->add_option("--data", ad_data, "Task dataset")->required();
  CLI::Option* record_opt = ad->add_option("--record", ad_record, "Adaptation record output (JSON)");

  auto* ev = app.add_subcommand("eval", "Held-out accuracy (all, base, novel, HM)");
  std::string ev_ckpt, ev_data;
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint")->required();
  ev->add_option("--data", ev_data, "Task dataset")->required();

  auto* rh = app.add_subcommand("rank-heads", "Rank vision heads by singular-value change");
  std::string rh_before, rh_after, rh_record;
  rh->add_option("--before", rh_before, "Checkpoint before adaptation")->required();
  rh->add_option("--after", rh_after, "Checkpoint after adaptation")->required();
  CLI::Option* rh_record_opt = rh->add_option("--record", rh_record, "Adaptation record to cross-check");

  auto* ts = app.add_subcommand("textspan", "Describe vision heads with a text corpus");
  std::string ts_ckpt, ts_data, ts_corpus;
  ts->add_option("--checkpoint", ts_ckpt, "Checkpoint")->required();
  ts->add_option("--data", ts_data, "Dataset supplying probe images")->required();
  ts->add_option("--corpus", ts_corpus, "Corpus file, one description per line")->required();

  auto* ab = app.add_subcommand("ablate-rank", "Sweep top_k/bottom_k rank masks; writes CSV");
  std::string ab_ckpt, ab_data;
  ab->add_option("--checkpoint", ab_ckpt, "Pretrained checkpoint")->required();
  ab->add_option("--data", ab_data, "Task dataset")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report("usage_error", e.what());
  }

  try {
    const RunConfig cfg = clipsvd::resolve_config(opt(config_opt, fs::path(config_path)), opt(seed_opt, seed));
    const std::optional<fs::path> out_path = out.empty() ? std::nullopt : std::optional<fs::path>(out);
    auto require_out = [&]() -> fs::path {
      if (!out_path) throw clipsvd::UsageError("--out is required for this command");
      return *out_path;
    };
    if (gen->parsed()) {
      const auto ds = clipsvd::cmd_generate_data(cfg, which, require_out());
      std::cout << "wrote " << ds.samples.size() << " samples, " << ds.num_classes() << " classes\n";
    } else if (pre->parsed()) {
      clipsvd::cmd_pretrain(cfg, pre_data, require_out(), std::cout);
    } else if (ad->parsed()) {
      clipsvd::cmd_adapt(cfg, ad_ckpt, ad_data, require_out(), opt(record_opt, fs::path(ad_record)), std::cout);
    } else if (ev->parsed()) {
      const auto j = clipsvd::cmd_eval(cfg, ev_ckpt, ev_data, out_path);
      std::cout << "accuracy " << j["accuracy"].get<double>() << " base " << j["base_accuracy"].get<double>()
                << " novel " << j["novel_accuracy"].get<double>() << " hm " << j["harmonic_mean"].get<double>()
                << "\n";
    } else if (rh->parsed()) {
      clipsvd::cmd_rank_heads(cfg, rh_before, rh_after, opt(rh_record_opt, fs::path(rh_record)), out_path, std::cout);
    } else if (ts->parsed()) {
      clipsvd::cmd_textspan(cfg, ts_ckpt, ts_data, ts_corpus, out_path, std::cout);
    } else if (ab->parsed()) {
      const auto rows = clipsvd::cmd_ablate_rank(cfg, ab_ckpt, ab_data, out_path, std::cerr);
      if (!out_path) std::cout << clipsvd::ablation_csv(rows);
    }
  } catch (const clipsvd::Error& e) {
    return report(e.kind(), e.what());
  } catch (const std::exception& e) {
    return report("internal_error", e.what());
  }
  return 0;
}
