// moecond: command-line driver for training, pruning, analysis and presets.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "moecond/experiments.hpp"

using namespace moecond;

namespace {

constexpr int kRuntimeFailure = 1;
constexpr int kUsageError = 2;

std::map<std::string, std::string> parse_sets(const std::vector<std::string>& sets) {
  std::map<std::string, std::string> kv;
  for (const std::string& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    kv[detail::trim(s.substr(0, eq))] = s.substr(eq + 1);
  }
  return kv;
}

void emit(const std::string& text, const std::string& out) {
  if (out.empty() || out == "-") {
    std::cout << text;
  } else {
    write_text(out, text);
  }
}

MoEModel load_model(const RunDir& run, const std::string& variant) {
  return variant == "base" ? load_base(run) : load_variant(run, variant);
}

std::string default_variant(const RunDir& run, const std::string& variant) {
  if (!variant.empty()) return variant;
  if (run.variants.empty()) return "base";
  return run.variants.back();
}

int finish_run(const RunOutcome& res, const fs::path& out) {
  std::cout << "status " << res.manifest.at("status").get<std::string>() << "\n";
  std::cout << "manifest " << (out / "manifest.json").string() << "\n";
  if (!res.ok) {
    std::cerr << "moecond: " << res.manifest.value("failure", std::string("run failed")) << "\n";
    return kRuntimeFailure;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture-of-experts condenser lab"};
  app.require_subcommand(1);

  std::vector<std::string> sets;
  std::string config_path, out_dir, preset, manifest_path, run_dir, variant, out_file;
  std::uint64_t seed = 1234;
  std::string strategy = "small-moe", score_kind = "es-act";
  std::size_t n_retain = 0, k_active = 0;
  std::vector<std::string> compare_dirs, analyze_runs;

  auto* train_cmd = app.add_subcommand("train", "Pretrain a base model and fine-tune it as configured");
  train_cmd->add_option("--config", config_path, "Config file (key = value)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", out_dir, "Output run directory")->required();
  train_cmd->add_option("--set", sets, "Override a config key (key=value)");

  auto* run_cmd = app.add_subcommand("run", "Execute an experiment preset end to end");
  auto* preset_opt = run_cmd->add_option("--preset", preset, "Preset name")->check(CLI::IsMember(preset_names()));
  auto* manifest_opt = run_cmd->add_option("--manifest", manifest_path, "Re-execute from a manifest")->check(CLI::ExistingFile);
  run_cmd->add_option("--seed", seed, "Root seed");
  run_cmd->add_option("--config", config_path, "Config file")->check(CLI::ExistingFile);
  run_cmd->add_option("--set", sets, "Override a config key (key=value)");
  run_cmd->add_option("--out", out_dir, "Output run directory");
  preset_opt->excludes(manifest_opt);

  auto* prune_cmd = app.add_subcommand("prune", "Score experts and prune a trained model");
  prune_cmd->add_option("--run", run_dir, "Run directory")->required();
  prune_cmd->add_option("--variant", variant, "Variant to prune, or 'base'");
  prune_cmd->add_option("--strategy", strategy, "small-dense | small-moe | inference-reduce");
  prune_cmd->add_option("--n-retain", n_retain, "Experts kept per layer")->required();
  prune_cmd->add_option("--k-active", k_active, "Active experts per token")->required();
  prune_cmd->add_option("--score", score_kind, "es-act | es-mag");
  prune_cmd->add_option("--out", out_dir, "Output directory")->required();

  auto* analyze_cmd = app.add_subcommand("analyze", "Post-hoc diagnostics on run directories");
  analyze_cmd->require_subcommand(1);
  std::map<std::string, CLI::App*> analyses;
  const std::pair<const char*, const char*> analysis_names[] = {
      {"kl", "Per-layer router KL from the base model"},
      {"divergence", "Per-layer relative output divergence from the base model"},
      {"gini", "Activation Gini coefficients and Lorenz curves"},
      {"corr", "Shared/routed down-projection correlation shifts"},
      {"activations", "Expert activation counts and probabilities"}};
  for (const auto& [name, help] : analysis_names) {
    auto* sub = analyze_cmd->add_subcommand(name, help);
    sub->add_option("--run", analyze_runs, "Run directory (corr accepts several)")->required();
    sub->add_option("--variant", variant, "Variant to compare with the base model");
    sub->add_option("--out", out_dir, "Output directory (default: print CSV)");
    analyses[name] = sub;
  }

  auto* ablate_cmd = app.add_subcommand("ablate", "Persistent-path ablation of a condenser model");
  ablate_cmd->add_option("--run", run_dir, "Run directory")->required();
  ablate_cmd->add_option("--variant", variant, "Variant (default: last)");
  ablate_cmd->add_option("--out", out_file, "Output CSV (default: stdout)");

  auto* compare_cmd = app.add_subcommand("compare", "Side-by-side final metrics of run directories");
  compare_cmd->add_option("dirs", compare_dirs, "Run directories")->required()->expected(2, -1);
  compare_cmd->add_option("--out", out_file, "Output CSV (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (train_cmd->parsed()) {
      ExperimentConfig cfg = load_config(config_path);
      apply_overrides(cfg, parse_sets(sets));
      return finish_run(run_preset("train", cfg, out_dir), out_dir);
    }

    if (run_cmd->parsed()) {
      ExperimentConfig cfg;
      std::string name = preset;
      if (!manifest_path.empty()) {
        const Json manifest = Json::parse(read_text(manifest_path));
        cfg = config_from_manifest(manifest);
        name = manifest.at("preset").get<std::string>();
      } else {
        if (preset.empty()) throw ConfigError("run needs --preset or --manifest");
        if (!config_path.empty()) cfg = load_config(config_path);
        cfg.train.seed = seed;
      }
      apply_overrides(cfg, parse_sets(sets));
      if (out_dir.empty()) out_dir = "runs/" + name + "-seed" + std::to_string(cfg.seed());
      return finish_run(run_preset(name, cfg, out_dir), out_dir);
    }

    if (prune_cmd->parsed()) {
      const RunDir run = open_run(run_dir);
      const std::string v = default_variant(run, variant);
      const MoEModel model = load_model(run, v);
      const ScoreKind kind = parse_score_kind(score_kind);
      const PruneSpec spec{parse_prune_strategy(strategy), n_retain, k_active};
      spec.validate(model.config.n, model.config.k);
      const ExpertScoreTable scores = score_experts(model, run.config, kind);
      const MoEModel pruned = apply_prune(model, spec, scores);
      const std::vector<Batch> eval = prune_eval_sets(run.config);
      const Vector before = domain_losses(model, eval), after = domain_losses(pruned, eval);
      std::string scores_csv = "layer,expert,score_kind,score\n";
      for (std::size_t l = 0; l < scores.scores.size(); ++l)
        for (std::size_t i = 0; i < scores.scores[l].size(); ++i)
          scores_csv += std::to_string(l) + "," + std::to_string(i) + "," + std::string(to_string(kind)) + "," +
                        fmt(scores.scores[l][i]) + "\n";
      std::string metrics = "domain,loss_before,loss_after\n";
      for (std::size_t d = 0; d < before.size(); ++d)
        metrics += std::to_string(d) + "," + fmt(before[d]) + "," + fmt(after[d]) + "\n";
      write_text(fs::path(out_dir) / "scores.csv", scores_csv);
      write_text(fs::path(out_dir) / "prune_metrics.csv", metrics);
      write_text(fs::path(out_dir) / "pruned.ckpt", checkpoint_text(pruned));
      std::cout << metrics;
      return 0;
    }

    if (analyze_cmd->parsed()) {
      const RunDir run = open_run(analyze_runs.front());
      const std::string v = default_variant(run, variant);
      const MoEModel base = load_base(run);
      const Matrix tokens = analysis_batch(run.config, "analysis").inputs;
      std::map<std::string, std::string> files;
      if (analyses["kl"]->parsed()) {
        files["kl.csv"] = "metric,layer,value\n" + metric_csv("router_kl", router_kl(base, load_model(run, v), tokens));
      } else if (analyses["divergence"]->parsed()) {
        files["divergence.csv"] = "metric,layer,value\n" +
                                  metric_csv("output_divergence", weighted_output_divergence(base, load_model(run, v), tokens));
      } else if (analyses["gini"]->parsed() || analyses["activations"]->parsed()) {
        const ActivationStats stats = activation_histogram(load_model(run, v), tokens);
        if (analyses["gini"]->parsed()) {
          files["gini.csv"] = gini_csv(stats);
          files["lorenz.csv"] = lorenz_csv(stats);
        } else {
          files["activations.csv"] = activations_csv(stats);
        }
      } else if (analyses["corr"]->parsed()) {
        std::vector<MoEModel> tuned;
        std::vector<std::string> labels;
        for (const std::string& dir : analyze_runs) {
          const RunDir r = open_run(dir);
          const std::string rv = default_variant(r, variant);
          tuned.push_back(load_model(r, rv));
          labels.push_back(dir + ":" + rv);
        }
        const auto sets_ = default_correlation_sets(tuned.front());
        const CorrelationReport rep = correlation_report(base, tuned, sets_.first, sets_.second);
        files["correlation.csv"] = correlation_csv(rep, labels);
        files["correlation_summary.csv"] = correlation_summary_csv(rep, labels);
      }
      for (const auto& [name, text] : files) {
        if (out_dir.empty()) {
          std::cout << text;
        } else {
          write_text(fs::path(out_dir) / name, text);
        }
      }
      return 0;
    }

    if (ablate_cmd->parsed()) {
      const RunDir run = open_run(run_dir);
      const std::string v = default_variant(run, variant);
      const AblationResult ab = ablate_persistent_path(load_model(run, v), analysis_batch(run.config, "ablation"));
      emit("metric,value\nloss_with," + fmt(ab.loss_with) + "\nloss_without," + fmt(ab.loss_without) + "\n", out_file);
      return 0;
    }

    if (compare_cmd->parsed()) {
      std::vector<fs::path> dirs(compare_dirs.begin(), compare_dirs.end());
      emit(compare_runs(dirs), out_file);
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "moecond: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "moecond: " << e.what() << "\n";
    return kRuntimeFailure;
  }
  return kUsageError;
}
