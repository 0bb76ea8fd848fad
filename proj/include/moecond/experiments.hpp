#pragma once

// Experiment pipeline: base model (pretrained on the uniform mixture over the
// task's domains), fine-tuning variants, presets and run directories.
//
// Run directory layout:
//   manifest.json  config.txt  base.ckpt  analysis/*.csv
//   variants/<name>/{config.txt, records.jsonl, final_metrics.csv, model.ckpt}

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "moecond/analysis.hpp"
#include "moecond/config.hpp"
#include "moecond/pruning.hpp"
#include "moecond/records.hpp"
#include "moecond/trainer.hpp"

namespace moecond {

inline constexpr const char* kVersion = "0.1.0";

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Variants

inline const std::vector<std::string>& known_variants() {
  static const std::vector<std::string> v = {
      "config",     "sft",           "densemixer",              "condenser",
      "aux-free",   "aux-free+bias", "aux-free+bias+condenser", "with-aux+condenser"};
  return v;
}

// Fine-tuning settings for a named variant. "config" leaves the routing keys
// as configured. The masked-SFT and DenseMixer baselines keep the base model's
// auxiliary loss; ExpertCondenser drops it for the sparsifying bias controller.
inline ExperimentConfig variant_config(ExperimentConfig cfg, const std::string& name) {
  TrainConfig& t = cfg.train;
  const std::size_t r = t.r > 0 ? t.r : 2;
  const auto routed = [&](BackwardRegime regime, double alpha, bool bias) {
    t.regime = regime;
    t.r = 0;
    t.alpha = alpha;
    t.bias_controller = bias;
    t.sparsify = true;
  };
  const auto condenser = [&](double alpha) {
    t.regime = BackwardRegime::Condenser;
    t.r = r;
    t.alpha = alpha;
    t.bias_controller = true;
    t.sparsify = true;
  };
  if (name == "config") return cfg;
  if (name == "sft") routed(BackwardRegime::Masked, cfg.pretrain_alpha, false);
  else if (name == "densemixer") routed(BackwardRegime::StraightThrough, cfg.pretrain_alpha, false);
  else if (name == "aux-free") routed(BackwardRegime::Masked, 0.0, false);
  else if (name == "aux-free+bias") routed(BackwardRegime::Masked, 0.0, true);
  else if (name == "condenser" || name == "aux-free+bias+condenser") condenser(0.0);
  else if (name == "with-aux+condenser") condenser(cfg.pretrain_alpha);
  else if (name.rfind("condenser-r", 0) == 0 && name.size() > 11 &&
           name.find_first_not_of("0123456789", 11) == std::string::npos) {
    condenser(0.0);
    t.r = detail::parse_number<std::size_t>(name, name.substr(11));
  } else if (name.rfind("condenser-", 0) == 0) {
    condenser(0.0);
    t.strategy = parse_condenser_strategy(name.substr(10));
  } else {
    throw ConfigError("unknown variant: " + name);
  }
  return cfg;
}

inline TrainConfig pretrain_config(const ExperimentConfig& cfg) {
  TrainConfig t = cfg.train;
  t.steps = cfg.pretrain_steps;
  t.regime = BackwardRegime::Masked;
  t.r = 0;
  t.alpha = cfg.pretrain_alpha;
  t.bias_controller = false;
  t.seed = derive_seed(cfg.seed(), "pretrain");
  t.record_every = std::max<std::size_t>(1, cfg.pretrain_steps);
  return t;
}

inline TrainConfig finetune_config(const ExperimentConfig& cfg) {
  TrainConfig t = cfg.train;
  t.seed = derive_seed(cfg.seed(), "finetune");
  return t;
}

inline MoEModel build_base(const ExperimentConfig& cfg) {
  cfg.validate();
  MoEModel model = init_model(cfg.model, derive_seed(cfg.seed(), "init"));
  if (cfg.pretrain_steps > 0) {
    const TrainResult r = train(model, cfg.pretrain_task(), pretrain_config(cfg));
    if (r.diverged) throw EvaluationError("base model training diverged: " + r.message);
  }
  return model;
}

struct VariantRun {
  std::string name;
  ExperimentConfig config;
  MoEModel model;
  TrainResult result;
};

inline VariantRun run_variant(const ExperimentConfig& cfg, const MoEModel& base, const std::string& name) {
  VariantRun v{name, variant_config(cfg, name), base, {}};
  v.config.validate();
  v.result = train(v.model, v.config.task(), finetune_config(v.config));
  return v;
}

inline unsigned worker_threads() {
  if (const char* env = std::getenv("MOECOND_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return static_cast<unsigned>(n);
  }
  return 1;
}

// Runs fn(i) for i in [0, count); output slots are indexed, so the result does
// not depend on scheduling.
inline void parallel_for(std::size_t count, unsigned threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(count)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(count);
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::vector<VariantRun> run_variants(const ExperimentConfig& cfg, const MoEModel& base,
                                            const std::vector<std::string>& names,
                                            unsigned threads = worker_threads()) {
  std::vector<VariantRun> out(names.size());
  parallel_for(names.size(), threads, [&](std::size_t i) { out[i] = run_variant(cfg, base, names[i]); });
  return out;
}

// Fixed token sets for post-hoc analyses.
inline Batch analysis_batch(const ExperimentConfig& cfg, const char* purpose) {
  return sample_batch(cfg.task(), cfg.eval_tokens, derive_seed(cfg.seed(), purpose));
}

// ---------------------------------------------------------------------------
// Pruning study

inline ExpertScoreTable score_experts(const MoEModel& model, const ExperimentConfig& cfg, ScoreKind kind,
                                      std::size_t samples = 8, std::size_t tokens = 128) {
  std::vector<Matrix> traces_in;
  for (std::size_t s = 0; s < samples; ++s) {
    traces_in.push_back(sample_batch(cfg.task(), tokens, derive_seed(cfg.seed(), "trace", s)).inputs);
  }
  const ExpertTraces traces = collect_traces(model, traces_in);
  return kind == ScoreKind::Magnitude ? es_mag(traces.output_norms) : es_act(traces.gates, model.config.k);
}

inline std::vector<Batch> prune_eval_sets(const ExperimentConfig& cfg) {
  return make_eval_sets(cfg.task(), 512, derive_seed(cfg.seed(), "prune-eval"));
}

// Relative eval-loss increase on the head domain (0) and mean over tail domains.
struct HeadTail {
  double head = 0.0;
  double tail = 0.0;
};

inline HeadTail relative_increase(const Vector& before, const Vector& after) {
  HeadTail out;
  out.head = (after[0] - before[0]) / before[0];
  for (std::size_t d = 1; d < before.size(); ++d) out.tail += (after[d] - before[d]) / before[d];
  out.tail /= static_cast<double>(before.size() - 1);
  return out;
}

// Keep half the experts by ES-Act (SmallMoE) and measure the damage per domain.
inline HeadTail half_prune_increase(const ExperimentConfig& cfg, const MoEModel& base) {
  const std::size_t n = cfg.model.n, k = cfg.model.k;
  if (n < 4) throw ConfigError("half prune needs model.n >= 4");
  const PruneSpec half{PruneStrategy::SmallMoE, n / 2, std::min(k, n / 2 - 1)};
  const std::vector<Batch> eval = prune_eval_sets(cfg);
  const MoEModel pruned = apply_prune(base, half, score_experts(base, cfg, ScoreKind::Activation));
  return relative_increase(domain_losses(base, eval), domain_losses(pruned, eval));
}

// ---------------------------------------------------------------------------
// CSV / file helpers

inline void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline std::string fmt(double v) { return detail::format_double(v); }

inline std::string metric_csv(const std::string& metric, const Vector& per_layer) {
  std::string out;
  for (std::size_t l = 0; l < per_layer.size(); ++l) out += metric + "," + std::to_string(l) + "," + fmt(per_layer[l]) + "\n";
  return out;
}

inline std::string final_metrics_csv(const TrainResult& r) {
  std::string out = "metric,value\n";
  out += "eval_loss," + fmt(r.final_eval_loss) + "\n";
  for (std::size_t d = 0; d < r.final_domain_loss.size(); ++d) {
    out += "domain_loss." + std::to_string(d) + "," + fmt(r.final_domain_loss[d]) + "\n";
  }
  if (!r.final_domain_loss.empty()) {
    double tail = 0.0;
    for (std::size_t d = 1; d < r.final_domain_loss.size(); ++d) tail += r.final_domain_loss[d];
    out += "head_loss," + fmt(r.final_domain_loss[0]) + "\n";
    if (r.final_domain_loss.size() > 1) {
      out += "tail_loss," + fmt(tail / double(r.final_domain_loss.size() - 1)) + "\n";
    }
  }
  out += "diverged," + std::string(r.diverged ? "1" : "0") + "\n";
  return out;
}

inline std::map<std::string, double> read_metrics_csv(const fs::path& path) {
  std::istringstream is(read_text(path));
  std::string line;
  std::getline(is, line);
  std::map<std::string, double> out;
  while (std::getline(is, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    out[line.substr(0, comma)] = std::stod(line.substr(comma + 1));
  }
  return out;
}

inline std::string records_jsonl(const std::vector<RunRecord>& records) {
  std::ostringstream os;
  for (const RunRecord& r : records) write_record(os, r);
  return os.str();
}

inline std::string checkpoint_text(const MoEModel& m) {
  std::ostringstream os;
  save_checkpoint(m, os);
  return os.str();
}

inline void write_variant(const fs::path& dir, const VariantRun& v) {
  write_text(dir / "config.txt", format_config(v.config));
  write_text(dir / "records.jsonl", records_jsonl(v.result.records));
  write_text(dir / "final_metrics.csv", final_metrics_csv(v.result));
  write_text(dir / "model.ckpt", checkpoint_text(v.model));
}

inline std::string activations_csv(const ActivationStats& s) {
  std::string out = "layer,expert,count,probability\n";
  for (std::size_t l = 0; l < s.counts.size(); ++l)
    for (std::size_t i = 0; i < s.counts[l].size(); ++i)
      out += std::to_string(l) + "," + std::to_string(i) + "," + fmt(s.counts[l][i]) + "," +
             fmt(s.probabilities[l][i]) + "\n";
  return out;
}

inline std::string lorenz_csv(const ActivationStats& s) {
  std::string out = "layer,population_share,activation_share\n";
  for (std::size_t l = 0; l < s.counts.size(); ++l)
    for (const auto& [x, y] : lorenz_gini(s.counts[l]).points)
      out += std::to_string(l) + "," + fmt(x) + "," + fmt(y) + "\n";
  return out;
}

inline std::string gini_csv(const ActivationStats& s) {
  std::string out = "metric,layer,value\n";
  for (std::size_t l = 0; l < s.counts.size(); ++l)
    out += "gini," + std::to_string(l) + "," + fmt(lorenz_gini(s.counts[l]).gini) + "\n";
  return out;
}

inline std::string opt_fmt(const std::optional<double>& v) { return v ? fmt(*v) : ""; }

inline std::string correlation_csv(const CorrelationReport& rep, const std::vector<std::string>& settings) {
  std::string out = "setting,layer,shared_kind,shared_index,routed_index,base,tuned,delta_pct\n";
  for (const CorrelationPair& p : rep.pairs) {
    for (std::size_t s = 0; s < settings.size(); ++s) {
      out += settings[s] + "," + std::to_string(p.layer) + "," + (p.shared.shared ? "shared" : "condenser") + "," +
             std::to_string(p.shared.index) + "," + std::to_string(p.routed.index) + "," + opt_fmt(p.base) + "," +
             opt_fmt(p.tuned[s]) + "," + opt_fmt(p.delta_pct[s]) + "\n";
    }
  }
  return out;
}

inline std::string correlation_summary_csv(const CorrelationReport& rep, const std::vector<std::string>& settings) {
  std::string out = "setting,metric,layer,value\n";
  for (std::size_t s = 0; s < settings.size(); ++s) {
    for (std::size_t l = 0; l < rep.layer_mean_delta[s].size(); ++l)
      out += settings[s] + ",mean_delta_pct," + std::to_string(l) + "," + fmt(rep.layer_mean_delta[s][l]) + "\n";
    out += settings[s] + ",model_mean_delta_pct,all," + fmt(rep.model_mean_delta[s]) + "\n";
    out += settings[s] + ",model_std_delta_pct,all," + fmt(rep.model_std_delta[s]) + "\n";
  }
  return out;
}

inline std::string grad_norms_csv(const std::vector<RunRecord>& records) {
  std::string out = "step,scope,condenser_mean,routed_mean\n";
  for (const RunRecord& r : records) {
    for (std::size_t l = 0; l < r.condenser_grad_mean.size(); ++l)
      out += std::to_string(r.step) + "," + std::to_string(l) + "," + opt_fmt(r.condenser_grad_mean[l]) + "," +
             opt_fmt(r.routed_grad_mean[l]) + "\n";
    if (!r.condenser_grad_mean.empty())
      out += std::to_string(r.step) + ",model," + opt_fmt(r.condenser_grad_mean_model) + "," +
             opt_fmt(r.routed_grad_mean_model) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Presets

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> v = {"scaling-law",     "math-style-train", "ablation-r",
                                             "ablation-selection", "persistent-path",  "gradient-norms",
                                             "correlation",     "stability"};
  return v;
}

inline std::vector<std::string> preset_variants(const std::string& preset, const ExperimentConfig& cfg) {
  if (preset == "scaling-law") return {};
  if (preset == "math-style-train")
    return {"sft", "densemixer", "aux-free", "aux-free+bias", "aux-free+bias+condenser", "with-aux+condenser"};
  if (preset == "ablation-r") {
    std::vector<std::string> v;
    for (std::size_t r = 1; r <= cfg.model.k; ++r) v.push_back("condenser-r" + std::to_string(r));
    return v;
  }
  if (preset == "ablation-selection")
    return {"condenser-low-bias", "condenser-high-bias", "condenser-low-activation", "condenser-high-activation",
            "condenser-random"};
  if (preset == "persistent-path" || preset == "gradient-norms") return {"condenser"};
  if (preset == "correlation" || preset == "stability") return {"sft", "densemixer", "condenser"};
  if (preset == "train") return {"config"};
  throw ConfigError("unknown preset: " + preset);
}

struct RunOutcome {
  Json manifest;
  MoEModel base;
  std::vector<VariantRun> variants;
  bool ok = true;
};

namespace detail {

inline Json config_json(const ExperimentConfig& cfg) {
  Json j = Json::object();
  for (const auto& [k, v] : cfg.to_map()) j[k] = v;
  return j;
}

inline void scaling_analysis(const ExperimentConfig& cfg, const MoEModel& base, const fs::path& out, Json& m) {
  const std::vector<Batch> eval = prune_eval_sets(cfg);
  const Vector before = domain_losses(base, eval);
  std::string csv = "score_kind,strategy,n_retain,k_active,domain,loss\n";
  const std::size_t n = cfg.model.n, k = cfg.model.k;
  for (ScoreKind kind : {ScoreKind::Activation, ScoreKind::Magnitude}) {
    const ExpertScoreTable scores = score_experts(base, cfg, kind);
    std::vector<PruneSpec> specs;
    for (std::size_t nr = n; nr >= 1; --nr) {
      if (nr <= k) specs.push_back({PruneStrategy::SmallDense, nr, nr});
      const std::size_t kk = std::min(k, nr - 1);
      if (kk >= 1) specs.push_back({PruneStrategy::SmallMoE, nr, kk});
    }
    for (std::size_t kk = k; kk >= 1; --kk) specs.push_back({PruneStrategy::InferenceReduce, n, kk});
    for (const PruneSpec& spec : specs) {
      const Vector after = domain_losses(apply_prune(base, spec, scores), eval);
      for (std::size_t d = 0; d < after.size(); ++d)
        csv += std::string(to_string(kind)) + "," + std::string(to_string(spec.strategy)) + "," +
               std::to_string(spec.n_retain) + "," + std::to_string(spec.k_active) + "," + std::to_string(d) + "," +
               fmt(after[d]) + "\n";
    }
    std::string score_csv = "layer,expert,score_kind,score\n";
    for (std::size_t l = 0; l < scores.scores.size(); ++l)
      for (std::size_t i = 0; i < scores.scores[l].size(); ++i)
        score_csv += std::to_string(l) + "," + std::to_string(i) + "," + std::string(to_string(kind)) + "," +
                     fmt(scores.scores[l][i]) + "\n";
    write_text(out / "analysis" / ("scores_" + std::string(to_string(kind)) + ".csv"), score_csv);
  }
  write_text(out / "analysis" / "scaling.csv", csv);

  const HeadTail ht = half_prune_increase(cfg, base);
  m["metrics"]["half_prune_head_increase"] = ht.head;
  m["metrics"]["half_prune_tail_increase"] = ht.tail;
  m["flags"]["tail_increase_gt_head"] = ht.tail > ht.head;
}

inline std::string rollup_csv(const std::vector<VariantRun>& runs) {
  std::string out = "variant,eval_loss,head_loss,tail_loss\n";
  for (const VariantRun& v : runs) {
    const Vector& d = v.result.final_domain_loss;
    double tail = 0.0;
    for (std::size_t i = 1; i < d.size(); ++i) tail += d[i];
    out += v.name + "," + fmt(v.result.final_eval_loss) + "," + (d.empty() ? "" : fmt(d[0])) + "," +
           (d.size() > 1 ? fmt(tail / double(d.size() - 1)) : "") + "\n";
  }
  return out;
}

}  // namespace detail

// Executes a preset end to end and writes the run directory. `cfg` is the
// full configuration before variant adjustments; it goes into the manifest so
// the run can be re-executed from the manifest alone.
inline RunOutcome run_preset(const std::string& preset, const ExperimentConfig& cfg, const fs::path& out,
                             unsigned threads = worker_threads()) {
  cfg.validate();
  const std::vector<std::string> names = preset_variants(preset, cfg);
  RunOutcome res;
  Json& m = res.manifest;
  m["preset"] = preset;
  m["seed"] = cfg.seed();
  m["version"] = kVersion;
  m["status"] = "running";
  m["config"] = detail::config_json(cfg);
  m["variants"] = names;
  m["flags"] = Json::object();
  m["metrics"] = Json::object();

  fs::create_directories(out);
  write_text(out / "config.txt", format_config(cfg));
  res.base = build_base(cfg);
  write_text(out / "base.ckpt", checkpoint_text(res.base));
  res.variants = run_variants(cfg, res.base, names, threads);

  for (const VariantRun& v : res.variants) {
    write_variant(out / "variants" / v.name, v);
    m["metrics"]["eval_loss." + v.name] = v.result.final_eval_loss;
    if (v.result.diverged) {
      res.ok = false;
      m["failure"] = v.name + ": " + v.result.message;
    }
  }
  if (!res.ok) {
    m["status"] = "failed";
    write_text(out / "manifest.json", m.dump(2) + "\n");
    return res;
  }

  const auto find = [&](const std::string& name) -> const VariantRun& {
    for (const VariantRun& v : res.variants)
      if (v.name == name) return v;
    throw StateError("missing variant " + name);
  };
  const fs::path an = out / "analysis";

  if (preset == "scaling-law") detail::scaling_analysis(cfg, res.base, out, m);
  if (preset == "math-style-train" || preset == "ablation-r" || preset == "ablation-selection") {
    write_text(an / "rollup.csv", detail::rollup_csv(res.variants));
  }
  if (preset == "persistent-path") {
    const AblationResult ab = ablate_persistent_path(find("condenser").model, analysis_batch(cfg, "ablation"));
    write_text(an / "ablation.csv", "metric,value\nloss_with," + fmt(ab.loss_with) + "\nloss_without," +
                                        fmt(ab.loss_without) + "\n");
    m["metrics"]["loss_with"] = ab.loss_with;
    m["metrics"]["loss_without"] = ab.loss_without;
    m["flags"]["loss_with < loss_without"] = ab.loss_with < ab.loss_without;
  }
  if (preset == "gradient-norms") {
    const VariantRun& v = find("condenser");
    write_text(an / "grad_norms.csv", grad_norms_csv(v.result.records));
    const auto dom = condenser_dominance(v.result.records, finetune_config(v.config).warmup_steps());
    m["metrics"]["condenser_dominance_fraction"] = dom ? Json(*dom) : Json(nullptr);
    m["flags"]["condenser_dominates_90pct"] = dom && *dom >= 0.9;
  }
  if (preset == "stability") {
    const Matrix tokens = analysis_batch(cfg, "analysis").inputs;
    for (const VariantRun& v : res.variants) {
      const Vector kl = router_kl(res.base, v.model, tokens);
      const Vector div = weighted_output_divergence(res.base, v.model, tokens);
      write_text(an / v.name / "kl.csv", "metric,layer,value\n" + metric_csv("router_kl", kl));
      write_text(an / v.name / "divergence.csv", "metric,layer,value\n" + metric_csv("output_divergence", div));
      const ActivationStats stats = activation_histogram(v.model, tokens);
      write_text(an / v.name / "activations.csv", activations_csv(stats));
      write_text(an / v.name / "lorenz.csv", lorenz_csv(stats));
      write_text(an / v.name / "gini.csv", gini_csv(stats));
      double mean = 0.0;
      for (double x : kl) mean += x / double(kl.size());
      m["metrics"]["router_kl." + v.name] = mean;
    }
    m["flags"]["condenser_kl_le_sft"] =
        m["metrics"]["router_kl.condenser"].get<double>() <= m["metrics"]["router_kl.sft"].get<double>();
  }
  if (preset == "correlation") {
    std::vector<MoEModel> tuned;
    for (const VariantRun& v : res.variants) tuned.push_back(v.model);
    const auto sets = default_correlation_sets(find("condenser").model);
    const CorrelationReport rep = correlation_report(res.base, tuned, sets.first, sets.second);
    write_text(an / "correlation.csv", correlation_csv(rep, names));
    write_text(an / "correlation_summary.csv", correlation_summary_csv(rep, names));
    for (std::size_t s = 0; s < names.size(); ++s) {
      m["metrics"]["model_mean_delta_pct." + names[s]] = rep.model_mean_delta[s];
    }
  }

  m["status"] = "ok";
  write_text(out / "manifest.json", m.dump(2) + "\n");
  return res;
}

inline ExperimentConfig config_from_manifest(const Json& manifest) {
  ExperimentConfig cfg;
  std::map<std::string, std::string> kv;
  for (const auto& [k, v] : manifest.at("config").items()) kv[k] = v.get<std::string>();
  apply_overrides(cfg, kv);
  return cfg;
}

// ---------------------------------------------------------------------------
// Reading run directories back

struct RunDir {
  fs::path path;
  Json manifest;
  ExperimentConfig config;
  std::vector<std::string> variants;
};

inline RunDir open_run(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("run directory not found: " + dir.string());
  RunDir r;
  r.path = dir;
  r.manifest = Json::parse(read_text(dir / "manifest.json"));
  r.config = config_from_manifest(r.manifest);
  r.variants = r.manifest.at("variants").get<std::vector<std::string>>();
  return r;
}

inline MoEModel load_base(const RunDir& r) { return load_checkpoint((r.path / "base.ckpt").string()); }

inline MoEModel load_variant(const RunDir& r, const std::string& variant) {
  return load_checkpoint((r.path / "variants" / variant / "model.ckpt").string());
}

// Side-by-side final metrics; deltas are against the first run.
inline std::string compare_runs(const std::vector<fs::path>& dirs) {
  if (dirs.size() < 2) throw ConfigError("compare needs at least two run directories");
  std::vector<RunDir> runs;
  for (const fs::path& d : dirs) runs.push_back(open_run(d));
  const auto task_keys = [](const RunDir& r) {
    std::map<std::string, std::string> out;
    for (const auto& [k, v] : r.config.to_map())
      if (k.rfind("task.", 0) == 0 || k.rfind("model.", 0) == 0) out[k] = v;
    return out;
  };
  for (std::size_t i = 1; i < runs.size(); ++i) {
    if (runs[i].manifest.at("preset") != runs[0].manifest.at("preset")) {
      throw ConfigError("incompatible presets: " + runs[0].manifest.at("preset").get<std::string>() + " vs " +
                        runs[i].manifest.at("preset").get<std::string>());
    }
    if (task_keys(runs[i]) != task_keys(runs[0])) throw ConfigError("incompatible task/model configuration");
  }
  std::map<std::string, std::map<std::string, double>> reference;
  for (const std::string& v : runs[0].variants) reference[v] = read_metrics_csv(runs[0].path / "variants" / v / "final_metrics.csv");
  std::string out = "run,variant,metric,value,delta\n";
  for (const RunDir& r : runs) {
    for (const std::string& v : r.variants) {
      for (const auto& [metric, value] : read_metrics_csv(r.path / "variants" / v / "final_metrics.csv")) {
        std::string delta;
        if (reference.count(v) && reference[v].count(metric)) delta = fmt(value - reference[v][metric]);
        out += r.path.string() + "," + v + "," + metric + "," + fmt(value) + "," + delta + "\n";
      }
    }
  }
  return out;
}

}  // namespace moecond
