#pragma once

// Training loop, optimizers, the persistent-path ablation and frozen-model
// gradient diagnostics.
//
// One step: sample batch -> forward under the configured regime -> loss
// (MSE + alpha * aux balance loss) -> backward -> optimizer step -> bias
// controller step. For the condenser regime the first warm-up steps run with
// an empty condenser set and the balancing controller; J is chosen per layer
// when warm-up ends and sparsification starts after that.

#include <cmath>
#include <cstddef>
#include <numeric>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "moecond/model.hpp"
#include "moecond/routing.hpp"
#include "moecond/seed.hpp"
#include "moecond/synth.hpp"

namespace moecond {

enum class OptimizerKind { SGD, Adam };

inline std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::SGD ? "sgd" : "adam"; }

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd") return OptimizerKind::SGD;
  if (s == "adam" || s == "adamw") return OptimizerKind::Adam;
  throw ConfigError("unknown optimizer: " + std::string(s));
}

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 64;
  double lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  BackwardRegime regime = BackwardRegime::Condenser;
  double gamma = 1e-4;
  double alpha = 0.0;
  std::size_t r = 2;
  CondenserStrategy strategy = CondenserStrategy::LowBias;
  bool bias_controller = true;
  bool sparsify = true;
  std::uint64_t seed = 1234;
  std::size_t record_every = 20;
  double warmup_frac = 0.1;
  std::size_t refresh_every = 0;  // 0: J fixed after warm-up
  std::size_t eval_tokens = 256;  // per domain

  std::size_t warmup_steps() const {
    return static_cast<std::size_t>(std::floor(warmup_frac * static_cast<double>(steps)));
  }

  void validate(const ModelConfig& model) const {
    if (steps < 1) throw ConfigError("train.steps must be >= 1");
    if (batch < 1) throw ConfigError("train.batch must be >= 1");
    if (lr < 0.0 || !std::isfinite(lr)) throw ConfigError("train.lr must be finite and >= 0");
    if (gamma < 0.0) throw ConfigError("routing.gamma must be >= 0");
    if (alpha < 0.0) throw ConfigError("routing.alpha must be >= 0");
    if (record_every < 1) throw ConfigError("train.record_every must be >= 1");
    if (warmup_frac < 0.0 || warmup_frac >= 1.0) throw ConfigError("train.warmup_frac must be in [0,1)");
    if (r > model.k) throw ConfigError("routing.r must not exceed model.k");
    if (r > 0 && regime != BackwardRegime::Condenser) {
      throw ConfigError("routing.r > 0 requires routing.regime = condenser");
    }
  }
};

struct RunRecord {
  std::size_t step = 0;
  double loss = 0.0;
  std::string status = "ok";
  std::vector<Vector> grad_norms;         // layer x n, l2 over expert FFN params
  std::vector<Vector> activation_counts;  // layer x n, cumulative N_i
  std::vector<Vector> bias;               // layer x n
  std::vector<std::vector<std::size_t>> condensers;
  std::vector<std::optional<double>> condenser_grad_mean;  // per layer
  std::vector<std::optional<double>> routed_grad_mean;     // per layer
  std::optional<double> condenser_grad_mean_model;         // over all condenser experts
  std::optional<double> routed_grad_mean_model;            // over all routed experts
  Vector domain_loss;
  double eval_loss = 0.0;
};

struct TrainResult {
  std::vector<RunRecord> records;
  bool diverged = false;
  std::string message;
  double final_eval_loss = 0.0;
  Vector final_domain_loss;
};

class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(lr) {}

  void step(std::vector<Matrix*>& params, const std::vector<Matrix>& grads) {
    if (params.size() != grads.size()) throw DimensionError("optimizer: parameter/grad count mismatch");
    if (kind_ == OptimizerKind::SGD) {
      for (std::size_t p = 0; p < params.size(); ++p) axpy_inplace(*params[p], -lr_, grads[p]);
      return;
    }
    if (m_.empty()) {
      for (const Matrix* p : params) {
        m_.emplace_back(p->rows(), p->cols());
        v_.emplace_back(p->rows(), p->cols());
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto w = params[p]->data();
      auto g = grads[p].data();
      auto m = m_[p].data();
      auto v = v_[p].data();
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
        w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
    }
  }

 private:
  OptimizerKind kind_;
  double lr_;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  std::size_t t_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

inline std::vector<Matrix*> trainable_parameters(MoEModel& model) {
  std::vector<Matrix*> out;
  for_each_parameter(model, [&](const std::string&, Matrix& m) { out.push_back(&m); });
  return out;
}

// Per-domain eval sets, fixed by the run seed.
inline std::vector<Batch> make_eval_sets(const DomainMixture& mix, std::size_t tokens,
                                         std::uint64_t seed) {
  std::vector<Batch> sets;
  for (std::size_t d = 0; d < mix.m; ++d) {
    sets.push_back(sample_domain(mix, d, tokens, derive_seed(seed, "eval", d)));
  }
  return sets;
}

inline Vector domain_losses(const MoEModel& model, const std::vector<Batch>& eval_sets) {
  Vector out;
  for (const Batch& b : eval_sets) out.push_back(mean_squared_error(evaluate(model, b.inputs).prediction, b.targets));
  return out;
}

inline double mixture_loss(const Vector& domain_loss, const Vector& pi) {
  double total = 0.0;
  for (std::size_t d = 0; d < pi.size(); ++d) total += pi[d] * domain_loss[d];
  return total;
}

// Adds alpha * sum_i f_i P_i for one layer onto the tape.
inline Var record_aux_loss(Var weights, const std::vector<RouterDecision>& decisions, double alpha) {
  const Vector f = balance_frequencies(decisions);
  const double T = static_cast<double>(decisions.size());
  Matrix coef(weights.rows(), weights.cols());
  for (std::size_t t = 0; t < coef.rows(); ++t)
    for (std::size_t i = 0; i < coef.cols(); ++i) coef(t, i) = alpha * f[i] / T;
  return weighted_sum(weights, std::move(coef));
}

namespace detail {

inline void choose_condensers(MoEModel& model, const TrainConfig& cfg,
                              const std::vector<Vector>& counts) {
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    auto j = select_condensers(model.layers[l].router.bias, cfg.r, cfg.strategy, counts[l],
                               derive_seed(cfg.seed, "condensers", l), 1.5 * cfg.gamma);
    model.set_condensers(l, std::move(j));
  }
}

inline void fill_grad_summary(RunRecord& rec, const MoEModel& model) {
  double cond_total = 0.0, routed_total = 0.0;
  std::size_t cond_count = 0, routed_count = 0;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const MoEConfig& c = model.layers[l].config;
    double cs = 0.0, rs = 0.0;
    std::size_t cn = 0, rn = 0;
    for (std::size_t i = 0; i < c.n; ++i) {
      const double g = rec.grad_norms[l][i];
      if (c.is_condenser(i)) {
        cs += g;
        ++cn;
      } else {
        rs += g;
        ++rn;
      }
    }
    rec.condenser_grad_mean.push_back(cn ? std::optional<double>(cs / double(cn)) : std::nullopt);
    rec.routed_grad_mean.push_back(rn ? std::optional<double>(rs / double(rn)) : std::nullopt);
    cond_total += cs;
    routed_total += rs;
    cond_count += cn;
    routed_count += rn;
  }
  if (cond_count) rec.condenser_grad_mean_model = cond_total / double(cond_count);
  if (routed_count) rec.routed_grad_mean_model = routed_total / double(routed_count);
}

}  // namespace detail

inline TrainResult train(MoEModel& model, const DomainMixture& mix, const TrainConfig& cfg,
                         const std::function<void(const RunRecord&)>& sink = {}) {
  cfg.validate(model.config);
  mix.validate();
  if (mix.d_model != model.config.d_model || mix.d_out != model.config.d_out) {
    throw ConfigError("train: task widths do not match model");
  }

  TrainResult result;
  Optimizer optimizer(cfg.optimizer, cfg.lr);
  std::vector<Matrix*> params = trainable_parameters(model);
  const std::vector<Batch> eval_sets = make_eval_sets(mix, cfg.eval_tokens, cfg.seed);
  const std::size_t warmup = cfg.warmup_steps();
  const bool wants_condensers = cfg.regime == BackwardRegime::Condenser && cfg.r > 0;
  std::vector<Vector> counts(model.layers.size(), Vector(model.config.n, 0.0));

  if (wants_condensers && warmup == 0) detail::choose_condensers(model, cfg, counts);

  const auto emit = [&](RunRecord rec) {
    if (sink) sink(rec);
    result.records.push_back(std::move(rec));
  };

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const Batch batch = sample_batch(mix, cfg.batch, derive_seed(cfg.seed, "batch", step));

    Tape tape;
    const ModelVars vars = bind_parameters(tape, model);
    ModelForward fwd = record_forward(tape, model, vars, batch.inputs, cfg.regime);
    Var loss = mse(fwd.prediction, batch.targets);
    if (cfg.alpha > 0.0) {
      for (const LayerForward& lf : fwd.layers) {
        loss = add(loss, record_aux_loss(lf.weights, lf.decisions, cfg.alpha));
      }
    }
    const double loss_value = loss.value()(0, 0);
    if (!std::isfinite(loss_value)) {
      RunRecord rec;
      rec.step = step;
      rec.loss = loss_value;
      rec.status = "diverged";
      emit(std::move(rec));
      result.diverged = true;
      result.message = "non-finite loss at step " + std::to_string(step);
      return result;
    }
    tape.backward(loss);

    std::vector<Matrix> grads;
    grads.reserve(vars.flat.size());
    for (const Var& v : vars.flat) grads.push_back(tape.grad(v));

    const bool record_now = step % cfg.record_every == 0 || step + 1 == cfg.steps;
    RunRecord rec;
    if (record_now) {
      std::size_t cursor = 0;
      for (const MoELayer& layer : model.layers) {
        ++cursor;  // gate
        Vector norms;
        for (std::size_t i = 0; i < layer.experts.size(); ++i) {
          const double up = frobenius_norm(grads[cursor++]);
          const double down = frobenius_norm(grads[cursor++]);
          norms.push_back(std::sqrt(up * up + down * down));
        }
        cursor += 2 * layer.shared.size();
        rec.grad_norms.push_back(std::move(norms));
      }
      detail::fill_grad_summary(rec, model);
    }

    optimizer.step(params, grads);

    for (std::size_t l = 0; l < model.layers.size(); ++l) {
      MoELayer& layer = model.layers[l];
      const Vector loads = selection_counts(fwd.layers[l].decisions, layer.config.n);
      for (std::size_t i = 0; i < loads.size(); ++i) counts[l][i] += loads[i];
      if (!cfg.bias_controller) continue;
      const std::size_t pool_n = layer.config.n - layer.config.r;
      const std::size_t pool_k = layer.config.k - layer.config.r;
      if (pool_n == 0 || pool_k == 0) continue;
      BiasControllerState state = BiasControllerState::for_batch(cfg.gamma, pool_n, pool_k, cfg.batch);
      state.exempt.assign(layer.config.n, false);
      for (std::size_t j : layer.config.condensers) state.exempt[j] = true;
      // Warm-up runs the balancing controller, so the lowest biases end up on
      // the consistently overloaded experts that become condensers.
      const bool sparsify_now = cfg.sparsify && !(wants_condensers && step < warmup);
      layer.router.bias = sparsify_now ? sparsify_step(state, loads, layer.router.bias)
                                       : bias_step(state, loads, layer.router.bias);
    }

    if (wants_condensers) {
      const bool warmup_done = warmup > 0 && step + 1 == warmup;
      const bool refresh = cfg.refresh_every > 0 && step + 1 > warmup &&
                           (step + 1 - warmup) % cfg.refresh_every == 0;
      if (warmup_done || refresh) detail::choose_condensers(model, cfg, counts);
    }

    if (record_now) {
      rec.step = step;
      rec.loss = loss_value;
      rec.activation_counts = counts;
      for (const MoELayer& layer : model.layers) {
        rec.bias.push_back(layer.router.bias);
        rec.condensers.push_back(layer.config.condensers);
      }
      rec.domain_loss = domain_losses(model, eval_sets);
      rec.eval_loss = mixture_loss(rec.domain_loss, mix.pi);
      emit(std::move(rec));
    }
  }
  result.final_domain_loss = domain_losses(model, eval_sets);
  result.final_eval_loss = mixture_loss(result.final_domain_loss, mix.pi);
  return result;
}

// ---------------------------------------------------------------------------
// Persistent-path ablation

struct AblationResult {
  double loss_with = 0.0;
  double loss_without = 0.0;
};

// loss_with keeps J ∪ TopK selection; loss_without demotes the condensers to
// ordinary routed experts with the same parameters, biases and budget k.
inline AblationResult ablate_persistent_path(const MoEModel& model, const Batch& eval) {
  if (model.condenser_count() == 0) throw ConfigError("ablate: model has no condenser experts");
  AblationResult out;
  out.loss_with = mean_squared_error(evaluate(model, eval.inputs).prediction, eval.targets);
  MoEModel demoted = model;
  demoted.clear_condensers();
  out.loss_without = mean_squared_error(evaluate(demoted, eval.inputs).prediction, eval.targets);
  return out;
}

// ---------------------------------------------------------------------------
// Frozen-model gradient diagnostics on a single layer with per-token loss
// 0.5 * ||h(x) - y||^2 (targets must be d_model wide).

inline Vector flatten(const ExpertParams& g) {
  Vector v(g.up.data().begin(), g.up.data().end());
  v.insert(v.end(), g.down.data().begin(), g.down.data().end());
  return v;
}

// Mean over tokens of the autodiff gradient w.r.t. each routed expert's params.
inline std::vector<Vector> layer_expert_gradients(const MoELayer& layer, const Batch& sample,
                                                  std::size_t chunk = 4096) {
  const std::size_t n = layer.config.n;
  const std::size_t total = sample.inputs.rows();
  std::vector<Vector> sums(n);
  for (std::size_t begin = 0; begin < total; begin += chunk) {
    const std::size_t end = std::min(total, begin + chunk);
    std::vector<std::size_t> rows(end - begin);
    std::iota(rows.begin(), rows.end(), begin);
    Tape tape;
    LayerVars vars;
    vars.gate = tape.leaf(layer.router.gate, false);
    for (const auto& e : layer.experts) vars.experts.push_back({tape.leaf(e.up), tape.leaf(e.down)});
    for (const auto& e : layer.shared) vars.shared.push_back({tape.leaf(e.up, false), tape.leaf(e.down, false)});
    Var x = gather_rows(tape.constant(sample.inputs), rows);
    Var y = gather_rows(tape.constant(sample.targets), rows);
    LayerForward lf = record_layer(tape, layer, vars, x, BackwardRegime::Masked);
    Var diff = sub(lf.output, y);
    Var loss = scale(sum(hadamard(diff, diff)), 0.5 / static_cast<double>(total));
    tape.backward(loss);
    for (std::size_t i = 0; i < n; ++i) {
      ExpertParams g{tape.grad(vars.experts[i].up), tape.grad(vars.experts[i].down)};
      Vector flat = flatten(g);
      if (sums[i].empty()) sums[i].assign(flat.size(), 0.0);
      for (std::size_t p = 0; p < flat.size(); ++p) sums[i][p] += flat[p];
    }
  }
  return sums;
}

struct AttenuationEntry {
  std::size_t expert = 0;
  double p = 0.0;               // empirical P(i in S)
  double relative_error = 0.0;  // ||p * E[Z|sel] - grad|| / ||grad||
  Vector gradient;
  Vector estimate;
};

// Compares the autodiff gradient on `gradient_sample` with p_i * E[Z_i | i in S]
// estimated independently on `estimate_sample` from hand-derived per-token Z_i.
inline std::vector<AttenuationEntry> attenuation_identity(const MoELayer& layer,
                                                          const Batch& gradient_sample,
                                                          const Batch& estimate_sample) {
  const std::size_t n = layer.config.n;
  const std::vector<Vector> grads = layer_expert_gradients(layer, gradient_sample);
  std::vector<Vector> z_sum(n);
  Vector selected(n, 0.0);
  const std::size_t T = estimate_sample.inputs.rows();
  for (std::size_t t = 0; t < T; ++t) {
    auto x = estimate_sample.inputs.row(t);
    auto [h, d] = forward_condenser(layer, x);
    Vector delta(h.size());
    for (std::size_t c = 0; c < h.size(); ++c) delta[c] = h[c] - estimate_sample.targets(t, c);
    for (std::size_t i : d.selected) {
      const Vector z = flatten(expert_param_gradient(layer.experts[i], x, delta, d.weights[i]));
      if (z_sum[i].empty()) z_sum[i].assign(z.size(), 0.0);
      for (std::size_t p = 0; p < z.size(); ++p) z_sum[i][p] += z[p];
      selected[i] += 1.0;
    }
  }
  std::vector<AttenuationEntry> out;
  for (std::size_t i = 0; i < n; ++i) {
    AttenuationEntry e;
    e.expert = i;
    e.p = selected[i] / static_cast<double>(T);
    e.gradient = grads[i];
    e.estimate.assign(grads[i].size(), 0.0);
    if (selected[i] > 0) {
      for (std::size_t p = 0; p < e.estimate.size(); ++p) e.estimate[p] = e.p * z_sum[i][p] / selected[i];
    }
    Vector diff = e.estimate;
    for (std::size_t p = 0; p < diff.size(); ++p) diff[p] -= e.gradient[p];
    const double scale_norm = norm2(e.gradient);
    e.relative_error = scale_norm > 0.0 ? norm2(diff) / scale_norm : norm2(diff);
    out.push_back(std::move(e));
  }
  return out;
}

struct LowerBoundCheck {
  double mean_gradient_norm = 0.0;  // E ||delta g_j dE_j/dtheta_j||
  double probability = 0.0;         // P(g_j >= eps)
  double conditional_norm = 0.0;    // E[||delta dE_j/dtheta_j|| | g_j >= eps]
  double bound = 0.0;               // eps * probability * conditional_norm
};

// Per-token gradient-norm lower bound for an always-selected expert j.
inline LowerBoundCheck gradient_lower_bound(const MoELayer& layer, const Batch& sample,
                                            std::size_t expert, double eps) {
  if (!layer.config.is_condenser(expert)) throw ConfigError("lower bound: expert is not a condenser");
  LowerBoundCheck out;
  double hits = 0.0, cond_sum = 0.0, total = 0.0;
  const std::size_t T = sample.inputs.rows();
  for (std::size_t t = 0; t < T; ++t) {
    auto x = sample.inputs.row(t);
    auto [h, d] = forward_condenser(layer, x);
    Vector delta(h.size());
    for (std::size_t c = 0; c < h.size(); ++c) delta[c] = h[c] - sample.targets(t, c);
    const double g = d.weights[expert];
    const double unscaled = norm2(flatten(expert_param_gradient(layer.experts[expert], x, delta, 1.0)));
    total += g * unscaled;
    if (g >= eps) {
      hits += 1.0;
      cond_sum += unscaled;
    }
  }
  out.mean_gradient_norm = total / double(T);
  out.probability = hits / double(T);
  out.conditional_norm = hits > 0 ? cond_sum / hits : 0.0;
  out.bound = eps * out.probability * out.conditional_norm;
  return out;
}

}  // namespace moecond
