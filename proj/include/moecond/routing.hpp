#pragma once

// Selection rules, bias controllers, the auxiliary balance loss and the
// per-token router backward rules for the three gradient regimes.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "moecond/tensor.hpp"
#include "moecond/types.hpp"

namespace moecond {

// Indices of the k largest scores, ascending. Ties go to the lower index.
inline std::vector<std::size_t> top_k_select(std::span<const double> scores, std::size_t k) {
  if (k < 1 || k > scores.size()) {
    throw ConfigError("top_k_select: k=" + std::to_string(k) + " out of range for " +
                      std::to_string(scores.size()) + " scores");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

// S = J ∪ TopK_{i∉J}(biased, k - |J|), ascending. With J empty this is plain TopK.
inline std::vector<std::size_t> select_active_set(std::span<const double> biased, std::size_t k,
                                                  std::span<const std::size_t> condensers) {
  if (condensers.empty()) return top_k_select(biased, k);
  if (condensers.size() > k) throw ConfigError("select_active_set: |J| exceeds k");
  std::vector<std::size_t> selected(condensers.begin(), condensers.end());
  const std::size_t remaining = k - condensers.size();
  if (remaining > 0) {
    std::vector<std::size_t> pool;
    std::vector<double> pool_scores;
    for (std::size_t i = 0; i < biased.size(); ++i) {
      if (std::find(condensers.begin(), condensers.end(), i) != condensers.end()) continue;
      pool.push_back(i);
      pool_scores.push_back(biased[i]);
    }
    for (std::size_t local : top_k_select(pool_scores, remaining)) selected.push_back(pool[local]);
  }
  std::sort(selected.begin(), selected.end());
  return selected;
}

// Fills selection-dependent fields of a decision from its logits and the bias.
inline RouterDecision make_decision(Vector logits, std::span<const double> bias, std::size_t k,
                                    std::span<const std::size_t> condensers) {
  if (bias.size() != logits.size()) throw DimensionError("make_decision: bias length mismatch");
  RouterDecision d;
  d.biased.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) d.biased[i] = logits[i] + bias[i];
  d.weights = softmax(logits);
  d.logits = std::move(logits);
  d.selected = select_active_set(d.biased, k, condensers);
  d.condenser.reserve(d.selected.size());
  for (std::size_t i : d.selected) {
    d.condenser.push_back(std::find(condensers.begin(), condensers.end(), i) != condensers.end());
  }
  return d;
}

// Gradient of the loss w.r.t. the unbiased router logits of one token.
//
// `upstream` is dL/dh at the layer output and `expert_outputs` holds E_i(x) in
// row i. Masked and Condenser only use rows of selected experts; StraightThrough
// needs every row. The bias never receives gradient.
inline Vector backward_router(BackwardRegime regime, const RouterDecision& decision,
                              std::span<const double> upstream, const Matrix& expert_outputs) {
  const std::size_t n = decision.weights.size();
  if (expert_outputs.rows() != n || expert_outputs.cols() != upstream.size()) {
    throw DimensionError("backward_router: expert outputs must be n x d_model");
  }
  if (decision.condenser.size() != decision.selected.size()) {
    throw StateError("backward_router: malformed decision");
  }
  if (decision.has_condensers() && regime != BackwardRegime::Condenser) {
    throw StateError("backward_router: decision carries condensers but regime is " +
                     std::string(to_string(regime)));
  }

  Vector grad_w(n, 0.0);
  if (regime == BackwardRegime::StraightThrough) {
    for (std::size_t i = 0; i < n; ++i) grad_w[i] = dot(upstream, expert_outputs.row(i));
  } else {
    for (std::size_t i : decision.selected) grad_w[i] = dot(upstream, expert_outputs.row(i));
  }

  const double inner = dot(grad_w, decision.weights);
  Vector grad_s(n);
  for (std::size_t i = 0; i < n; ++i) grad_s[i] = decision.weights[i] * (grad_w[i] - inner);
  return grad_s;
}

// Per-expert selection counts over a sequence of decisions.
inline Vector selection_counts(std::span<const RouterDecision> decisions, std::size_t n) {
  Vector counts(n, 0.0);
  for (const RouterDecision& d : decisions)
    for (std::size_t i : d.selected) counts.at(i) += 1.0;
  return counts;
}

// f_i = n/(K T) * count_i, the aux-loss frequency term.
inline Vector balance_frequencies(std::span<const RouterDecision> decisions) {
  if (decisions.empty()) throw ConfigError("aux_balance_loss: need at least one token");
  const std::size_t n = decisions.front().weights.size();
  const double K = static_cast<double>(decisions.front().selected.size());
  const double T = static_cast<double>(decisions.size());
  Vector f = selection_counts(decisions, n);
  for (double& v : f) v *= static_cast<double>(n) / (K * T);
  return f;
}

// L = alpha * sum_i f_i P_i with P_i the mean gate probability of expert i.
inline double aux_balance_loss(std::span<const RouterDecision> decisions, double alpha) {
  const Vector f = balance_frequencies(decisions);
  const std::size_t n = f.size();
  Vector P(n, 0.0);
  for (const RouterDecision& d : decisions)
    for (std::size_t i = 0; i < n; ++i) P[i] += d.weights[i];
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) loss += f[i] * P[i] / static_cast<double>(decisions.size());
  return alpha * loss;
}

// ---------------------------------------------------------------------------
// Bias controllers

struct BiasControllerState {
  double gamma = 1e-4;
  double target_load = 0.0;  // expected selections per expert in one batch
  std::vector<bool> exempt;  // experts the controller leaves untouched (e.g. condensers)

  static BiasControllerState for_batch(double gamma, std::size_t n, std::size_t k,
                                       std::size_t tokens) {
    if (gamma < 0.0) throw ConfigError("bias controller: gamma must be non-negative");
    BiasControllerState s;
    s.gamma = gamma;
    s.target_load = static_cast<double>(tokens) * static_cast<double>(k) / static_cast<double>(n);
    s.exempt.assign(n, false);
    return s;
  }

  bool is_exempt(std::size_t i) const { return i < exempt.size() && exempt[i]; }
};

// Load-balancing controller: overloaded experts lose gamma, underloaded gain it.
inline Vector bias_step(const BiasControllerState& state, std::span<const double> loads,
                        Vector bias) {
  if (loads.size() != bias.size()) throw DimensionError("bias_step: load/bias length mismatch");
  for (std::size_t i = 0; i < bias.size(); ++i) {
    if (state.is_exempt(i)) continue;
    if (loads[i] > state.target_load) {
      bias[i] -= state.gamma;
    } else if (loads[i] < state.target_load) {
      bias[i] += state.gamma;
    }
  }
  return bias;
}

// Sparsifying controller: experts whose batch load is under half the uniform
// target sink by gamma per step; the rest move back up but never above zero.
inline Vector sparsify_step(const BiasControllerState& state, std::span<const double> loads,
                            Vector bias) {
  if (loads.size() != bias.size()) throw DimensionError("sparsify_step: load/bias length mismatch");
  const double threshold = 0.5 * state.target_load;
  for (std::size_t i = 0; i < bias.size(); ++i) {
    if (state.is_exempt(i)) continue;
    if (loads[i] < threshold) {
      bias[i] -= state.gamma;
    } else {
      bias[i] = std::min(bias[i] + state.gamma, 0.0);
    }
  }
  return bias;
}

// ---------------------------------------------------------------------------
// Condenser selection

enum class CondenserStrategy { LowBias, HighBias, LowActivation, HighActivation, Random };

inline std::string_view to_string(CondenserStrategy s) {
  switch (s) {
    case CondenserStrategy::LowBias: return "low-bias";
    case CondenserStrategy::HighBias: return "high-bias";
    case CondenserStrategy::LowActivation: return "low-activation";
    case CondenserStrategy::HighActivation: return "high-activation";
    case CondenserStrategy::Random: return "random";
  }
  return "low-bias";
}

inline CondenserStrategy parse_condenser_strategy(std::string_view s) {
  if (s == "low-bias") return CondenserStrategy::LowBias;
  if (s == "high-bias") return CondenserStrategy::HighBias;
  if (s == "low-activation") return CondenserStrategy::LowActivation;
  if (s == "high-activation") return CondenserStrategy::HighActivation;
  if (s == "random") return CondenserStrategy::Random;
  throw ConfigError("unknown condenser strategy: " + std::string(s));
}

namespace detail {

inline std::vector<std::size_t> lowest(std::span<const double> v, std::size_t r) {
  std::vector<double> negated(v.begin(), v.end());
  for (double& x : negated) x = -x;
  return top_k_select(negated, r);
}

// r extreme biases (lowest when sign = 1, highest when sign = -1). Every
// expert within `tolerance` of the r-th extreme counts as tied; ties go to the
// most activated (lowest) or least activated (highest), then to lower index.
inline std::vector<std::size_t> by_bias(std::span<const double> bias, std::size_t r, double sign,
                                        std::span<const double> activation, double tolerance) {
  std::vector<double> key(bias.begin(), bias.end());
  for (double& x : key) x *= sign;
  const std::vector<std::size_t> plain = lowest(key, r);
  if (activation.empty() || tolerance < 0.0) return plain;
  double cutoff = key[plain.front()];
  for (std::size_t i : plain) cutoff = std::max(cutoff, key[i]);
  cutoff += tolerance;
  // Strictly better than the tie band are kept outright.
  std::vector<std::size_t> chosen, band;
  for (std::size_t i = 0; i < key.size(); ++i) {
    if (key[i] < cutoff - 2.0 * tolerance) chosen.push_back(i);
    else if (key[i] <= cutoff) band.push_back(i);
  }
  if (chosen.size() > r) return plain;
  std::vector<double> preference;
  for (std::size_t i : band) preference.push_back(sign * activation[i]);
  for (std::size_t c : top_k_select(preference, r - chosen.size())) chosen.push_back(band[c]);
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

}  // namespace detail

// The condenser set J (ascending). `activation` holds per-expert selection
// counts; the activation strategies need it and the bias strategies use it to
// break ties among biases that sit within `bias_tolerance` of each other
// (pass the controller step so saturated biases count as equal).
inline std::vector<std::size_t> select_condensers(std::span<const double> bias, std::size_t r,
                                                  CondenserStrategy strategy,
                                                  std::span<const double> activation,
                                                  std::uint64_t seed = 1234,
                                                  double bias_tolerance = 0.0) {
  const std::size_t n = bias.size();
  if (r > n) throw ConfigError("select_condensers: r exceeds expert count");
  if (r == 0) return {};
  const bool needs_activation = strategy == CondenserStrategy::LowActivation ||
                                strategy == CondenserStrategy::HighActivation;
  if ((needs_activation || !activation.empty()) && activation.size() != n) {
    throw DimensionError("select_condensers: activation stats length mismatch");
  }
  switch (strategy) {
    case CondenserStrategy::LowBias: return detail::by_bias(bias, r, 1.0, activation, bias_tolerance);
    case CondenserStrategy::HighBias: return detail::by_bias(bias, r, -1.0, activation, bias_tolerance);
    case CondenserStrategy::LowActivation: return detail::lowest(activation, r);
    case CondenserStrategy::HighActivation: return top_k_select(activation, r);
    case CondenserStrategy::Random: {
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::mt19937_64 rng(seed);
      // Fisher-Yates with an explicit draw so the result does not depend on
      // the standard library's shuffle implementation.
      for (std::size_t i = n - 1; i > 0; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
        std::swap(order[i], order[j]);
      }
      order.resize(r);
      std::sort(order.begin(), order.end());
      return order;
    }
  }
  return {};
}

}  // namespace moecond
