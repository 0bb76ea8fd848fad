#pragma once

// Post-hoc diagnostics: router divergence, layer output divergence,
// activation inequality and down-projection correlation shifts.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <utility>
#include <vector>

#include "moecond/model.hpp"

namespace moecond {

// KL(p || q) for strictly positive distributions.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw DimensionError("kl_divergence: length mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    total += p[i] * std::log(p[i] / q[i]);
  }
  return total;
}

// Per-layer mean over tokens of KL(w_base || w_tuned).
inline Vector router_kl(const std::vector<std::vector<RouterDecision>>& base,
                        const std::vector<std::vector<RouterDecision>>& tuned) {
  if (base.size() != tuned.size()) throw DimensionError("router_kl: layer count mismatch");
  Vector out;
  for (std::size_t l = 0; l < base.size(); ++l) {
    if (base[l].size() != tuned[l].size() || base[l].empty()) {
      throw DimensionError("router_kl: both models must see the same non-empty token set");
    }
    double total = 0.0;
    for (std::size_t t = 0; t < base[l].size(); ++t) {
      total += kl_divergence(base[l][t].weights, tuned[l][t].weights);
    }
    out.push_back(total / static_cast<double>(base[l].size()));
  }
  return out;
}

inline Vector router_kl(const MoEModel& base, const MoEModel& tuned, const Matrix& tokens) {
  return router_kl(evaluate(base, tokens).decisions, evaluate(tuned, tokens).decisions);
}

// Per-layer mean of ||h_base - h_tuned|| / (||h_base|| + 1e-8). Both layers see
// the base model's input to that layer and route with their own weights.
inline Vector weighted_output_divergence(const MoEModel& base, const MoEModel& tuned,
                                         const Matrix& tokens) {
  if (base.layers.size() != tuned.layers.size()) throw DimensionError("divergence: layer count mismatch");
  const Evaluation ev = evaluate(base, tokens);
  Vector out;
  for (std::size_t l = 0; l < base.layers.size(); ++l) {
    const Matrix& inputs = ev.layer_inputs[l];
    double total = 0.0;
    for (std::size_t t = 0; t < inputs.rows(); ++t) {
      const Vector hb = forward_condenser(base.layers[l], inputs.row(t)).first;
      const Vector ht = forward_condenser(tuned.layers[l], inputs.row(t)).first;
      Vector diff = hb;
      for (std::size_t c = 0; c < diff.size(); ++c) diff[c] -= ht[c];
      total += norm2(diff) / (norm2(hb) + 1e-8);
    }
    out.push_back(total / static_cast<double>(inputs.rows()));
  }
  return out;
}

struct LorenzGini {
  std::vector<std::pair<double, double>> points;  // (population share, activation share)
  double gini = 0.0;
};

// Gini = sum_ij |x_i - x_j| / (2 n^2 mean), via sorted prefix sums.
inline LorenzGini lorenz_gini(std::span<const double> counts) {
  if (counts.empty()) throw ConfigError("lorenz_gini: empty counts");
  std::vector<double> sorted(counts.begin(), counts.end());
  for (double c : sorted) {
    if (c < 0.0 || !std::isfinite(c)) throw ConfigError("lorenz_gini: counts must be finite and >= 0");
  }
  std::sort(sorted.begin(), sorted.end());
  const double total = std::accumulate(sorted.begin(), sorted.end(), 0.0);
  if (total <= 0.0) throw ConfigError("lorenz_gini: all counts are zero");
  const double n = static_cast<double>(sorted.size());

  LorenzGini out;
  out.points.emplace_back(0.0, 0.0);
  double running = 0.0;
  double weighted = 0.0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    running += sorted[i];
    weighted += (2.0 * static_cast<double>(i + 1) - n - 1.0) * sorted[i];
    const bool last = i + 1 == sorted.size();
    out.points.emplace_back(last ? 1.0 : static_cast<double>(i + 1) / n, last ? 1.0 : running / total);
  }
  out.gini = weighted / (n * total);
  return out;
}

// Pearson correlation of two equally sized vectors after mean-centering;
// empty when either has zero variance.
inline std::optional<double> pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw DimensionError("pearson: length mismatch");
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(a.size());
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / static_cast<double>(b.size());
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    ab += da * db;
    aa += da * da;
    bb += db * db;
  }
  if (aa <= 0.0 || bb <= 0.0) return std::nullopt;
  return std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
}

struct ExpertRef {
  bool shared = false;  // static shared expert vs routed pool index
  std::size_t index = 0;
  bool operator==(const ExpertRef&) const = default;
};

inline const Matrix& down_projection(const MoELayer& layer, ExpertRef ref) {
  return ref.shared ? layer.shared.at(ref.index).down : layer.experts.at(ref.index).down;
}

struct CorrelationPair {
  std::size_t layer = 0;
  ExpertRef shared;
  ExpertRef routed;
  std::optional<double> base;
  std::vector<std::optional<double>> tuned;      // one per tuned checkpoint
  std::vector<std::optional<double>> delta_pct;  // 100 (C_s - C_1) / |C_1|
};

struct CorrelationReport {
  std::vector<CorrelationPair> pairs;
  std::vector<Vector> layer_mean_delta;  // [setting][layer], NaN when no valid pair
  Vector model_mean_delta;               // per setting
  Vector model_std_delta;                // per setting, population std over layers
};

// Sets are per layer: which experts count as shared/condenser and which as
// routed. Pearson is taken on the vectorized down-projection matrices.
inline CorrelationReport correlation_report(const MoEModel& base, const std::vector<MoEModel>& tuned,
                                            const std::vector<std::vector<ExpertRef>>& shared_set,
                                            const std::vector<std::vector<ExpertRef>>& routed_set) {
  const std::size_t L = base.layers.size();
  if (shared_set.size() != L || routed_set.size() != L) throw DimensionError("correlation: set layer count");
  for (const MoEModel& m : tuned) {
    if (m.layers.size() != L) throw DimensionError("correlation: layer count mismatch");
  }
  CorrelationReport report;
  report.layer_mean_delta.assign(tuned.size(), Vector(L, std::nan("")));
  for (std::size_t l = 0; l < L; ++l) {
    Vector sums(tuned.size(), 0.0);
    std::vector<std::size_t> counts(tuned.size(), 0);
    for (const ExpertRef& s : shared_set[l]) {
      for (const ExpertRef& r : routed_set[l]) {
        CorrelationPair pair{l, s, r, std::nullopt, {}, {}};
        const Matrix& bs = down_projection(base.layers[l], s);
        const Matrix& br = down_projection(base.layers[l], r);
        if (!bs.same_shape(br)) throw DimensionError("correlation: down-projection shapes differ");
        pair.base = pearson(bs.data(), br.data());
        for (std::size_t m = 0; m < tuned.size(); ++m) {
          const Matrix& ts = down_projection(tuned[m].layers[l], s);
          const Matrix& tr = down_projection(tuned[m].layers[l], r);
          if (!ts.same_shape(bs) || !tr.same_shape(br)) throw DimensionError("correlation: checkpoint shapes differ");
          const auto c = pearson(ts.data(), tr.data());
          pair.tuned.push_back(c);
          std::optional<double> delta;
          if (pair.base && c && *pair.base != 0.0) delta = 100.0 * (*c - *pair.base) / std::abs(*pair.base);
          pair.delta_pct.push_back(delta);
          if (delta) {
            sums[m] += *delta;
            ++counts[m];
          }
        }
        report.pairs.push_back(std::move(pair));
      }
    }
    for (std::size_t m = 0; m < tuned.size(); ++m) {
      if (counts[m] > 0) report.layer_mean_delta[m][l] = sums[m] / static_cast<double>(counts[m]);
    }
  }
  for (std::size_t m = 0; m < tuned.size(); ++m) {
    double total = 0.0;
    std::size_t valid = 0;
    for (double v : report.layer_mean_delta[m]) {
      if (std::isnan(v)) continue;
      total += v;
      ++valid;
    }
    const double mean = valid ? total / double(valid) : std::nan("");
    double var = 0.0;
    for (double v : report.layer_mean_delta[m]) {
      if (!std::isnan(v)) var += (v - mean) * (v - mean);
    }
    report.model_mean_delta.push_back(mean);
    report.model_std_delta.push_back(valid ? std::sqrt(var / double(valid)) : std::nan(""));
  }
  return report;
}

// Shared/condenser vs routed sets for a model: static shared experts plus the
// condenser set J on one side, every other routed expert on the other.
inline std::pair<std::vector<std::vector<ExpertRef>>, std::vector<std::vector<ExpertRef>>>
default_correlation_sets(const MoEModel& reference) {
  std::vector<std::vector<ExpertRef>> shared, routed;
  for (const MoELayer& layer : reference.layers) {
    std::vector<ExpertRef> s, r;
    for (std::size_t k = 0; k < layer.shared.size(); ++k) s.push_back({true, k});
    for (std::size_t i = 0; i < layer.config.n; ++i) {
      if (layer.config.is_condenser(i)) s.push_back({false, i});
      else r.push_back({false, i});
    }
    shared.push_back(std::move(s));
    routed.push_back(std::move(r));
  }
  return {shared, routed};
}

struct ActivationStats {
  std::size_t tokens = 0;
  std::vector<Vector> counts;         // layer x n
  std::vector<Vector> probabilities;  // layer x n, count / tokens
};

inline ActivationStats activation_histogram(const MoEModel& model, const Matrix& corpus) {
  if (corpus.rows() == 0) throw ConfigError("activation_histogram: empty corpus");
  const Evaluation ev = evaluate(model, corpus);
  ActivationStats stats;
  stats.tokens = corpus.rows();
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    Vector c = selection_counts(ev.decisions[l], model.layers[l].config.n);
    Vector p = c;
    for (double& v : p) v /= static_cast<double>(stats.tokens);
    stats.counts.push_back(std::move(c));
    stats.probabilities.push_back(std::move(p));
  }
  return stats;
}

}  // namespace moecond
