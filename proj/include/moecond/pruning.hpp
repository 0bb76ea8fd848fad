#pragma once

// Expert importance scores (ES-Mag, ES-Act), the three compression strategies
// and the exhaustive best-subset oracle used to check top-k-by-norm.

#include <algorithm>
#include <cstddef>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "moecond/model.hpp"
#include "moecond/routing.hpp"

namespace moecond {

enum class ScoreKind { Magnitude, Activation };

inline std::string_view to_string(ScoreKind k) { return k == ScoreKind::Magnitude ? "es-mag" : "es-act"; }

inline ScoreKind parse_score_kind(std::string_view s) {
  if (s == "es-mag" || s == "ES-Mag") return ScoreKind::Magnitude;
  if (s == "es-act" || s == "ES-Act") return ScoreKind::Activation;
  throw ConfigError("unknown score kind: " + std::string(s));
}

struct ExpertScoreTable {
  ScoreKind kind = ScoreKind::Activation;
  std::vector<Vector> scores;  // layer x expert
};

// Per layer, per sample: a (tokens x n) matrix. For output traces the entry is
// ||w_i E_i(x)|| when i was selected and 0 otherwise; for gate traces it is
// w_i when selected and 0 otherwise.
struct ExpertTraces {
  std::vector<std::vector<Matrix>> output_norms;
  std::vector<std::vector<Matrix>> gates;
};

inline ExpertTraces collect_traces(const MoEModel& model, const std::vector<Matrix>& samples) {
  ExpertTraces traces;
  traces.output_norms.assign(model.layers.size(), {});
  traces.gates.assign(model.layers.size(), {});
  for (const Matrix& sample : samples) {
    const Evaluation ev = evaluate(model, sample);
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
      const MoELayer& layer = model.layers[l];
      Matrix norms(sample.rows(), layer.config.n);
      Matrix gates(sample.rows(), layer.config.n);
      for (std::size_t t = 0; t < sample.rows(); ++t) {
        const RouterDecision& d = ev.decisions[l][t];
        for (std::size_t i : d.selected) {
          const Vector e = expert_forward(layer.experts[i], ev.layer_inputs[l].row(t));
          norms(t, i) = d.weights[i] * norm2(e);
          gates(t, i) = d.weights[i];
        }
      }
      traces.output_norms[l].push_back(std::move(norms));
      traces.gates[l].push_back(std::move(gates));
    }
  }
  return traces;
}

namespace detail {

template <typename TokenValue>
ExpertScoreTable nested_mean(const std::vector<std::vector<Matrix>>& traces, ScoreKind kind,
                             TokenValue&& value) {
  ExpertScoreTable table;
  table.kind = kind;
  for (const auto& samples : traces) {
    if (samples.empty()) throw ConfigError("expert scores: empty trace");
    const std::size_t n = samples.front().cols();
    Vector score(n, 0.0);
    for (const Matrix& s : samples) {
      if (s.rows() == 0) throw ConfigError("expert scores: empty sample");
      if (s.cols() != n) throw DimensionError("expert scores: inconsistent expert count");
      for (std::size_t i = 0; i < n; ++i) {
        double per_sample = 0.0;
        for (std::size_t t = 0; t < s.rows(); ++t) per_sample += value(s(t, i));
        score[i] += per_sample / static_cast<double>(s.rows());
      }
    }
    for (double& v : score) v /= static_cast<double>(samples.size());
    table.scores.push_back(std::move(score));
  }
  if (table.scores.empty()) throw ConfigError("expert scores: empty trace");
  return table;
}

}  // namespace detail

// Mean over samples of mean over tokens of ||v_i||.
inline ExpertScoreTable es_mag(const std::vector<std::vector<Matrix>>& output_norms) {
  return detail::nested_mean(output_norms, ScoreKind::Magnitude, [](double v) { return v; });
}

// Mean over samples of mean over tokens of 1[g_i > 0] / K.
inline ExpertScoreTable es_act(const std::vector<std::vector<Matrix>>& gates, std::size_t K) {
  if (K < 1) throw ConfigError("es_act: K must be >= 1");
  const double inv = 1.0 / static_cast<double>(K);
  return detail::nested_mean(gates, ScoreKind::Activation,
                             [inv](double g) { return g > 0.0 ? inv : 0.0; });
}

enum class PruneStrategy { SmallDense, SmallMoE, InferenceReduce };

inline std::string_view to_string(PruneStrategy s) {
  switch (s) {
    case PruneStrategy::SmallDense: return "small-dense";
    case PruneStrategy::SmallMoE: return "small-moe";
    case PruneStrategy::InferenceReduce: return "inference-reduce";
  }
  return "small-moe";
}

inline PruneStrategy parse_prune_strategy(std::string_view s) {
  if (s == "small-dense" || s == "SmallDense") return PruneStrategy::SmallDense;
  if (s == "small-moe" || s == "SmallMoE") return PruneStrategy::SmallMoE;
  if (s == "inference-reduce" || s == "InferenceReduce") return PruneStrategy::InferenceReduce;
  throw ConfigError("unknown prune strategy: " + std::string(s));
}

struct PruneSpec {
  PruneStrategy strategy = PruneStrategy::SmallMoE;
  std::size_t n_retain = 0;
  std::size_t k_active = 0;

  void validate(std::size_t n, std::size_t k) const {
    if (n_retain > n) throw ConfigError("prune: n' exceeds the expert count");
    if (n_retain == 0 || k_active == 0) throw ConfigError("prune: n' and k' must be positive");
    switch (strategy) {
      case PruneStrategy::SmallDense:
        if (k_active != n_retain) throw ConfigError("prune: small-dense requires k' = n'");
        break;
      case PruneStrategy::SmallMoE:
        if (!(k_active < n_retain)) throw ConfigError("prune: small-moe requires k' < n'");
        break;
      case PruneStrategy::InferenceReduce:
        if (n_retain != n) throw ConfigError("prune: inference-reduce keeps n' = n");
        if (k_active > k) throw ConfigError("prune: inference-reduce requires k' <= k");
        break;
    }
  }
};

// Keeps the top-n' experts per layer by score (ties: lower index), drops their
// router columns and biases so softmax runs over survivors, and sets the
// per-token budget to k'. No retraining.
inline MoEModel apply_prune(const MoEModel& model, const PruneSpec& spec,
                            const ExpertScoreTable& scores) {
  spec.validate(model.config.n, model.config.k);
  if (scores.scores.size() != model.layers.size()) throw DimensionError("prune: score table layer count");
  MoEModel out = model;
  out.config.n = spec.n_retain;
  out.config.k = spec.k_active;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const MoELayer& src = model.layers[l];
    if (scores.scores[l].size() != src.config.n) throw DimensionError("prune: score table width");
    const std::vector<std::size_t> keep = top_k_select(scores.scores[l], spec.n_retain);
    MoELayer& dst = out.layers[l];
    dst.experts.clear();
    dst.router.bias.clear();
    dst.router.gate = Matrix(src.config.d_model, keep.size());
    std::vector<std::size_t> condensers;
    for (std::size_t c = 0; c < keep.size(); ++c) {
      const std::size_t i = keep[c];
      dst.experts.push_back(src.experts[i]);
      dst.router.bias.push_back(src.router.bias[i]);
      for (std::size_t r = 0; r < src.config.d_model; ++r) dst.router.gate(r, c) = src.router.gate(r, i);
      if (src.config.is_condenser(i) && condensers.size() < spec.k_active) condensers.push_back(c);
    }
    dst.config.n = keep.size();
    dst.config.k = spec.k_active;
    dst.config.condensers = std::move(condensers);
    dst.config.r = dst.config.condensers.size();
    dst.validate();
  }
  return out;
}

struct SubsetResult {
  std::vector<std::size_t> indices;  // ascending
  double error = 0.0;                // ||sum v - sum_{S} v||^2
};

// Exhaustive argmin over all C(n, k) subsets; rows of `outputs` are v_i.
// Ties keep the lexicographically first subset.
inline SubsetResult best_subset_oracle(const Matrix& outputs, std::size_t k) {
  const std::size_t n = outputs.rows();
  if (n > 12) throw ConfigError("best_subset_oracle: refusing exhaustive search for n > 12");
  if (k < 1 || k > n) throw ConfigError("best_subset_oracle: k out of range");
  SubsetResult best;
  best.error = std::numeric_limits<double>::infinity();
  std::vector<bool> pick(n, false);
  std::fill(pick.begin(), pick.begin() + static_cast<std::ptrdiff_t>(k), true);
  do {
    Vector residual(outputs.cols(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      if (pick[i]) continue;
      for (std::size_t c = 0; c < residual.size(); ++c) residual[c] += outputs(i, c);
    }
    const double err = dot(residual, residual);
    if (err < best.error) {
      best.error = err;
      best.indices.clear();
      for (std::size_t i = 0; i < n; ++i)
        if (pick[i]) best.indices.push_back(i);
    }
  } while (std::prev_permutation(pick.begin(), pick.end()));
  return best;
}

// The heuristic the oracle is compared against: top-k rows by norm.
inline std::vector<std::size_t> top_k_by_norm(const Matrix& outputs, std::size_t k) {
  Vector norms;
  for (std::size_t i = 0; i < outputs.rows(); ++i) norms.push_back(norm2(outputs.row(i)));
  return top_k_select(norms, k);
}

}  // namespace moecond
