#pragma once

// The MoE feed-forward layer.
//
// Output for one token x:
//
//   h = sum_{i in S(x)} w_i(x) E_i(x) + sum_k Shared_k(x)
//
// with w = softmax(x · gate) over all n experts (never renormalized over S) and
// S chosen from the biased logits x · gate + b. When a condenser set J is
// configured, S = J ∪ TopK over the remaining experts with budget k - |J|, and
// condensers are weighted by the same softmax as routed experts.
//
// Two evaluation paths are provided: per-token plain functions (forward_standard,
// forward_condenser) and batched recording onto a Tape (record_layer). Both sum
// the selected experts in ascending index order, then the shared experts.

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "moecond/routing.hpp"
#include "moecond/tape.hpp"
#include "moecond/tensor.hpp"
#include "moecond/types.hpp"

namespace moecond {

struct MoELayer {
  MoEConfig config;
  RouterParams router;
  std::vector<ExpertParams> experts;
  std::vector<ExpertParams> shared;

  void validate() const {
    config.validate();
    const auto check_expert = [&](const ExpertParams& e, const char* what) {
      if (e.up.rows() != config.d_model || e.up.cols() != config.d_hidden ||
          e.down.rows() != config.d_hidden || e.down.cols() != config.d_model) {
        throw DimensionError(std::string(what) + ": expert shape inconsistent with config");
      }
    };
    if (experts.size() != config.n) throw DimensionError("MoELayer: expert count != n");
    if (shared.size() != config.n_shared) throw DimensionError("MoELayer: shared count mismatch");
    for (const auto& e : experts) check_expert(e, "routed");
    for (const auto& e : shared) check_expert(e, "shared");
    if (router.gate.rows() != config.d_model || router.gate.cols() != config.n) {
      throw DimensionError("MoELayer: router gate must be d_model x n");
    }
    if (router.bias.size() != config.n) throw DimensionError("MoELayer: bias length != n");
  }
};

inline Vector expert_forward(const ExpertParams& p, std::span<const double> x) {
  if (x.size() != p.up.rows()) throw DimensionError("expert_forward: input length mismatch");
  Matrix hidden = matmul(Matrix::row_vector(x), p.up);
  for (double& v : hidden.data()) v = silu(v);
  const Matrix out = matmul(hidden, p.down);
  return Vector(out.data().begin(), out.data().end());
}

// Parameter gradient of <upstream, scale * E(x)> for one token, by hand.
inline ExpertParams expert_param_gradient(const ExpertParams& p, std::span<const double> x,
                                          std::span<const double> upstream, double scale) {
  const Matrix xr = Matrix::row_vector(x);
  const Matrix pre = matmul(xr, p.up);
  Matrix act = pre;
  for (double& v : act.data()) v = silu(v);
  Matrix g_out = Matrix::row_vector(upstream);
  for (double& v : g_out.data()) v *= scale;
  ExpertParams grad;
  grad.down = matmul_tn(act, g_out);
  Matrix g_hidden = matmul_nt(g_out, p.down);
  for (std::size_t j = 0; j < g_hidden.cols(); ++j) g_hidden(0, j) *= silu_derivative(pre(0, j));
  grad.up = matmul_tn(xr, g_hidden);
  return grad;
}

inline Vector router_logits(const MoELayer& layer, std::span<const double> x) {
  if (x.size() != layer.config.d_model) throw DimensionError("router: input length mismatch");
  const Matrix s = matmul(Matrix::row_vector(x), layer.router.gate);
  return Vector(s.data().begin(), s.data().end());
}

inline RouterDecision route(const MoELayer& layer, std::span<const double> x) {
  return make_decision(router_logits(layer, x), layer.router.bias, layer.config.k,
                       layer.config.condensers);
}

namespace detail {

inline Vector combine(const MoELayer& layer, const RouterDecision& d, std::span<const double> x) {
  Vector h(layer.config.d_model, 0.0);
  for (std::size_t i : d.selected) {
    const Vector e = expert_forward(layer.experts[i], x);
    for (std::size_t c = 0; c < h.size(); ++c) h[c] += d.weights[i] * e[c];
  }
  for (const ExpertParams& s : layer.shared) {
    const Vector e = expert_forward(s, x);
    for (std::size_t c = 0; c < h.size(); ++c) h[c] += e[c];
  }
  return h;
}

}  // namespace detail

inline std::pair<Vector, RouterDecision> forward_standard(const MoELayer& layer,
                                                          std::span<const double> x) {
  if (layer.config.k > layer.config.n) throw ConfigError("forward_standard: k > n");
  if (layer.config.r != 0 || !layer.config.condensers.empty()) {
    throw ConfigError("forward_standard: requires r = 0");
  }
  RouterDecision d = route(layer, x);
  Vector h = detail::combine(layer, d, x);
  return {std::move(h), std::move(d)};
}

inline std::pair<Vector, RouterDecision> forward_condenser(const MoELayer& layer,
                                                           std::span<const double> x) {
  layer.config.validate();
  RouterDecision d = route(layer, x);
  Vector h = detail::combine(layer, d, x);
  return {std::move(h), std::move(d)};
}

// ---------------------------------------------------------------------------
// Tape recording

struct ExpertVars {
  Var up;
  Var down;
};

struct LayerVars {
  Var gate;
  std::vector<ExpertVars> experts;
  std::vector<ExpertVars> shared;
};

struct LayerForward {
  Var output;
  Var weights;  // B x n softmax of unbiased logits
  std::vector<RouterDecision> decisions;
  std::vector<std::vector<std::size_t>> rows_per_expert;  // tokens routed to expert i
};

inline Var record_expert(Var x, const ExpertVars& e) {
  return matmul(silu(matmul(x, e.up)), e.down);
}

// Top-k gate node: forward is mask ⊙ w. Backward applies the regime's rule:
// mask for Masked/Condenser, identity for StraightThrough.
inline Var record_topk_gate(Var weights, const Matrix& mask, BackwardRegime regime) {
  Matrix out = weights.value();
  require_same_shape(out, mask, "topk_gate");
  auto o = out.data();
  auto m = mask.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= m[i];
  const bool identity = regime == BackwardRegime::StraightThrough;
  return weights.tape->record(std::move(out), {weights},
                              [weights, mask, identity](Tape& tape, std::size_t self) {
                                const Matrix& g = tape.grad_buffer(self);
                                Matrix& gw = tape.grad_buffer(weights.id);
                                auto src = g.data();
                                auto dst = gw.data();
                                auto mv = mask.data();
                                for (std::size_t i = 0; i < src.size(); ++i) {
                                  dst[i] += identity ? src[i] : src[i] * mv[i];
                                }
                              });
}

// Straight-through recompute node: forward identity on h. Backward passes the
// gradient to h and, for every unselected (token, expert) pair, adds
// <dL/dh_t, E_i(x_t)> to the gate gradient, re-evaluating E_i on the spot.
// `layer` must outlive the backward pass and stay unmodified until then.
inline Var record_dense_recompute(Var h, Var gates, Matrix inputs, const Matrix& mask,
                                  const MoELayer& layer) {
  Matrix out = h.value();
  const MoELayer* lp = &layer;
  return h.tape->record(
      std::move(out), {h, gates},
      [h, gates, inputs = std::move(inputs), mask, lp](Tape& tape, std::size_t self) {
        const Matrix& g = tape.grad_buffer(self);
        if (tape.requires_grad(h.id)) add_inplace(tape.grad_buffer(h.id), g);
        if (!tape.requires_grad(gates.id)) return;
        Matrix& gc = tape.grad_buffer(gates.id);
        for (std::size_t t = 0; t < mask.rows(); ++t) {
          for (std::size_t i = 0; i < mask.cols(); ++i) {
            if (mask(t, i) != 0.0) continue;
            const Vector e = expert_forward(lp->experts[i], inputs.row(t));
            gc(t, i) += dot(g.row(t), e);
          }
        }
      });
}

inline LayerForward record_layer(Tape& tape, const MoELayer& layer, const LayerVars& vars, Var x,
                                 BackwardRegime regime) {
  const MoEConfig& cfg = layer.config;
  const Matrix inputs = x.value();
  if (inputs.cols() != cfg.d_model) throw DimensionError("record_layer: input width mismatch");
  const std::size_t batch = inputs.rows();

  LayerForward fwd;
  Var logits = matmul(x, vars.gate);
  fwd.weights = softmax_rows(logits);

  const Matrix logit_values = logits.value();
  Matrix mask(batch, cfg.n);
  fwd.rows_per_expert.assign(cfg.n, {});
  fwd.decisions.reserve(batch);
  for (std::size_t t = 0; t < batch; ++t) {
    auto row = logit_values.row(t);
    fwd.decisions.push_back(
        make_decision(Vector(row.begin(), row.end()), layer.router.bias, cfg.k, cfg.condensers));
    for (std::size_t i : fwd.decisions.back().selected) {
      mask(t, i) = 1.0;
      fwd.rows_per_expert[i].push_back(t);
    }
  }

  Var gates = record_topk_gate(fwd.weights, mask, regime);

  bool have_output = false;
  Var out{};
  const auto accumulate = [&](Var contribution) {
    out = have_output ? add(out, contribution) : contribution;
    have_output = true;
  };

  for (std::size_t i = 0; i < cfg.n; ++i) {
    const auto& rows = fwd.rows_per_expert[i];
    if (rows.empty()) continue;
    std::vector<std::pair<std::size_t, std::size_t>> entries;
    entries.reserve(rows.size());
    for (std::size_t t : rows) entries.emplace_back(t, i);
    Var y = record_expert(gather_rows(x, rows), vars.experts[i]);
    Var weighted = scale_rows(y, gather_entries(gates, std::move(entries)));
    accumulate(scatter_rows(weighted, rows, batch));
  }
  for (const ExpertVars& s : vars.shared) accumulate(record_expert(x, s));
  if (!have_output) accumulate(tape.constant(Matrix(batch, cfg.d_model)));

  if (regime == BackwardRegime::StraightThrough) {
    out = record_dense_recompute(out, gates, inputs, mask, layer);
  }
  fwd.output = out;
  return fwd;
}

}  // namespace moecond
