#pragma once

// Reverse-mode differentiation over Matrix values.
//
// A Tape records primitive operations in execution order. Each node keeps its
// forward value and, once backward() runs, a gradient buffer of the same shape.
// Backward visits nodes strictly in reverse recording order, so gradient
// accumulation order (and therefore the result bit pattern) is fixed.
//
// Custom backward rules are attached through Tape::record(), which is how the
// top-k gate node and the straight-through recompute node in moe_layer.hpp are
// built.

#include <cstddef>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "moecond/tensor.hpp"

namespace moecond {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Tape {
 public:
  // Called with the tape and the id of the node whose gradient is complete.
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Matrix value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), Matrix{}, requires_grad, false, nullptr});
    return Var{this, nodes_.size() - 1};
  }

  Var constant(Matrix value) { return leaf(std::move(value), false); }

  Var record(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
    bool needs = false;
    for (const Var& in : inputs) {
      check_owned(in);
      needs = needs || nodes_[in.id].requires_grad;
    }
    nodes_.push_back(
        Node{std::move(value), Matrix{}, needs, false, needs ? std::move(backward) : nullptr});
    return Var{this, nodes_.size() - 1};
  }

  const Matrix& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Gradient buffer, allocated to the forward shape on first touch.
  Matrix& grad_buffer(std::size_t id) {
    Node& node = nodes_.at(id);
    if (!node.has_grad) {
      node.grad = Matrix(node.value.rows(), node.value.cols());
      node.has_grad = true;
    }
    return node.grad;
  }

  bool has_grad(std::size_t id) const { return nodes_.at(id).has_grad; }

  Matrix grad(Var v) const {
    check_owned(v);
    const Node& node = nodes_[v.id];
    if (node.has_grad) return node.grad;
    return Matrix(node.value.rows(), node.value.cols());
  }

  void backward(Var root) {
    check_owned(root);
    const Matrix& out = nodes_[root.id].value;
    if (out.rows() != 1 || out.cols() != 1) {
      throw DimensionError("backward: root must be a 1x1 scalar, got " + shape_string(out));
    }
    grad_buffer(root.id)(0, 0) += 1.0;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.has_grad || !node.backward) continue;
      node.backward(*this, i);
    }
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };

  void check_owned(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) {
      throw StateError("variable does not belong to this tape");
    }
  }

  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape->value(id); }

namespace detail {

// Adds `g` into the gradient of `target` if it participates in differentiation.
inline void accumulate(Tape& tape, Var target, const Matrix& g) {
  if (!tape.requires_grad(target.id)) return;
  add_inplace(tape.grad_buffer(target.id), g);
}

inline bool wants(Tape& tape, Var v) { return tape.requires_grad(v.id); }

}  // namespace detail

inline Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  Matrix out = matmul(a.value(), b.value());
  return t.record(std::move(out), {a, b}, [a, b](Tape& tape, std::size_t self) {
    const Matrix& g = tape.grad_buffer(self);
    if (detail::wants(tape, a)) add_inplace(tape.grad_buffer(a.id), matmul_nt(g, b.value()));
    if (detail::wants(tape, b)) add_inplace(tape.grad_buffer(b.id), matmul_tn(a.value(), g));
  });
}

inline Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Matrix out = a.value();
  add_inplace(out, b.value());
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& tape, std::size_t self) {
    const Matrix& g = tape.grad_buffer(self);
    detail::accumulate(tape, a, g);
    detail::accumulate(tape, b, g);
  });
}

inline Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Matrix out = a.value();
  axpy_inplace(out, -1.0, b.value());
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& tape, std::size_t self) {
    const Matrix& g = tape.grad_buffer(self);
    detail::accumulate(tape, a, g);
    if (detail::wants(tape, b)) axpy_inplace(tape.grad_buffer(b.id), -1.0, g);
  });
}

inline Var scale(Var a, double s) {
  Matrix out = a.value();
  for (double& v : out.data()) v *= s;
  return a.tape->record(std::move(out), {a}, [a, s](Tape& tape, std::size_t self) {
    const Matrix& g = tape.grad_buffer(self);
    axpy_inplace(tape.grad_buffer(a.id), s, g);
  });
}

inline Var hadamard(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "hadamard");
  Matrix out = a.value();
  auto bv = b.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& tape, std::size_t self) {
    const Matrix& g = tape.grad_buffer(self);
    auto gv = g.data();
    if (detail::wants(tape, a)) {
      auto ga = tape.grad_buffer(a.id).data();
      auto bv2 = b.value().data();
      for (std::size_t i = 0; i < gv.size(); ++i) ga[i] += gv[i] * bv2[i];
    }
    if (detail::wants(tape, b)) {
      auto gb = tape.grad_buffer(b.id).data();
      auto av = a.value().data();
      for (std::size_t i = 0; i < gv.size(); ++i) gb[i] += gv[i] * av[i];
    }
  });
}

// Elementwise product with a constant (non-differentiated) matrix.
inline Var mul_const(Var a, Matrix c) {
  require_same_shape(a.value(), c, "mul_const");
  Matrix out = a.value();
  auto o = out.data();
  auto cv = c.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= cv[i];
  return a.tape->record(std::move(out), {a}, [a, c = std::move(c)](Tape& tape, std::size_t self) {
    const Matrix& g = tape.grad_buffer(self);
    Matrix contrib = g;
    auto dst = contrib.data();
    auto cv2 = c.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] *= cv2[i];
    add_inplace(tape.grad_buffer(a.id), contrib);
  });
}

inline Var silu(Var a) {
  Matrix out = a.value();
  for (double& v : out.data()) v = silu(v);
  return a.tape->record(std::move(out), {a}, [a](Tape& tape, std::size_t self) {
    const Matrix& g = tape.grad_buffer(self);
    auto gv = g.data();
    auto z = a.value().data();
    auto ga = tape.grad_buffer(a.id).data();
    for (std::size_t i = 0; i < gv.size(); ++i) ga[i] += gv[i] * silu_derivative(z[i]);
  });
}

// Row-wise softmax; each row is an independent distribution.
inline Var softmax_rows(Var a) {
  const Matrix& in = a.value();
  Matrix out(in.rows(), in.cols());
  for (std::size_t r = 0; r < in.rows(); ++r) {
    const Vector p = softmax(in.row(r));
    std::copy(p.begin(), p.end(), out.row(r).begin());
  }
  return a.tape->record(std::move(out), {a}, [a](Tape& tape, std::size_t self) {
    const Matrix& g = tape.grad_buffer(self);
    const Matrix& y = tape.value(self);
    Matrix& ga = tape.grad_buffer(a.id);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      const double inner = dot(g.row(r), y.row(r));
      auto gr = g.row(r);
      auto yr = y.row(r);
      auto dst = ga.row(r);
      for (std::size_t c = 0; c < y.cols(); ++c) dst[c] += yr[c] * (gr[c] - inner);
    }
  });
}

inline Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  return a.tape->record(Matrix(1, 1, total), {a}, [a](Tape& tape, std::size_t self) {
    const double g = tape.grad_buffer(self)(0, 0);
    for (double& v : tape.grad_buffer(a.id).data()) v += g;
  });
}

// Sum of a ⊙ coef for a constant coefficient matrix.
inline Var weighted_sum(Var a, Matrix coef) {
  require_same_shape(a.value(), coef, "weighted_sum");
  const double total = dot(a.value().data(), coef.data());
  return a.tape->record(Matrix(1, 1, total), {a},
                        [a, coef = std::move(coef)](Tape& tape, std::size_t self) {
                          const double g = tape.grad_buffer(self)(0, 0);
                          axpy_inplace(tape.grad_buffer(a.id), g, coef);
                        });
}

// mean((pred - target)^2) over every entry; target is constant.
inline Var mse(Var pred, Matrix target) {
  require_same_shape(pred.value(), target, "mse");
  const auto p = pred.value().data();
  const auto y = target.data();
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += (p[i] - y[i]) * (p[i] - y[i]);
  const double count = static_cast<double>(p.size());
  return pred.tape->record(
      Matrix(1, 1, total / count), {pred},
      [pred, target = std::move(target), count](Tape& tape, std::size_t self) {
        const double g = tape.grad_buffer(self)(0, 0);
        auto gp = tape.grad_buffer(pred.id).data();
        const auto pv = pred.value().data();
        const auto yv = target.data();
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g * 2.0 * (pv[i] - yv[i]) / count;
      });
}

inline Var gather_rows(Var a, std::vector<std::size_t> rows) {
  const Matrix& in = a.value();
  Matrix out(rows.size(), in.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= in.rows()) throw DimensionError("gather_rows: index out of range");
    std::copy(in.row(rows[i]).begin(), in.row(rows[i]).end(), out.row(i).begin());
  }
  return a.tape->record(std::move(out), {a},
                        [a, rows = std::move(rows)](Tape& tape, std::size_t self) {
                          const Matrix& g = tape.grad_buffer(self);
                          Matrix& ga = tape.grad_buffer(a.id);
                          for (std::size_t i = 0; i < rows.size(); ++i) {
                            auto src = g.row(i);
                            auto dst = ga.row(rows[i]);
                            for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
                          }
                        });
}

// Places row i of `a` at row rows[i] of a zero matrix with `total_rows` rows.
inline Var scatter_rows(Var a, std::vector<std::size_t> rows, std::size_t total_rows) {
  const Matrix& in = a.value();
  if (rows.size() != in.rows()) throw DimensionError("scatter_rows: index count mismatch");
  Matrix out(total_rows, in.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= total_rows) throw DimensionError("scatter_rows: index out of range");
    auto src = in.row(i);
    auto dst = out.row(rows[i]);
    for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
  }
  return a.tape->record(std::move(out), {a},
                        [a, rows = std::move(rows)](Tape& tape, std::size_t self) {
                          const Matrix& g = tape.grad_buffer(self);
                          Matrix& ga = tape.grad_buffer(a.id);
                          for (std::size_t i = 0; i < rows.size(); ++i) {
                            auto src = g.row(rows[i]);
                            auto dst = ga.row(i);
                            for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
                          }
                        });
}

// out[t, :] = a[t, :] * c[t] for a column vector c.
inline Var scale_rows(Var a, Var c) {
  const Matrix& in = a.value();
  const Matrix& cv = c.value();
  if (cv.cols() != 1 || cv.rows() != in.rows()) {
    throw DimensionError("scale_rows: expected " + std::to_string(in.rows()) + "x1 scale, got " +
                         shape_string(cv));
  }
  Matrix out = in;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (double& v : out.row(r)) v *= cv(r, 0);
  return a.tape->record(std::move(out), {a, c}, [a, c](Tape& tape, std::size_t self) {
    const Matrix& g = tape.grad_buffer(self);
    const Matrix& av = a.value();
    const Matrix& s = c.value();
    if (detail::wants(tape, a)) {
      Matrix& ga = tape.grad_buffer(a.id);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto src = g.row(r);
        auto dst = ga.row(r);
        for (std::size_t k = 0; k < src.size(); ++k) dst[k] += src[k] * s(r, 0);
      }
    }
    if (detail::wants(tape, c)) {
      Matrix& gc = tape.grad_buffer(c.id);
      for (std::size_t r = 0; r < g.rows(); ++r) gc(r, 0) += dot(g.row(r), av.row(r));
    }
  });
}

// Column vector of a[row_i, col_i] for each requested entry.
inline Var gather_entries(Var a, std::vector<std::pair<std::size_t, std::size_t>> entries) {
  const Matrix& in = a.value();
  Matrix out(entries.size(), 1);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto [r, c] = entries[i];
    if (r >= in.rows() || c >= in.cols()) throw DimensionError("gather_entries: out of range");
    out(i, 0) = in(r, c);
  }
  return a.tape->record(std::move(out), {a},
                        [a, entries = std::move(entries)](Tape& tape, std::size_t self) {
                          const Matrix& g = tape.grad_buffer(self);
                          Matrix& ga = tape.grad_buffer(a.id);
                          for (std::size_t i = 0; i < entries.size(); ++i) {
                            ga(entries[i].first, entries[i].second) += g(i, 0);
                          }
                        });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::vector<Matrix> analytic;
  std::vector<Matrix> numeric;
};

// Builds a scalar graph from leaves bound to `params`.
using ScalarGraph = std::function<Var(Tape&, std::span<const Var>)>;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-8);
}

inline GradCheckResult grad_check(const ScalarGraph& f, const std::vector<Matrix>& params,
                                  double eps) {
  if (!(eps > 0.0)) throw ConfigError("grad_check: eps must be positive");

  auto evaluate = [&](const std::vector<Matrix>& values, bool with_backward,
                      std::vector<Matrix>* grads) {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(values.size());
    for (const Matrix& v : values) leaves.push_back(tape.leaf(v));
    Var out = f(tape, leaves);
    const Matrix& ov = out.value();
    if (ov.rows() != 1 || ov.cols() != 1) throw DimensionError("grad_check: f must be scalar");
    const double value = ov(0, 0);
    if (!std::isfinite(value)) throw EvaluationError("grad_check: non-finite function value");
    if (with_backward) {
      tape.backward(out);
      for (const Var& leaf : leaves) grads->push_back(tape.grad(leaf));
    }
    return value;
  };

  GradCheckResult result;
  evaluate(params, true, &result.analytic);

  std::vector<Matrix> probe = params;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Matrix numeric(params[p].rows(), params[p].cols());
    auto values = probe[p].data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + eps;
      const double up = evaluate(probe, false, nullptr);
      values[i] = original - eps;
      const double down = evaluate(probe, false, nullptr);
      values[i] = original;
      numeric.data()[i] = (up - down) / (2.0 * eps);
      result.max_relative_error = std::max(
          result.max_relative_error, relative_error(result.analytic[p].data()[i], numeric.data()[i]));
    }
    result.numeric.push_back(std::move(numeric));
  }
  return result;
}

inline GradCheckResult grad_check(const std::function<Var(Tape&, Var)>& f, const Matrix& params,
                                  double eps) {
  return grad_check([&](Tape& tape, std::span<const Var> leaves) { return f(tape, leaves[0]); },
                    std::vector<Matrix>{params}, eps);
}

}  // namespace moecond
