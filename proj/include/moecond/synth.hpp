#pragma once

// Synthetic mixture-of-domains regression tasks.
//
// Domain d draws inputs around its own center and maps them through a
// domain-specific target: y = x·A_d + relu(x·U_d)·V_d. The generator
// parameters are a pure function of the task seed; batches are a pure
// function of (mixture, batch size, sample seed).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <algorithm>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "moecond/seed.hpp"
#include "moecond/tensor.hpp"

namespace moecond {

struct DomainGenerator {
  Vector center;  // d_model
  Matrix linear;  // d_model x d_out
  Matrix feature_in;   // d_model x features
  Matrix feature_out;  // features x d_out
};

struct DomainMixture {
  std::size_t m = 0;
  Vector pi;
  std::size_t d_model = 16;
  std::size_t d_out = 8;
  double input_noise = 0.5;
  std::vector<DomainGenerator> domains;

  void validate() const {
    if (pi.size() != m || domains.size() != m) throw ConfigError("mixture: m inconsistent");
    double total = 0.0;
    for (double p : pi) {
      if (p < 0.0 || !std::isfinite(p)) throw ConfigError("mixture: weights must be >= 0");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("mixture: weights must sum to 1");
  }
};

struct Batch {
  Matrix inputs;   // B x d_model
  Matrix targets;  // B x d_out
  std::vector<std::size_t> domains;
};

inline DomainMixture make_mixture(Vector pi, std::size_t d_model, std::size_t d_out,
                                  std::uint64_t task_seed) {
  DomainMixture mix;
  mix.m = pi.size();
  mix.pi = std::move(pi);
  mix.d_model = d_model;
  mix.d_out = d_out;
  const std::size_t features = d_model;
  for (std::size_t d = 0; d < mix.m; ++d) {
    std::mt19937_64 rng(derive_seed(task_seed, "domain", d));
    std::normal_distribution<double> normal(0.0, 1.0);
    DomainGenerator g;
    g.center.resize(d_model);
    for (double& v : g.center) v = normal(rng);
    const auto fill = [&](std::size_t r, std::size_t c, double scale) {
      Matrix out(r, c);
      for (double& v : out.data()) v = normal(rng) * scale;
      return out;
    };
    g.linear = fill(d_model, d_out, 0.5 / std::sqrt(double(d_model)));
    g.feature_in = fill(d_model, features, 1.0 / std::sqrt(double(d_model)));
    g.feature_out = fill(features, d_out, 1.0 / std::sqrt(double(features)));
    mix.domains.push_back(std::move(g));
  }
  mix.validate();
  return mix;
}

// One head domain holding 1 - tail_mass; the remaining m - 1 split tail_mass.
inline Vector long_tail_weights(std::size_t m, double tail_mass) {
  if (m < 2) throw ConfigError("long-tail mixture needs m >= 2");
  if (!(tail_mass > 0.0 && tail_mass < 1.0)) throw ConfigError("tail_mass must be in (0,1)");
  Vector pi(m, tail_mass / static_cast<double>(m - 1));
  pi[0] = 1.0 - tail_mass;
  return pi;
}

inline DomainMixture make_long_tail_mixture(std::size_t m, double tail_mass,
                                            std::size_t d_model = 16, std::size_t d_out = 8,
                                            std::uint64_t task_seed = 1234) {
  return make_mixture(long_tail_weights(m, tail_mass), d_model, d_out, task_seed);
}

// Same domains, reweighted.
inline DomainMixture reweight(DomainMixture mix, Vector pi) {
  if (pi.size() != mix.m) throw ConfigError("reweight: length mismatch");
  mix.pi = std::move(pi);
  mix.validate();
  return mix;
}

namespace detail {

inline void draw_example(const DomainMixture& mix, std::size_t d, std::mt19937_64& rng,
                         std::span<double> x, std::span<double> y) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const DomainGenerator& g = mix.domains[d];
  for (std::size_t c = 0; c < mix.d_model; ++c) x[c] = g.center[c] + mix.input_noise * normal(rng);
  const Matrix xr = Matrix::row_vector(x);
  const Matrix lin = matmul(xr, g.linear);
  Matrix feat = matmul(xr, g.feature_in);
  for (double& v : feat.data()) v = std::max(v, 0.0);
  const Matrix nonlin = matmul(feat, g.feature_out);
  for (std::size_t c = 0; c < mix.d_out; ++c) y[c] = lin(0, c) + nonlin(0, c);
}

}  // namespace detail

inline Batch sample_batch(const DomainMixture& mix, std::size_t batch_size, std::uint64_t seed) {
  if (batch_size < 1) throw ConfigError("sample_batch: batch size must be >= 1");
  mix.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Batch b{Matrix(batch_size, mix.d_model), Matrix(batch_size, mix.d_out), {}};
  b.domains.reserve(batch_size);
  for (std::size_t t = 0; t < batch_size; ++t) {
    const double u = unit(rng);
    std::size_t d = 0;
    double cumulative = 0.0;
    // Inverse CDF; zero-weight domains are never chosen.
    for (d = 0; d < mix.m; ++d) {
      cumulative += mix.pi[d];
      if (mix.pi[d] > 0.0 && u < cumulative) break;
    }
    if (d == mix.m) {
      d = mix.m - 1;
      while (mix.pi[d] == 0.0) --d;
    }
    detail::draw_example(mix, d, rng, b.inputs.row(t), b.targets.row(t));
    b.domains.push_back(d);
  }
  return b;
}

// `count` examples from a single domain.
inline Batch sample_domain(const DomainMixture& mix, std::size_t domain, std::size_t count,
                           std::uint64_t seed) {
  if (domain >= mix.m) throw ConfigError("sample_domain: domain out of range");
  std::mt19937_64 rng(seed);
  Batch b{Matrix(count, mix.d_model), Matrix(count, mix.d_out), std::vector<std::size_t>(count, domain)};
  for (std::size_t t = 0; t < count; ++t) {
    detail::draw_example(mix, domain, rng, b.inputs.row(t), b.targets.row(t));
  }
  return b;
}

}  // namespace moecond
