#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "moecond/model.hpp"

using namespace moecond;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double s = 1.0) {
  std::normal_distribution<double> n(0, s);
  Matrix m(r, c);
  for (double& v : m.data()) v = n(rng);
  return m;
}

MoELayer random_layer(std::size_t n, std::size_t k, std::size_t n_shared, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  MoELayer layer;
  layer.config.n = n;
  layer.config.k = k;
  layer.config.n_shared = n_shared;
  layer.config.d_model = d;
  layer.config.d_hidden = d;
  layer.router.gate = random_matrix(d, n, rng);
  layer.router.bias.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) layer.experts.push_back({random_matrix(d, d, rng), random_matrix(d, d, rng)});
  for (std::size_t i = 0; i < n_shared; ++i) layer.shared.push_back({random_matrix(d, d, rng), random_matrix(d, d, rng)});
  layer.validate();
  return layer;
}

// Layer whose logits equal `logits` for x = e_0 (first row of the gate).
MoELayer layer_with_logits(const Vector& logits, std::size_t k, std::size_t d = 3) {
  MoELayer layer = random_layer(logits.size(), k, 0, d, 17);
  layer.router.gate = Matrix(d, logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) layer.router.gate(0, i) = logits[i];
  return layer;
}

// Plain-loop expert oracle.
Vector expert_oracle(const ExpertParams& p, const Vector& x) {
  const std::size_t dh = p.up.cols(), dm = p.down.cols();
  Vector hidden(dh, 0.0), out(dm, 0.0);
  for (std::size_t j = 0; j < dh; ++j) {
    double z = 0;
    for (std::size_t i = 0; i < x.size(); ++i) z += x[i] * p.up(i, j);
    hidden[j] = z / (1.0 + std::exp(-z));
  }
  for (std::size_t c = 0; c < dm; ++c)
    for (std::size_t j = 0; j < dh; ++j) out[c] += hidden[j] * p.down(j, c);
  return out;
}

void expect_vec_near(const Vector& a, const Vector& b, double tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "entry " << i;
}

const Vector e0 = {1.0, 0.0, 0.0};

}  // namespace

TEST(ExpertForward, IdentityAsymptote) {
  const ExpertParams p{Matrix::identity(2), Matrix::identity(2)};
  const Vector x = {40.0, 55.0};
  expect_vec_near(expert_forward(p, x), x, 1e-12);
}

TEST(ExpertForward, ZeroInputGivesZero) {
  std::mt19937_64 rng(1);
  const ExpertParams p{random_matrix(3, 5, rng), random_matrix(5, 3, rng)};
  for (double v : expert_forward(p, Vector(3, 0.0))) EXPECT_EQ(v, 0.0);
}

TEST(ExpertForward, ScalarExample) {
  const ExpertParams p{Matrix(1, 1, 1.0), Matrix(1, 1, 2.0)};
  EXPECT_NEAR(expert_forward(p, Vector{1.0})[0], 2.0 / (1.0 + std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(expert_forward(p, Vector{1.0})[0], 1.4621, 1e-4);
}

TEST(ExpertForward, ShapeMismatch) {
  const ExpertParams p{Matrix(2, 2), Matrix(2, 2)};
  EXPECT_THROW(expert_forward(p, Vector{1.0, 2.0, 3.0}), DimensionError);
}

TEST(ForwardStandard, SingletonSoftmaxIsOne) {
  MoELayer layer = layer_with_logits({0.3}, 1);
  const auto [h, d] = forward_standard(layer, e0);
  EXPECT_EQ(d.weights[0], 1.0);
  expect_vec_near(h, expert_oracle(layer.experts[0], e0), 1e-14);
}

TEST(ForwardStandard, SymmetricPair) {
  MoELayer layer = layer_with_logits({0.0, 0.0}, 2);
  const auto [h, d] = forward_standard(layer, e0);
  const Vector a = expert_oracle(layer.experts[0], e0), b = expert_oracle(layer.experts[1], e0);
  Vector want(3);
  for (std::size_t c = 0; c < 3; ++c) want[c] = 0.5 * a[c] + 0.5 * b[c];
  expect_vec_near(h, want, 1e-14);
}

TEST(ForwardStandard, FourExpertsHandComputed) {
  const Vector logits = {0.2, 1.5, -0.3, 0.9};
  MoELayer layer = layer_with_logits(logits, 2);
  const auto [h, d] = forward_standard(layer, e0);
  EXPECT_EQ(d.selected, (std::vector<std::size_t>{1, 3}));
  double z = 0;
  for (double s : logits) z += std::exp(s);
  Vector want(3, 0.0);
  for (std::size_t i : {1u, 3u}) {
    const Vector e = expert_oracle(layer.experts[i], e0);
    for (std::size_t c = 0; c < 3; ++c) want[c] += std::exp(logits[i]) / z * e[c];
  }
  expect_vec_near(h, want, 1e-13);
}

TEST(ForwardStandard, Errors) {
  MoELayer layer = layer_with_logits({0.0, 0.0}, 2);
  layer.config.k = 3;
  EXPECT_THROW(forward_standard(layer, e0), ConfigError);
  layer.config.k = 1;
  layer.config.r = 1;
  layer.config.condensers = {0};
  EXPECT_THROW(forward_standard(layer, e0), ConfigError);
}

TEST(ForwardCondenser, FullSelectionIsDenseMixture) {
  MoELayer layer = random_layer(3, 3, 1, 3, 4);
  layer.config.r = 3;
  layer.config.condensers = {0, 1, 2};
  const Vector x = {0.3, -0.2, 0.5};
  const auto [h, d] = forward_condenser(layer, x);
  EXPECT_EQ(d.selected.size(), 3u);
  const Vector w = softmax(router_logits(layer, x));
  Vector want = expert_oracle(layer.shared[0], x);
  for (std::size_t i = 0; i < 3; ++i) {
    const Vector e = expert_oracle(layer.experts[i], x);
    for (std::size_t c = 0; c < 3; ++c) want[c] += w[i] * e[c];
  }
  expect_vec_near(h, want, 1e-13);
}

TEST(ForwardCondenser, CondenserSelectedDespiteLowestLogit) {
  MoELayer layer = layer_with_logits({-9, 5, 3, 4}, 2);
  layer.config.r = 1;
  layer.config.condensers = {0};
  const auto [h, d] = forward_condenser(layer, e0);
  // remaining slot goes to the highest biased logit among the rest (expert 1)
  EXPECT_EQ(d.selected, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(d.condenser, (std::vector<bool>{true, false}));
}

TEST(ForwardCondenser, BiasNeverAltersWeights) {
  MoELayer layer = layer_with_logits({1, 1, 1, 1}, 2);
  layer.config.r = 1;
  layer.config.condensers = {0};
  layer.router.bias = {-100, 0, 0, 0};
  const auto [h, d] = forward_condenser(layer, e0);
  EXPECT_EQ(d.selected, (std::vector<std::size_t>{0, 1}));
  for (double w : d.weights) EXPECT_DOUBLE_EQ(w, 0.25);
  const Vector a = expert_oracle(layer.experts[0], e0), b = expert_oracle(layer.experts[1], e0);
  Vector want(3);
  for (std::size_t c = 0; c < 3; ++c) want[c] = 0.25 * a[c] + 0.25 * b[c];
  expect_vec_near(h, want, 1e-14);
}

TEST(ForwardCondenser, RGreaterThanKIsConfigError) {
  MoELayer layer = layer_with_logits({1, 1, 1, 1}, 1);
  layer.config.r = 2;
  layer.config.condensers = {0, 1};
  EXPECT_THROW(forward_condenser(layer, e0), ConfigError);
}

TEST(LayerInvariants, BiasSelectionSeparation) {
  MoELayer layer = random_layer(6, 2, 1, 4, 8);
  std::mt19937_64 rng(21);
  std::normal_distribution<double> n(0, 2);
  for (int trial = 0; trial < 200; ++trial) {
    Vector x(4);
    for (double& v : x) v = n(rng);
    const RouterDecision base = route(layer, x);
    MoELayer other = layer;
    for (double& b : other.router.bias) b = n(rng);
    const RouterDecision shifted = route(other, x);
    EXPECT_EQ(base.weights, shifted.weights);
  }
}

TEST(LayerInvariants, CondensersAlwaysSelected) {
  MoELayer layer = random_layer(8, 4, 1, 4, 9);
  layer.config.r = 2;
  layer.config.condensers = {2, 6};
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0, 3);
  for (double& b : layer.router.bias) b = n(rng);
  for (int t = 0; t < 500; ++t) {
    Vector x(4);
    for (double& v : x) v = n(rng);
    const RouterDecision d = route(layer, x);
    EXPECT_EQ(d.selected.size(), 4u);
    EXPECT_TRUE(d.is_selected(2) && d.is_selected(6));
  }
}

TEST(LayerInvariants, DegenerateCondenserEqualsStandardBitwise) {
  MoELayer layer = random_layer(8, 3, 1, 5, 10);
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0, 1);
  for (int t = 0; t < 100; ++t) {
    Vector x(5);
    for (double& v : x) v = n(rng);
    const auto a = forward_standard(layer, x);
    const auto b = forward_condenser(layer, x);
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.second.selected, b.second.selected);
  }
}

TEST(LayerInvariants, DenseLimitIgnoresBias) {
  MoELayer layer = random_layer(5, 5, 1, 3, 12);
  const Vector x = {0.1, 0.7, -0.4};
  const Vector h = forward_standard(layer, x).first;
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 10);
  for (int t = 0; t < 20; ++t) {
    for (double& b : layer.router.bias) b = n(rng);
    EXPECT_EQ(forward_standard(layer, x).first, h);
  }
}

TEST(LayerInvariants, SharedExpertsHaveUnitWeight) {
  MoELayer layer = random_layer(4, 2, 2, 3, 13);
  for (auto& e : layer.experts) e.down = Matrix(3, 3);
  const Vector x = {0.5, -1.0, 0.25};
  Vector want = expert_oracle(layer.shared[0], x);
  const Vector s1 = expert_oracle(layer.shared[1], x);
  for (std::size_t c = 0; c < 3; ++c) want[c] += s1[c];
  for (double scale : {1.0, -3.0, 20.0}) {
    MoELayer l = layer;
    for (double& g : l.router.gate.data()) g *= scale;
    expect_vec_near(forward_standard(l, x).first, want, 1e-14);
  }
}

TEST(RecordLayer, MatchesPerTokenForward) {
  MoELayer layer = random_layer(8, 3, 1, 4, 14);
  layer.config.r = 1;
  layer.config.condensers = {5};
  layer.router.bias = {0.1, -0.2, 0.3, 0, 0, -1, 0.5, 0};
  std::mt19937_64 rng(2);
  const Matrix x = random_matrix(32, 4, rng);
  Tape tape;
  LayerVars vars;
  vars.gate = tape.leaf(layer.router.gate);
  for (const auto& e : layer.experts) vars.experts.push_back({tape.leaf(e.up), tape.leaf(e.down)});
  for (const auto& e : layer.shared) vars.shared.push_back({tape.leaf(e.up), tape.leaf(e.down)});
  const LayerForward f = record_layer(tape, layer, vars, tape.constant(x), BackwardRegime::Condenser);
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const auto [h, d] = forward_condenser(layer, x.row(t));
    EXPECT_EQ(d.selected, f.decisions[t].selected);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(f.output.value()(t, c), h[c]);
  }
}

TEST(RecordLayer, GradCheckWithCondensers) {
  ModelConfig mc;
  mc.layers = 1;
  mc.n = 5;
  mc.k = 3;
  mc.d_model = 4;
  mc.d_hidden = 3;
  mc.d_out = 2;
  MoEModel model = init_model(mc, 31);
  model.set_condensers(0, {1, 4});
  model.layers[0].router.bias = {0.2, 0.0, -0.3, 0.1, 0.0};
  std::mt19937_64 rng(4);
  const Matrix x = random_matrix(10, 4, rng), y = random_matrix(10, 2, rng);
  const auto f = [&](Tape& t, std::span<const Var> leaves) {
    return mse(record_forward(t, model, vars_from_flat(model, leaves), x, BackwardRegime::Condenser).prediction, y);
  };
  EXPECT_LT(grad_check(f, parameter_values(model), 1e-4).max_relative_error, 1e-4);
}

TEST(ExpertParamGradient, MatchesTape) {
  std::mt19937_64 rng(8);
  const ExpertParams p{random_matrix(3, 4, rng), random_matrix(4, 3, rng)};
  const Vector x = {0.2, -0.5, 1.1}, up = {1.0, -2.0, 0.5};
  const ExpertParams g = expert_param_gradient(p, x, up, 0.7);
  Tape t;
  ExpertVars ev{t.leaf(p.up), t.leaf(p.down)};
  Var y = record_expert(t.constant(Matrix::row_vector(x)), ev);
  t.backward(weighted_sum(y, Matrix::row_vector(Vector{0.7, -1.4, 0.35})));
  for (std::size_t i = 0; i < g.up.size(); ++i) EXPECT_NEAR(g.up.data()[i], t.grad(ev.up).data()[i], 1e-14);
  for (std::size_t i = 0; i < g.down.size(); ++i) EXPECT_NEAR(g.down.data()[i], t.grad(ev.down).data()[i], 1e-14);
}

TEST(Checkpoint, RoundTripKeepsEverything) {
  ModelConfig mc;
  mc.n_shared = 2;
  MoEModel model = init_model(mc, 3);
  model.set_condensers(1, {0, 6});
  model.layers[0].router.bias = {0.1, -1e-4, 0, 0, 3, 0, 0, -2.5};
  std::stringstream ss;
  save_checkpoint(model, ss);
  const std::string text = ss.str();
  for (const char* key : {"layer0.expert3.up", "layer1.expert7.down", "layer0.router.gate", "layer1.router.bias",
                          "layer0.shared1.down", "layer1.router.condensers", "head"}) {
    EXPECT_NE(text.find(key), std::string::npos) << key;
  }
  const MoEModel back = load_checkpoint(ss);
  EXPECT_EQ(back.config, model.config);
  EXPECT_EQ(back.layers[0].router.bias, model.layers[0].router.bias);
  EXPECT_EQ(back.layers[1].config.condensers, (std::vector<std::size_t>{0, 6}));
  const auto a = parameter_values(model), b = parameter_values(back);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Checkpoint, RejectsGarbage) {
  std::stringstream ss("not-a-checkpoint 3\n");
  EXPECT_ANY_THROW(load_checkpoint(ss));
}
