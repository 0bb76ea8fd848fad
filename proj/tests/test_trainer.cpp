#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "moecond/config.hpp"
#include "moecond/records.hpp"
#include "moecond/trainer.hpp"

using namespace moecond;

namespace {

ModelConfig small_model() {
  ModelConfig mc;
  mc.layers = 2;
  mc.n = 6;
  mc.k = 2;
  mc.n_shared = 1;
  mc.d_model = 8;
  mc.d_hidden = 8;
  mc.d_out = 4;
  return mc;
}

DomainMixture small_task() { return make_long_tail_mixture(3, 0.2, 8, 4, 5); }

TrainConfig short_run(BackwardRegime regime, std::size_t steps) {
  TrainConfig t;
  t.steps = steps;
  t.batch = 32;
  t.regime = regime;
  t.r = regime == BackwardRegime::Condenser ? 1 : 0;
  t.record_every = 5;
  t.eval_tokens = 64;
  return t;
}

Batch random_batch(std::size_t T, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, 1);
  Batch b{Matrix(T, d), Matrix(T, d), {}};
  for (double& v : b.inputs.data()) v = n(rng);
  // structured targets keep the mean gradient well away from zero
  for (double& v : b.targets.data()) v = 1.0 + 0.1 * n(rng);
  return b;
}

MoELayer frozen_layer(std::size_t r) {
  ModelConfig mc;
  mc.layers = 1;
  mc.n = 4;
  mc.k = 2;
  mc.n_shared = 1;
  mc.d_model = 4;
  mc.d_hidden = 6;
  mc.d_out = 4;
  MoEModel m = init_model(mc, 31);
  if (r > 0) m.set_condensers(0, {0});
  return m.layers[0];
}

}  // namespace

TEST(Train, ZeroLearningRateLeavesParametersUnchanged) {
  for (OptimizerKind opt : {OptimizerKind::SGD, OptimizerKind::Adam}) {
    MoEModel model = init_model(small_model(), 3);
    const MoEModel before = model;
    TrainConfig cfg = short_run(BackwardRegime::Masked, 10);
    cfg.lr = 0.0;
    cfg.optimizer = opt;
    train(model, small_task(), cfg);
    std::vector<Matrix> a, b;
    for_each_parameter(before, [&](const std::string&, const Matrix& m) { a.push_back(m); });
    for_each_parameter(model, [&](const std::string&, const Matrix& m) { b.push_back(m); });
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
  }
}

TEST(Optimizer, SgdStepOnHalfSquaredNorm) {
  Matrix theta = Matrix::from_rows({{1.0, -2.0}, {0.5, 4.0}});
  const Matrix start = theta;
  std::vector<Matrix*> params{&theta};
  Optimizer sgd(OptimizerKind::SGD, 0.1);
  sgd.step(params, {theta});  // gradient of 0.5 ||theta||^2 is theta
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(theta.data()[i], start.data()[i] * 0.9);
  EXPECT_THROW(sgd.step(params, {}), DimensionError);
}

TEST(Optimizer, AdamFirstStepMovesByLearningRate) {
  Matrix theta = Matrix::from_rows({{1.0, -3.0}});
  std::vector<Matrix*> params{&theta};
  Optimizer adam(OptimizerKind::Adam, 0.01);
  adam.step(params, {theta});
  EXPECT_NEAR(theta(0, 0), 0.99, 1e-9);
  EXPECT_NEAR(theta(0, 1), -2.99, 1e-9);
}

TEST(Train, LossDecreasesForEveryRegime) {
  ExperimentConfig ec;
  const DomainMixture mix = ec.task();
  for (BackwardRegime regime : {BackwardRegime::Masked, BackwardRegime::StraightThrough, BackwardRegime::Condenser}) {
    MoEModel model = init_model(ec.model, 1234);
    TrainConfig cfg = ec.train;
    cfg.steps = 500;
    cfg.seed = 1234;
    cfg.regime = regime;
    cfg.r = regime == BackwardRegime::Condenser ? 2 : 0;
    const std::vector<Batch> eval = make_eval_sets(mix, 256, 77);
    const double before = mixture_loss(domain_losses(model, eval), mix.pi);
    const TrainResult r = train(model, mix, cfg);
    ASSERT_FALSE(r.diverged);
    const double after = mixture_loss(domain_losses(model, eval), mix.pi);
    EXPECT_LT(after, before) << to_string(regime);
  }
}

TEST(Train, RecordsFollowCadence) {
  MoEModel model = init_model(small_model(), 2);
  std::vector<std::size_t> seen;
  const TrainResult r = train(model, small_task(), short_run(BackwardRegime::Masked, 23),
                              [&](const RunRecord& rec) { seen.push_back(rec.step); });
  EXPECT_EQ(seen, (std::vector<std::size_t>{0, 5, 10, 15, 20, 22}));
  ASSERT_EQ(r.records.size(), seen.size());
  const RunRecord& last = r.records.back();
  EXPECT_EQ(last.grad_norms.size(), 2u);
  EXPECT_EQ(last.grad_norms[0].size(), 6u);
  double total = 0;
  for (double c : last.activation_counts[0]) total += c;
  EXPECT_DOUBLE_EQ(total, 23.0 * 32 * 2);
  EXPECT_EQ(last.domain_loss.size(), 3u);
}

TEST(Train, CondensersChosenAtEndOfWarmupAndKept) {
  MoEModel model = init_model(small_model(), 2);
  TrainConfig cfg = short_run(BackwardRegime::Condenser, 40);
  cfg.record_every = 1;
  const TrainResult r = train(model, small_task(), cfg);
  ASSERT_EQ(cfg.warmup_steps(), 4u);
  for (const RunRecord& rec : r.records) {
    for (const auto& j : rec.condensers) {
      if (rec.step < 3) EXPECT_TRUE(j.empty()) << rec.step;
      else EXPECT_EQ(j, r.records.back().condensers[&j - rec.condensers.data()]);
    }
  }
  EXPECT_EQ(model.layers[0].config.condensers.size(), 1u);
  EXPECT_TRUE(r.records.back().condenser_grad_mean_model.has_value());
}

TEST(Train, RejectsInconsistentConfig) {
  MoEModel model = init_model(small_model(), 2);
  TrainConfig cfg = short_run(BackwardRegime::Masked, 5);
  cfg.r = 1;
  EXPECT_THROW(train(model, small_task(), cfg), ConfigError);
  cfg = short_run(BackwardRegime::Masked, 0);
  EXPECT_THROW(train(model, small_task(), cfg), ConfigError);
  EXPECT_THROW(train(model, make_long_tail_mixture(3, 0.2, 5, 4), short_run(BackwardRegime::Masked, 2)), ConfigError);
}

TEST(Train, DivergenceStopsWithDiagnosticRecord) {
  MoEModel model = init_model(small_model(), 2);
  TrainConfig cfg = short_run(BackwardRegime::Masked, 200);
  cfg.optimizer = OptimizerKind::SGD;
  cfg.lr = 1e6;
  const TrainResult r = train(model, small_task(), cfg);
  ASSERT_TRUE(r.diverged);
  EXPECT_EQ(r.records.back().status, "diverged");
  EXPECT_LT(r.records.back().step, 199u);
}

TEST(Train, SameSeedSameRecordBytes) {
  const auto run = [] {
    MoEModel model = init_model(small_model(), 9);
    std::ostringstream os;
    train(model, small_task(), short_run(BackwardRegime::Condenser, 30),
          [&](const RunRecord& rec) { write_record(os, rec); });
    return os.str();
  };
  const std::string a = run();
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, run());
  std::istringstream is(a);
  std::ostringstream again;
  for (const RunRecord& rec : read_records(is)) write_record(again, rec);
  EXPECT_EQ(again.str(), a);
}

TEST(Ablation, VacuousWhenEveryExpertIsActive) {
  ModelConfig mc = small_model();
  mc.k = mc.n;
  MoEModel model = init_model(mc, 4);
  model.set_condensers(0, {1, 3});
  const Batch b = sample_batch(small_task(), 100, 1);
  const AblationResult ab = ablate_persistent_path(model, b);
  EXPECT_DOUBLE_EQ(ab.loss_with, ab.loss_without);
  EXPECT_THROW(ablate_persistent_path(init_model(small_model(), 4), b), ConfigError);
}

TEST(Ablation, UntrainedModelShowsNoSystematicGap) {
  // random condensers on random models: the sign of the gap should be mixed
  int positive = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    MoEModel model = init_model(small_model(), s);
    model.set_condensers(0, {s % 6});
    model.set_condensers(1, {(s + 3) % 6});
    const AblationResult ab = ablate_persistent_path(model, sample_batch(small_task(), 200, s));
    positive += ab.loss_without > ab.loss_with;
  }
  EXPECT_GT(positive, 2);
  EXPECT_LT(positive, 18);
}

TEST(UpdateCount, WithinThreeSigmaOfSelectionProbability) {
  const MoELayer layer = frozen_layer(0);
  const Batch big = random_batch(100000, 4, 1), run = random_batch(2000, 4, 2);
  Vector p(4, 0.0), N(4, 0.0);
  for (std::size_t t = 0; t < big.inputs.rows(); ++t)
    for (std::size_t i : route(layer, big.inputs.row(t)).selected) p[i] += 1.0 / big.inputs.rows();
  for (std::size_t t = 0; t < run.inputs.rows(); ++t)
    for (std::size_t i : route(layer, run.inputs.row(t)).selected) N[i] += 1;
  const double T = run.inputs.rows();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(N[i] / T, p[i], 3 * std::sqrt(p[i] * (1 - p[i]) / T)) << i;
}

TEST(Chernoff, NoViolationsAtOneHalf) {
  std::mt19937_64 rng(1234);
  std::bernoulli_distribution coin(0.5);
  const double T = 1000, p = 0.5, delta = 0.3;
  int violations = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    int N = 0;
    for (int t = 0; t < T; ++t) N += coin(rng);
    violations += N <= (1 - delta) * T * p;
  }
  EXPECT_EQ(violations, 0);
  EXPECT_NEAR(std::exp(-delta * delta * T * p / 2), 1.7e-10, 0.05e-10);
}

TEST(Attenuation, GradientIsProbabilityTimesConditionalMean) {
  const MoELayer layer = frozen_layer(0);
  const Batch sample = random_batch(100000, 4, 3);
  // same tokens on both sides: the identity is exact up to rounding
  for (const AttenuationEntry& e : attenuation_identity(layer, sample, sample)) {
    if (e.p > 0.05) {
      EXPECT_LT(e.relative_error, 1e-8) << e.expert;
    }
  }
  // independent tokens: Monte-Carlo error only
  for (const AttenuationEntry& e : attenuation_identity(layer, sample, random_batch(100000, 4, 4))) {
    if (e.p > 0.05) {
      EXPECT_LT(e.relative_error, 0.05) << e.expert;
    }
  }
}

TEST(LowerBound, CondenserGradientAboveBound) {
  const MoELayer layer = frozen_layer(1);
  const Batch sample = random_batch(5000, 4, 8);
  for (double eps : {0.01, 0.1, 0.2, 0.3}) {
    const LowerBoundCheck c = gradient_lower_bound(layer, sample, 0, eps);
    EXPECT_GE(c.mean_gradient_norm, c.bound);
    EXPECT_GE(c.probability, 0.0);
    EXPECT_LE(c.probability, 1.0);
  }
  EXPECT_THROW(gradient_lower_bound(layer, sample, 1, 0.1), ConfigError);
}

TEST(Train, BiasIsNotATrainableParameter) {
  MoEModel model = init_model(small_model(), 1);
  std::size_t expected = 1;  // head
  for (const MoELayer& l : model.layers) expected += 1 + 2 * (l.experts.size() + l.shared.size());
  EXPECT_EQ(trainable_parameters(model).size(), expected);
}
