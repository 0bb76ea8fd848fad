#include <gtest/gtest.h>

#include <cmath>

#include "moecond/synth.hpp"

using namespace moecond;

TEST(SampleBatch, SingleDomainLabelsAreZero) {
  const DomainMixture mix = make_mixture({1.0}, 4, 2, 7);
  const Batch b = sample_batch(mix, 50, 1);
  for (std::size_t d : b.domains) EXPECT_EQ(d, 0u);
}

TEST(SampleBatch, ZeroWeightDomainNeverSampled) {
  const DomainMixture mix = make_mixture({1.0, 0.0}, 4, 2, 7);
  for (std::uint64_t s = 0; s < 20; ++s)
    for (std::size_t d : sample_batch(mix, 100, s).domains) EXPECT_EQ(d, 0u);
  const DomainMixture back = make_mixture({0.0, 1.0}, 4, 2, 7);
  for (std::size_t d : sample_batch(back, 500, 3).domains) EXPECT_EQ(d, 1u);
}

TEST(SampleBatch, LabelFrequencyWithinThreeSigma) {
  const DomainMixture mix = make_mixture({0.5, 0.5}, 4, 2, 7);
  const std::size_t B = 10000;
  const Batch b = sample_batch(mix, B, 99);
  double ones = 0;
  for (std::size_t d : b.domains) ones += d == 1;
  const double sigma = std::sqrt(0.25 / B);
  EXPECT_NEAR(ones / B, 0.5, 3 * sigma);
}

TEST(SampleBatch, DeterministicUnderSeed) {
  const DomainMixture mix = make_long_tail_mixture(5, 0.2);
  const Batch a = sample_batch(mix, 64, 11), b = sample_batch(mix, 64, 11), c = sample_batch(mix, 64, 12);
  EXPECT_EQ(a.inputs, b.inputs);
  EXPECT_EQ(a.targets, b.targets);
  EXPECT_EQ(a.domains, b.domains);
  EXPECT_NE(a.inputs, c.inputs);
  EXPECT_THROW(sample_batch(mix, 0, 1), ConfigError);
}

TEST(SampleBatch, TargetsFollowDomainGenerator) {
  const DomainMixture mix = make_long_tail_mixture(3, 0.3, 5, 2, 21);
  const Batch b = sample_batch(mix, 40, 4);
  for (std::size_t t = 0; t < 40; ++t) {
    const DomainGenerator& g = mix.domains[b.domains[t]];
    for (std::size_t c = 0; c < 2; ++c) {
      double y = 0;
      for (std::size_t i = 0; i < 5; ++i) y += b.inputs(t, i) * g.linear(i, c);
      for (std::size_t f = 0; f < g.feature_in.cols(); ++f) {
        double z = 0;
        for (std::size_t i = 0; i < 5; ++i) z += b.inputs(t, i) * g.feature_in(i, f);
        y += (z > 0 ? z : 0) * g.feature_out(f, c);
      }
      EXPECT_NEAR(b.targets(t, c), y, 1e-12);
    }
  }
}

TEST(SampleDomain, OnlyRequestedDomain) {
  const DomainMixture mix = make_long_tail_mixture(4, 0.2);
  const Batch b = sample_domain(mix, 2, 30, 5);
  EXPECT_EQ(b.inputs.rows(), 30u);
  for (std::size_t d : b.domains) EXPECT_EQ(d, 2u);
  EXPECT_THROW(sample_domain(mix, 4, 3, 1), ConfigError);
}

TEST(LongTail, Examples) {
  const Vector a = long_tail_weights(2, 0.1);
  EXPECT_DOUBLE_EQ(a[0], 0.9);
  EXPECT_DOUBLE_EQ(a[1], 0.1);
  const Vector b = long_tail_weights(5, 0.2);
  EXPECT_DOUBLE_EQ(b[0], 0.8);
  for (std::size_t d = 1; d < 5; ++d) EXPECT_DOUBLE_EQ(b[d], 0.05);
  EXPECT_THROW(long_tail_weights(1, 0.2), ConfigError);
  EXPECT_THROW(long_tail_weights(3, 0.0), ConfigError);
  EXPECT_THROW(long_tail_weights(3, 1.0), ConfigError);
}

TEST(LongTail, WeightsSumToOne) {
  for (std::size_t m = 2; m < 40; ++m) {
    for (double tail : {0.01, 0.2, 0.37, 0.5, 0.99}) {
      double total = 0;
      for (double p : long_tail_weights(m, tail)) total += p;
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(Mixture, GeneratorsDependOnlyOnTaskSeed) {
  const DomainMixture a = make_mixture({0.5, 0.5}, 4, 2, 3), b = make_mixture({0.9, 0.1}, 4, 2, 3);
  EXPECT_EQ(a.domains[1].linear, b.domains[1].linear);
  EXPECT_EQ(a.domains[0].center, b.domains[0].center);
  EXPECT_NE(make_mixture({0.5, 0.5}, 4, 2, 4).domains[0].center, a.domains[0].center);
  EXPECT_THROW(make_mixture({0.5, 0.6}, 4, 2, 3), ConfigError);
  EXPECT_THROW(make_mixture({-0.5, 1.5}, 4, 2, 3), ConfigError);
  EXPECT_THROW(reweight(a, {1.0}), ConfigError);
}
