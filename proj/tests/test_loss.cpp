#include <gtest/gtest.h>

#include "support.hpp"

using namespace unimatch;
using namespace testing_support;

using DTensor = Tensor<double>;

TEST(Supervised, MatchesOracleAndIgnoresPixels) {
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const auto logits = random_logits<double>(rng, {2, 4, 5, 3});
    const auto labels = random_labels(rng, 2, 5, 3, 4, 0.3);
    EXPECT_NEAR(supervised_loss(logits, labels), double(oracle_supervised(logits, labels)), 1e-12);
  }
}

TEST(Supervised, AllIgnoredIsZeroWithZeroGradient) {
  Rng rng(2);
  const auto logits = random_logits<double>(rng, {1, 3, 2, 2});
  LabelMask labels{IndexTensor({1, 2, 2}, kIgnoreValue), 3};
  DTensor g(logits.shape());
  EXPECT_EQ(supervised_loss(logits, labels, &g), 0.0);
  for (double v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(Supervised, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  const auto logits = random_logits<double>(rng, {2, 3, 3, 2});
  const auto labels = random_labels(rng, 2, 3, 2, 3, 0.2);
  DTensor g(logits.shape());
  supervised_loss(logits, labels, &g);
  EXPECT_LT(max_fd_rel_error(logits, g, [&](const DTensor& x) { return supervised_loss(x, labels); }), 1e-5);
}

TEST(MaskedUnsup, MatchesOracleBothNormalizations) {
  Rng rng(4);
  for (double tau : {0.0, 0.5, 0.8, 0.95}) {
    const auto logits = random_logits<double>(rng, {3, 4, 4, 4});
    const auto pl = random_pseudo_label(rng, 3, 4, 4, 4, tau, 0.2);
    EXPECT_NEAR(masked_unsup_loss(logits, pl).loss, double(oracle_masked(logits, pl, tau)), 1e-12) << tau;
    EXPECT_NEAR(masked_unsup_loss<double>(logits, pl, nullptr, 1.0, true).loss,
                double(oracle_masked(logits, pl, tau, true)), 1e-12) << tau;
  }
}

TEST(MaskedUnsup, LowConfidencePixelsOnlyDiluteTheMean) {
  // one confident pixel out of four: loss is a quarter of that pixel's CE
  DTensor logits({1, 2, 1, 4}, 0.0);
  logits(0, 0, 0, 0) = 3.0;
  PseudoLabel pl{IndexTensor({1, 1, 4}, 0), FloatTensor({1, 1, 4}, 0.5f), ByteTensor({1, 1, 4}, 0), {}};
  pl.confidence[0] = 0.99f;
  pl.valid[0] = 1;
  const double ce = std::log1p(std::exp(-3.0));
  const auto r = masked_unsup_loss(logits, pl);
  EXPECT_NEAR(r.loss, ce / 4, 1e-12);
  EXPECT_DOUBLE_EQ(r.kept_fraction, 0.25);
}

TEST(MaskedUnsup, NoConfidentPixelsGivesZeroLossAndGradient) {
  Rng rng(5);
  const auto logits = random_logits<double>(rng, {2, 3, 2, 2});
  const auto pl = random_pseudo_label(rng, 2, 2, 2, 3, 1.01);
  DTensor g(logits.shape());
  const auto r = masked_unsup_loss(logits, pl, &g);
  EXPECT_EQ(r.loss, 0.0);
  EXPECT_EQ(r.kept_fraction, 0.0);
  for (double v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(MaskedUnsup, GradientMatchesFiniteDifferences) {
  Rng rng(6);
  const auto logits = random_logits<double>(rng, {2, 3, 3, 3});
  const auto pl = random_pseudo_label(rng, 2, 3, 3, 3, 0.6, 0.2);
  for (bool by_valid : {false, true}) {
    DTensor g(logits.shape());
    masked_unsup_loss(logits, pl, &g, 1.0, by_valid);
    EXPECT_LT(max_fd_rel_error(logits, g,
                               [&](const DTensor& x) { return masked_unsup_loss<double>(x, pl, nullptr, 1.0, by_valid).loss; }),
              1e-5);
  }
}

TEST(MaskedUnsup, IgnoredPixelsLeaveTheDenominator) {
  DTensor logits({1, 2, 1, 2}, 0.0);
  PseudoLabel pl{IndexTensor({1, 1, 2}, 0), FloatTensor({1, 1, 2}, 1.0f), ByteTensor({1, 1, 2}, 1),
                 ByteTensor({1, 1, 2}, 0)};
  pl.ignore[1] = 1;
  EXPECT_NEAR(masked_unsup_loss(logits, pl).loss, std::log(2.0), 1e-12);
  EXPECT_DOUBLE_EQ(masked_unsup_loss(logits, pl).kept_fraction, 1.0);
}

TEST(StreamReductions, V1WeightsAndV2Mean) {
  Rng rng(7);
  const auto pf = random_logits<double>(rng, {2, 3, 4, 4});
  const auto p1 = random_logits<double>(rng, {2, 3, 4, 4});
  const auto p2 = random_logits<double>(rng, {2, 3, 4, 4});
  const auto pl = random_pseudo_label(rng, 2, 4, 4, 3, 0.5);
  const double lf = double(oracle_masked(pf, pl, 0.5));
  const double l1 = double(oracle_masked(p1, pl, 0.5));
  const double l2 = double(oracle_masked(p2, pl, 0.5));
  EXPECT_NEAR(v1_unlabeled_loss(pf, p1, p2, pl), 0.5 * lf + 0.25 * l1 + 0.25 * l2, 1e-12);
  EXPECT_NEAR(v2_unlabeled_loss(p1, p2, pl), (l1 + l2) / 2, 1e-12);
  // swapping the two streams does not change the loss
  EXPECT_NEAR(v2_unlabeled_loss(p1, p2, pl), v2_unlabeled_loss(p2, p1, pl), 1e-15);
}

TEST(StreamReductions, GradientsCarryStreamWeights) {
  Rng rng(8);
  const auto p = random_logits<double>(rng, {1, 3, 2, 2});
  const auto pl = random_pseudo_label(rng, 1, 2, 2, 3, 0.0);
  DTensor single(p.shape()), gf(p.shape()), g1(p.shape()), g2(p.shape()), h1(p.shape()), h2(p.shape());
  masked_unsup_loss(p, pl, &single);
  v1_unlabeled_loss(p, p, p, pl, pl, pl, &gf, &g1, &g2);
  v2_unlabeled_loss(p, p, pl, pl, &h1, &h2);
  for (std::size_t i = 0; i < p.size(); ++i) {
    EXPECT_NEAR(gf[i], 0.5 * single[i], 1e-15);
    EXPECT_NEAR(g1[i], 0.25 * single[i], 1e-15);
    EXPECT_NEAR(h1[i], 0.5 * single[i], 1e-15);
    EXPECT_NEAR(h2[i], 0.5 * single[i], 1e-15);
  }
}

TEST(Total, LambdaWeighting) {
  EXPECT_DOUBLE_EQ(total_loss(1.5, 2.0, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(total_loss(1.5, 2.0, 0.0), 1.5);
  EXPECT_THROW(total_loss(1.0, 1.0, -1.0), ContractError);
}

TEST(Ohem, MatchesSortOracle) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const auto logits = random_logits<double>(rng, {2, 3, 6, 6}, 1.0 + trial * 0.3);
    const auto labels = random_labels(rng, 2, 6, 6, 3, 0.1);
    EXPECT_NEAR(ohem_supervised_loss(logits, labels, 0.7, 1.0 / 16), double(oracle_ohem(logits, labels, 0.7, 1.0 / 16)),
                1e-12);
  }
}

TEST(Ohem, MinKeptFloorApplies) {
  // every pixel confidently right: no hard pixels, so ceil(N/16) are kept
  DTensor logits({1, 2, 4, 8}, 0.0);
  LabelMask labels{IndexTensor({1, 4, 8}, 0), 2};
  for (std::size_t i = 0; i < 32; ++i) logits[i] = 5.0 + 0.01 * i;
  const double got = ohem_supervised_loss(logits, labels, 0.7, 1.0 / 16);
  // the two easiest-to-get-wrong pixels have the smallest margins 5.00 and 5.01
  EXPECT_NEAR(got, (std::log1p(std::exp(-5.0)) + std::log1p(std::exp(-5.01))) / 2, 1e-12);
}

TEST(Ohem, GradientMatchesFiniteDifferencesAwayFromTies) {
  Rng rng(10);
  const auto logits = random_logits<double>(rng, {1, 3, 4, 4});
  const auto labels = random_labels(rng, 1, 4, 4, 3, 0.0);
  DTensor g(logits.shape());
  ohem_supervised_loss(logits, labels, 0.7, 1.0 / 16, &g);
  EXPECT_LT(max_fd_rel_error(logits, g,
                             [&](const DTensor& x) { return ohem_supervised_loss(x, labels, 0.7, 1.0 / 16); }, 1e-7),
            1e-4);
}
