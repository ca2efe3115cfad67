#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "dstcs/losses.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace dstcs;
using namespace dstcs::testing;
using namespace dstcs::oracle;

namespace {

ProbabilityMap<double> uniform_map(int rows, int cols) { return ProbabilityMap<double>(rows, cols, kNumClasses, 1.0 / 3); }

/// d loss / d logits via softmax_backward.
ProbabilityMap<double> logit_grad(const ProbabilityMap<double>& probs, const ProbabilityMap<double>& gp) {
  return softmax_backward(probs, gp);
}

}  // namespace

// ---- cross entropy -------------------------------------------------------

TEST(CrossEntropy, PerfectPredictionIsZero) {
  Rng rng = make_rng(1, {});
  const auto y = random_mask(rng, 4, 4);
  EXPECT_LE(cross_entropy(one_hot<double>(y), y), 1e-12);
}

TEST(CrossEntropy, UniformIsLogThree) {
  Rng rng = make_rng(2, {});
  const auto y = random_mask(rng, 5, 3);
  EXPECT_NEAR(cross_entropy(uniform_map(5, 3), y), std::log(3.0), 1e-12);
}

TEST(CrossEntropy, MatchesOracle) {
  Rng rng = make_rng(3, {});
  for (int t = 0; t < 20; ++t) {
    const auto p = random_probs(rng, 4, 4);
    const auto y = random_mask(rng, 4, 4);
    EXPECT_NEAR(cross_entropy(p, y), ce_oracle(p, y), 1e-6);
  }
}

TEST(CrossEntropy, RejectsOutOfRangeLabels) {
  LabelMask y(2, 2, 0);
  y(1, 1) = 3;
  EXPECT_THROW(cross_entropy(uniform_map(2, 2), y), Error);
}

// ---- dice ---------------------------------------------------------------

TEST(Dice, PerfectMatchIsZero) {
  Rng rng = make_rng(4, {});
  const auto y = random_mask(rng, 4, 4);
  EXPECT_NEAR(dice_loss(one_hot<double>(y), y), 0.0, 1e-12);
}

TEST(Dice, DisjointSupportsNearOne) {
  LabelMask y(4, 4), other(4, 4);
  for (int i = 0; i < 16; ++i) y[i] = static_cast<std::uint8_t>(i % 3), other[i] = static_cast<std::uint8_t>((i + 1) % 3);
  EXPECT_NEAR(dice_loss(one_hot<double>(other), y), 1.0, 1e-5);
}

TEST(Dice, MatchesScalarOracle) {
  Rng rng = make_rng(5, {});
  for (int t = 0; t < 20; ++t) {
    const auto p = random_probs(rng, 4, 4);
    const auto y = random_mask(rng, 4, 4);
    EXPECT_NEAR(dice_loss(p, y), dice_oracle(p, y, kDiceSmooth), 1e-12);
    EXPECT_NEAR(dice_loss(p, y), dice_oracle(p, y, 0.0), 1e-6);
  }
}

TEST(SupervisedLoss, HalfOfComponents) {
  Rng rng = make_rng(6, {});
  for (int t = 0; t < 10; ++t) {
    const auto p = random_probs(rng, 4, 4);
    const auto y = random_mask(rng, 4, 4);
    EXPECT_NEAR(supervised_loss(p, y), 0.5 * (cross_entropy(p, y) + dice_loss(p, y)), 1e-9);
  }
  const auto y = random_mask(rng, 4, 4);
  EXPECT_LE(supervised_loss(one_hot<double>(y), y), 1e-9);
}

// ---- hard cross supervision ----------------------------------------------

TEST(HardCrossSupervision, IdenticalOneHotIsZero) {
  Rng rng = make_rng(7, {});
  const auto oh = one_hot<double>(random_mask(rng, 4, 4));
  EXPECT_NEAR(hard_cross_supervision(oh, oh), 0.0, 1e-12);
}

TEST(HardCrossSupervision, UniformPeerBreaksTiesToLowestClass) {
  const auto pred_b = uniform_map(4, 4);
  const auto pred_a = one_hot<double>(LabelMask(4, 4, 0));
  EXPECT_NEAR(hard_cross_supervision(pred_a, pred_b), 0.0, 1e-12);
}

TEST(HardCrossSupervision, MatchesExplicitArgmaxDice) {
  Rng rng = make_rng(8, {});
  for (int t = 0; t < 20; ++t) {
    const auto a = random_probs(rng, 4, 4), b = random_probs(rng, 4, 4);
    ProbabilityMap<double> target(4, 4, kNumClasses);
    for (std::size_t i = 0; i < b.pixels(); ++i) {
      int best = 0;
      for (int k = 1; k < kNumClasses; ++k)
        if (b.at(i, k) > b.at(i, best)) best = k;
      target.at(i, best) = 1.0;
    }
    EXPECT_NEAR(hard_cross_supervision(a, b), dice_loss(a, target), 1e-9);
  }
}

// ---- sharpening ----------------------------------------------------------

TEST(Sharpen, TauOneIsIdentity) {
  Rng rng = make_rng(9, {});
  for (int t = 0; t < 20; ++t) {
    const auto p = random_probs(rng, 4, 4);
    const auto s = sharpen(p, 1.0);
    for (std::size_t i = 0; i < p.size(); ++i) ASSERT_NEAR(s[i], p[i], 1e-9);
  }
}

TEST(Sharpen, LowTemperatureConcentrates) {
  ProbabilityMap<double> p(1, 1, 3);
  p(0, 0, 0) = 0.7, p(0, 0, 1) = 0.2, p(0, 0, 2) = 0.1;
  const double expected = std::pow(0.7, 10) / (std::pow(0.7, 10) + std::pow(0.2, 10) + std::pow(0.1, 10));
  const auto s = sharpen(p, 0.1);
  EXPECT_NEAR(s(0, 0, 0), expected, 1e-12);
  EXPECT_GT(s(0, 0, 0), 0.999);
}

TEST(Sharpen, UniformUnchanged) {
  for (double tau : {0.05, 0.1, 0.5, 2.0}) {
    const auto s = sharpen(uniform_map(3, 3), tau);
    for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(s[i], 1.0 / 3, 1e-12);
  }
}

TEST(Sharpen, RejectsNonPositiveTau) {
  EXPECT_THROW(sharpen(uniform_map(2, 2), 0.0), ConfigError);
  EXPECT_THROW(sharpen(uniform_map(2, 2), -1.0), ConfigError);
}

TEST(Sharpen, PreservesArgmaxAndNormalization) {
  Rng rng = make_rng(10, {});
  for (int t = 0; t < 50; ++t) {
    const auto p = softmax(separated_logits(rng, 4, 4, 1e-3));
    for (double tau : {0.01, 0.1, 0.7, 1.0, 3.0}) {
      const auto s = sharpen(p, tau);
      EXPECT_TRUE(is_distribution(s, 1e-9));
      EXPECT_EQ(argmax(s), argmax(p));
    }
  }
}

// ---- soft consistency -----------------------------------------------------

TEST(SoftConsistency, EqualIsZero) {
  Rng rng = make_rng(11, {});
  const auto p = random_probs(rng, 4, 4);
  EXPECT_EQ(soft_consistency(p, p), 0.0);
}

TEST(SoftConsistency, ConstantDifference) {
  EXPECT_NEAR(soft_consistency(ProbabilityMap<double>(2, 2, 3, 1.0), ProbabilityMap<double>(2, 2, 3, 0.0)), 1.0, 1e-15);
}

TEST(SoftConsistency, MatchesOracle) {
  Rng rng = make_rng(12, {});
  for (int t = 0; t < 20; ++t) {
    const auto a = random_probs(rng, 4, 4), b = random_probs(rng, 4, 4);
    EXPECT_NEAR(soft_consistency(a, b), mse_oracle(a, b), 1e-9);
  }
}

// ---- classifier determinacy disparity -------------------------------------

TEST(Cdd, OneHotAgreementAndDisagreement) {
  LabelMask y(3, 3), z(3, 3);
  for (int i = 0; i < 9; ++i) y[i] = static_cast<std::uint8_t>(i % 3), z[i] = static_cast<std::uint8_t>((i + 2) % 3);
  EXPECT_NEAR(cdd_loss(one_hot<double>(y), one_hot<double>(y)), 0.0, 1e-15);
  EXPECT_NEAR(cdd_loss(one_hot<double>(y), one_hot<double>(z)), 1.0, 1e-15);
}

TEST(Cdd, MatchesDoubleLoopOracleAndIsSymmetric) {
  Rng rng = make_rng(13, {});
  for (int t = 0; t < 20; ++t) {
    const auto a = random_probs(rng, 3, 3), b = random_probs(rng, 3, 3);
    const double v = cdd_loss(a, b);
    EXPECT_NEAR(v, cdd_oracle(a, b), 1e-9);
    EXPECT_NEAR(v, cdd_loss(b, a), 1e-9);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

// ---- NW-Dice --------------------------------------------------------------

TEST(NWDiceWeights, EqualLabelsGiveUnitWeights) {
  Rng rng = make_rng(14, {});
  const auto y = random_mask(rng, 8, 8);
  const auto w = nw_dice_weights(y, y, NWDiceConfig{});
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_EQ(w[i], 1.0);
}

TEST(NWDiceWeights, SingleInteriorDifferenceGivesOnePlusR) {
  LabelMask y(16, 16, 0);
  LabelMask p = y;
  p(8, 8) = kPS;
  NWDiceConfig cfg;
  cfg.radius = 5;
  const auto w = nw_dice_weights(p, y, cfg);
  for (int k = 0; k < 2; ++k) EXPECT_EQ(w(8, 8, k), 6.0) << "class " << k;
  // the oracle agrees that every neighborhood order differs at that pixel
  for (int k = 1; k <= 5; ++k) EXPECT_NE(box_count_oracle(p, kPS, 8, 8, k), box_count_oracle(y, kPS, 8, 8, k));
  EXPECT_EQ(w(8, 8, kFH), 1.0);
}

TEST(NWDiceWeights, BoundedByOnePlusR) {
  Rng rng = make_rng(15, {});
  for (int r : {1, 3, 5, 7}) {
    NWDiceConfig cfg;
    cfg.radius = r;
    const auto w = nw_dice_weights(random_mask(rng, 8, 8), random_mask(rng, 8, 8), cfg);
    for (std::size_t i = 0; i < w.size(); ++i) {
      EXPECT_GE(w[i], 1.0);
      EXPECT_LE(w[i], 1.0 + r);
    }
  }
}

TEST(NWDiceWeights, RejectsRadiusBelowOne) {
  NWDiceConfig cfg;
  cfg.radius = 0;
  LabelMask y(4, 4, 0);
  EXPECT_THROW(nw_dice_weights(y, y, cfg), ConfigError);
}

TEST(NWDice, PerfectPredictionAndRadiusIndependence) {
  Rng rng = make_rng(16, {});
  const auto y = random_mask(rng, 8, 8);
  const auto p = one_hot<double>(y);
  std::vector<double> values;
  for (int r : {3, 5, 7}) {
    NWDiceConfig cfg;
    cfg.radius = r;
    values.push_back(nw_dice_loss(p, y, cfg));
    EXPECT_NEAR(values.back(), 0.0, 1e-12);
  }
  EXPECT_EQ(values[0], values[1]);
  EXPECT_EQ(values[1], values[2]);
}

TEST(NWDice, MatchesScalarLoopOracle) {
  Rng rng = make_rng(17, {});
  NWDiceConfig cfg;
  cfg.radius = 5;
  cfg.class_weights = {1.0, 2.0, 1.0};
  for (int t = 0; t < 20; ++t) {
    const auto p = random_probs(rng, 8, 8);
    const auto y = random_blob_mask(rng, 8, 8);
    EXPECT_NEAR(nw_dice_loss(p, y, cfg), nw_dice_oracle(p, y, cfg.radius, cfg.class_weights, cfg.smooth), 1e-6);
  }
}

TEST(NWDice, UnitWeightsEqualClassWeightedDice) {
  Rng rng = make_rng(18, {});
  NWDiceConfig cfg;
  for (int t = 0; t < 20; ++t) {
    const auto p = random_probs(rng, 8, 8);
    const auto y = random_mask(rng, 8, 8);
    const WeightMap ones(8, 8, kNumClasses, 1.0);
    const double forced = weighted_dice(p, one_hot<double>(y), &ones, &cfg.class_weights, cfg.smooth);
    EXPECT_NEAR(forced, class_weighted_dice_loss(p, y, cfg), 1e-9);
  }
  // and with a prediction equal to the target the NW weights degenerate to one
  const auto y = random_mask(rng, 8, 8);
  const auto p = one_hot<double>(y);
  EXPECT_NEAR(nw_dice_loss(p, y, cfg), class_weighted_dice_loss(p, y, cfg), 1e-9);
}

TEST(NWDice, ClassWeightsChangeTheLoss) {
  Rng rng = make_rng(19, {});
  const auto p = random_probs(rng, 8, 8);
  const auto y = random_blob_mask(rng, 8, 8);
  NWDiceConfig a, b;
  a.class_weights = {1.0, 1.0, 1.0};
  b.class_weights = {1.0, 3.0, 1.0};
  EXPECT_NE(nw_dice_loss(p, y, a), nw_dice_loss(p, y, b));
}

// ---- total loss -----------------------------------------------------------

TEST(TotalLoss, DefaultWeightsAllOnes) {
  const auto b = total_loss({1, 1, 1, 1, 1}, LossWeights{});
  EXPECT_NEAR(b.l_total, 5.6, 1e-12);
  EXPECT_EQ(total_loss({}, LossWeights{}).l_total, 0.0);
}

TEST(TotalLoss, RecompositionAndNonFinite) {
  Rng rng = make_rng(20, {});
  for (int t = 0; t < 50; ++t) {
    LossComponents c{uniform01(rng), uniform01(rng), uniform01(rng), uniform01(rng), uniform01(rng)};
    const auto b = total_loss(c, LossWeights{});
    EXPECT_NEAR(b.l_total, c.l_sup + 0.5 * c.l_h + 1.0 * c.l_s + 3.0 * c.l_cdd + 0.1 * c.l_cr, 1e-9);
  }
  try {
    total_loss({0, 0, std::nan(""), 0, 0}, LossWeights{});
    FAIL() << "expected a throw";
  } catch (const NonFiniteLossError& e) {
    EXPECT_NE(std::string(e.what()).find("l_s"), std::string::npos);
  }
}

// ---- gradients against central differences ---------------------------------

class LossGradients : public ::testing::Test {
 protected:
  static constexpr int kTrials = 20;

  template <typename Loss>
  void check(Loss loss, std::uint64_t seed, bool separated = false) {
    Rng rng = make_rng(seed, {});
    for (int t = 0; t < kTrials; ++t) {
      const auto z = separated ? separated_logits(rng, 4, 4) : random_logits(rng, 4, 4);
      const auto y = random_mask(rng, 4, 4);
      const auto p = softmax(z);
      ProbabilityMap<double> gp;
      loss(p, y, &gp);
      const auto gz = logit_grad(p, gp);
      const auto res = check_gradient([&](const ProbabilityMap<double>& zz) { return loss(softmax(zz), y, static_cast<ProbabilityMap<double>*>(nullptr)); }, z, gz);
      EXPECT_TRUE(res.ok) << "trial " << t << " max rel err " << res.max_rel;
    }
  }
};

TEST_F(LossGradients, CrossEntropy) {
  check([](const auto& p, const auto& y, auto* g) { return cross_entropy(p, y, g); }, 101);
}

TEST_F(LossGradients, Dice) {
  check([](const auto& p, const auto& y, auto* g) { return dice_loss(p, y, g); }, 102);
}

TEST_F(LossGradients, NWDice) {
  NWDiceConfig cfg;
  check([&](const auto& p, const auto& y, auto* g) { return nw_dice_loss(p, y, cfg, g); }, 103, true);
}

TEST_F(LossGradients, HardCrossSupervision) {
  Rng rng = make_rng(104, {});
  for (int t = 0; t < kTrials; ++t) {
    const auto z = random_logits(rng, 4, 4);
    const auto peer = random_probs(rng, 4, 4);
    const auto p = softmax(z);
    ProbabilityMap<double> gp;
    hard_cross_supervision(p, peer, &gp);
    const auto res = check_gradient([&](const auto& zz) { return hard_cross_supervision(softmax(zz), peer); }, z,
                                    logit_grad(p, gp));
    EXPECT_TRUE(res.ok) << "max rel err " << res.max_rel;
  }
}

TEST_F(LossGradients, SoftConsistency) {
  Rng rng = make_rng(105, {});
  for (int t = 0; t < kTrials; ++t) {
    const auto z = random_logits(rng, 4, 4);
    const auto target = sharpen(random_probs(rng, 4, 4), 0.1);
    const auto p = softmax(z);
    ProbabilityMap<double> gp;
    soft_consistency(p, target, &gp);
    const auto res = check_gradient([&](const auto& zz) { return soft_consistency(softmax(zz), target); }, z,
                                    logit_grad(p, gp));
    EXPECT_TRUE(res.ok) << "max rel err " << res.max_rel;
  }
}

TEST_F(LossGradients, CddBothInputs) {
  Rng rng = make_rng(106, {});
  for (int t = 0; t < kTrials; ++t) {
    const auto z1 = random_logits(rng, 4, 4), z2 = random_logits(rng, 4, 4);
    const auto p1 = softmax(z1), p2 = softmax(z2);
    ProbabilityMap<double> g1, g2;
    cdd_loss(p1, p2, &g1, &g2);
    const auto r1 = check_gradient([&](const auto& zz) { return cdd_loss(softmax(zz), p2); }, z1, logit_grad(p1, g1));
    const auto r2 = check_gradient([&](const auto& zz) { return cdd_loss(p1, softmax(zz)); }, z2, logit_grad(p2, g2));
    EXPECT_TRUE(r1.ok) << "max rel err " << r1.max_rel;
    EXPECT_TRUE(r2.ok) << "max rel err " << r2.max_rel;
  }
}

// ---- detachment -------------------------------------------------------------

TEST(Detachment, HardPseudoLabelSourceCarriesNoGradient) {
  Rng rng = make_rng(201, {});
  const auto a = random_probs(rng, 4, 4);
  const auto zb = separated_logits(rng, 4, 4);
  const double base = hard_cross_supervision(a, softmax(zb));
  auto moved = zb;
  for (std::size_t i = 0; i < moved.size(); ++i) moved[i] += 1e-4 * normal01(rng);
  EXPECT_EQ(hard_cross_supervision(a, softmax(moved)), base);
}

TEST(Detachment, SharpenedTargetIsConstant) {
  Rng rng = make_rng(202, {});
  const auto p = random_probs(rng, 4, 4), peer = random_probs(rng, 4, 4);
  const auto target = sharpen(peer, 0.1);
  ProbabilityMap<double> g;
  soft_consistency(p, target, &g);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(g[i], 2 * (p[i] - target[i]) / p.size(), 1e-15);
}

TEST(Detachment, NWDiceWeightsAreConstants) {
  Rng rng = make_rng(203, {});
  NWDiceConfig cfg;
  const auto z = separated_logits(rng, 8, 8);
  const auto y = random_blob_mask(rng, 8, 8);
  const auto p = softmax(z);
  ProbabilityMap<double> g_nw, g_fixed;
  nw_dice_loss(p, y, cfg, &g_nw);
  const auto w = nw_dice_weights(argmax(p), y, cfg);
  weighted_dice(p, one_hot<double>(y), &w, &cfg.class_weights, cfg.smooth, &g_fixed);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_EQ(g_nw[i], g_fixed[i]);
}
