#include <gtest/gtest.h>

#include <random>

#include "support/oracles.hpp"
#include "support/synthetic.hpp"
#include "ultra/metrics.hpp"

namespace ultra {
namespace {

Grid<std::uint8_t> mask(std::size_t rows, std::size_t cols, std::vector<std::uint8_t> v) {
  return Grid<std::uint8_t>(rows, cols, std::move(v));
}

LabelRaster raster(std::size_t rows, std::size_t cols, std::vector<std::uint16_t> v) {
  return LabelRaster{Grid<std::uint16_t>(rows, cols, std::move(v))};
}

TEST(Iou, BasicCases) {
  EXPECT_EQ(iou(mask(1, 4, {1, 1, 0, 0}), mask(1, 4, {1, 1, 0, 0})), 1.0);
  EXPECT_EQ(iou(mask(1, 4, {1, 1, 0, 0}), mask(1, 4, {0, 0, 1, 1})), 0.0);
  EXPECT_EQ(iou(mask(1, 4, {1, 1, 0, 0}), mask(1, 4, {1, 0, 0, 0})), 0.5);
  EXPECT_EQ(iou(mask(1, 4, {0, 0, 0, 0}), mask(1, 4, {0, 0, 0, 0})), 1.0);
  EXPECT_THROW(iou(mask(1, 2, {0, 0}), mask(2, 1, {0, 0})), Error);
}

TEST(Iou, ValidityMaskDropsPixels) {
  const std::vector<std::uint8_t> valid{1, 1, 0, 0};
  EXPECT_EQ(iou(mask(1, 4, {1, 0, 1, 1}), mask(1, 4, {1, 0, 0, 0}), valid), 1.0);
}

TEST(CompensatedSum, RecoversSmallTerms) {
  std::vector<double> v{1e16, 1.0, -1e16};
  EXPECT_EQ(compensated_sum(v), 1.0);
  EXPECT_EQ(compensated_mean(std::vector<double>{}), 0.0);
}

TEST(Match, DiagonalIsIdentity) {
  ConfusionMatrix cm{Grid<std::uint64_t>(3, 3, std::vector<std::uint64_t>{5, 0, 0, 0, 6, 0, 0, 0, 7})};
  const std::vector<std::uint16_t> id{0, 1, 2};
  EXPECT_EQ(match_clusters(cm, MatchMode::hungarian), id);
  EXPECT_EQ(match_clusters(cm, MatchMode::majority), id);
}

TEST(Match, HungarianIsOneToOneMajorityIsNot) {
  ConfusionMatrix a{Grid<std::uint64_t>(2, 2, std::vector<std::uint64_t>{10, 0, 8, 9})};
  EXPECT_EQ(match_clusters(a, MatchMode::hungarian), (std::vector<std::uint16_t>{0, 1}));
  EXPECT_EQ(match_clusters(a, MatchMode::majority), (std::vector<std::uint16_t>{0, 1}));

  ConfusionMatrix b{Grid<std::uint64_t>(2, 2, std::vector<std::uint64_t>{10, 0, 8, 1})};
  EXPECT_EQ(match_clusters(b, MatchMode::hungarian), (std::vector<std::uint16_t>{0, 1}));
  EXPECT_EQ(match_clusters(b, MatchMode::majority), (std::vector<std::uint16_t>{0, 0}));
}

TEST(Match, ExtraClustersStayUnmatched) {
  ConfusionMatrix cm{Grid<std::uint64_t>(3, 2, std::vector<std::uint64_t>{0, 4, 1, 0, 5, 0})};
  EXPECT_EQ(match_clusters(cm, MatchMode::hungarian),
            (std::vector<std::uint16_t>{1, kIgnoreLabel, 0}));
}

TEST(Match, HungarianEqualsExhaustiveSearch) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> dim(1, 5), val(0, 9);
  for (int trial = 0; trial < 400; ++trial) {
    Grid<std::uint64_t> w(dim(rng), dim(rng));
    for (auto& x : w.values()) x = val(rng);
    const auto assignment = max_weight_assignment(w);
    ASSERT_EQ(assignment.size(), w.rows());
    std::uint64_t total = 0;
    std::vector<bool> used(w.cols(), false);
    for (std::size_t r = 0; r < w.rows(); ++r) {
      if (assignment[r] < 0) continue;
      ASSERT_FALSE(used[assignment[r]]);
      used[assignment[r]] = true;
      total += w(r, assignment[r]);
    }
    EXPECT_EQ(total, testing::exhaustive_best_assignment(w)) << "trial " << trial;
  }
}

TEST(Evaluate, PermutedPerfectPredictionScoresOne) {
  const auto gt = raster(2, 3, {0, 0, 1, 1, 2, 2});
  const auto pred = raster(2, 3, {2, 2, 0, 0, 1, 1});
  for (auto mode : {MatchMode::hungarian, MatchMode::majority}) {
    const auto r = evaluate(std::vector{pred}, std::vector{gt}, mode);
    EXPECT_EQ(r.u_accuracy, 1.0);
    EXPECT_EQ(r.u_miou, 1.0);
  }
}

TEST(Evaluate, ConstantPredictionAgainstTwoClasses) {
  const auto gt = raster(1, 4, {0, 0, 1, 1});
  const auto pred = raster(1, 4, {0, 0, 0, 0});
  const auto r = evaluate(std::vector{pred}, std::vector{gt});
  EXPECT_EQ(r.u_accuracy, 0.5);
  EXPECT_EQ(r.u_miou, 0.25);
  EXPECT_EQ(r.images[0].k_pred, 1u);
  EXPECT_EQ(r.images[0].k_gt, 2u);
}

TEST(Evaluate, IgnorePixelsAreSkipped) {
  const auto gt = raster(1, 4, {0, kIgnoreLabel, 1, kIgnoreLabel});
  const auto pred = raster(1, 4, {3, 0, 5, 0});
  const auto r = evaluate(std::vector{pred}, std::vector{gt});
  EXPECT_EQ(r.u_accuracy, 1.0);
  EXPECT_EQ(r.u_miou, 1.0);
}

TEST(Evaluate, Failures) {
  const auto all_ignore = raster(1, 2, {kIgnoreLabel, kIgnoreLabel});
  EXPECT_THROW(evaluate(std::vector{raster(1, 2, {0, 0})}, std::vector{all_ignore}), Error);
  EXPECT_THROW(evaluate(std::vector{raster(1, 3, {0, 0, 0})}, std::vector{raster(1, 2, {0, 0})}),
               Error);
  EXPECT_THROW(evaluate(std::vector{raster(1, 2, {kIgnoreLabel, 0})}, std::vector{raster(1, 2, {0, 0})}),
               Error);
  EXPECT_THROW(evaluate(std::vector<LabelRaster>{}, std::vector<LabelRaster>{}), Error);
}

TEST(Evaluate, PoolsCountsAcrossImages) {
  // Image one is perfect on 4 pixels; image two gets 2 of 3 right after
  // matching. Pooled accuracy is 6/7, not the mean of per-image scores.
  const auto gt1 = raster(1, 4, {0, 0, 1, 1});
  const auto p1 = raster(1, 4, {1, 1, 0, 0});
  const auto gt2 = raster(1, 3, {0, 0, 1});
  const auto p2 = raster(1, 3, {0, 0, 0});
  const auto r = evaluate(std::vector{p1, p2}, std::vector{gt1, gt2});
  EXPECT_DOUBLE_EQ(r.u_accuracy, 6.0 / 7.0);
  // class 0: tp 4, gt 4, pred 5 -> 4/5; class 1: tp 2, gt 3, pred 2 -> 2/3
  EXPECT_DOUBLE_EQ(r.u_miou, (0.8 + 2.0 / 3.0) / 2.0);
}

TEST(Evaluate, InvariantUnderPredictionRelabeling) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto gt = testing::random_raster(rng, 6, 7, 4, 0.1);
    auto pred = testing::random_raster(rng, 6, 7, 5);
    std::vector<std::uint16_t> perm{0, 1, 2, 3, 4};
    std::shuffle(perm.begin(), perm.end(), rng);
    auto relabeled = pred;
    for (auto& v : relabeled.values.values()) v = perm[v];
    for (auto mode : {MatchMode::hungarian, MatchMode::majority}) {
      const auto a = evaluate(std::vector{pred}, std::vector{gt}, mode);
      const auto b = evaluate(std::vector{relabeled}, std::vector{gt}, mode);
      EXPECT_EQ(a.u_accuracy, b.u_accuracy);
      // Hungarian can meet tied optimal matchings whose mIoU differ, so only
      // the row-wise majority rule is label-invariant for mIoU.
      if (mode == MatchMode::majority) EXPECT_EQ(a.u_miou, b.u_miou);
      EXPECT_GE(a.u_accuracy, 0.0);
      EXPECT_LE(a.u_accuracy, 1.0);
    }
  }
}

TEST(TokenClasses, MajorityUnderEachPatch) {
  const auto gt = raster(2, 4, {0, 0, 1, 1, 0, 2, 1, kIgnoreLabel});
  EXPECT_EQ(token_classes(gt, 1, 2), (std::vector<std::uint16_t>{0, 1}));
}

BinaryMask as_mask(Grid<std::uint8_t> g) { return BinaryMask{std::move(g), kDefaultTau}; }

TEST(Itiou, PerfectAndDisjointMasks) {
  const auto gt = raster(2, 2, {0, 1, 0, 1});
  std::vector<BinaryMask> perfect{as_mask(mask(2, 2, {1, 0, 1, 0})), as_mask(mask(2, 2, {0, 1, 0, 1})),
                                  as_mask(mask(2, 2, {1, 0, 1, 0})), as_mask(mask(2, 2, {0, 1, 0, 1}))};
  EXPECT_EQ(itiou_from_masks(perfect, gt, 2, 2), 1.0);
  std::vector<BinaryMask> swapped{perfect[1], perfect[0], perfect[3], perfect[2]};
  EXPECT_EQ(itiou_from_masks(swapped, gt, 2, 2), 0.0);
}

TEST(Itiou, MatchesNaiveOracle) {
  std::mt19937_64 rng(5);
  std::bernoulli_distribution coin(0.4);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t gh = 1 + trial % 3, gw = 1 + (trial / 3) % 3, scale = 1 + trial % 2;
    auto gt = testing::random_raster(rng, gh * scale + trial % 2, gw * scale, 3, 0.1);
    gt.values.values()[0] = 0;  // at least one evaluable pixel
    std::vector<BinaryMask> masks;
    for (std::size_t j = 0; j < gh * gw; ++j) {
      Grid<std::uint8_t> g(gt.height(), gt.width());
      for (auto& v : g.values()) v = coin(rng);
      masks.push_back(as_mask(std::move(g)));
    }
    EXPECT_NEAR(itiou_from_masks(masks, gt, gh, gw), testing::naive_itiou(masks, gt, gh, gw), 1e-9);
  }
}

TEST(Itiou, TwoBlockTraceBoundaryBlur) {
  // Bilinear upsampling at scale 2 puts 0.75 / 0.25 on the two pixel rows
  // astride the block boundary. At tau = 0.2 each token mask spills one row
  // into the other block: IoU 4 / 5 for every token.
  const Trace t = testing::two_block_trace(4, 4, 2, 2);
  EXPECT_DOUBLE_EQ(itiou(t, testing::two_block_truth(4, 4, 2, 2), 2), 0.8);
  // At tau = 0.3 the 0.25 row drops out and masks are exact.
  EXPECT_EQ(itiou(t, testing::two_block_truth(4, 4, 2, 2), 2, 0.3), 1.0);
  EXPECT_THROW(itiou(t, testing::two_block_truth(4, 4, 1, 2), 2), Error);
  EXPECT_THROW(itiou(t, testing::two_block_truth(4, 4, 2, 2), 3), Error);
}

}  // namespace
}  // namespace ultra
