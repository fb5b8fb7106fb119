#include <gtest/gtest.h>

#include <random>

#include "support/oracles.hpp"
#include "support/synthetic.hpp"
#include "ultra/export.hpp"
#include "ultra/textinterp.hpp"

namespace ultra {
namespace {

TEST(TokenContributions, SingleSummaryTokenIsItsMapRow) {
  std::mt19937_64 rng(1);
  const Trace t = testing::random_text_trace(rng, 4, 1, 3, 2);
  const auto c = token_contributions(t, 3);
  const auto raw = testing::naive_relevance(t, 5, false);
  ASSERT_EQ(c.scores.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(c.scores[i], raw[i], 1e-12);
}

TEST(TokenContributions, IdenticalMapsGiveThatMap) {
  // Zero gradients collapse every map to a one-hot row on the target itself,
  // which lies past the context, so every context score is zero.
  std::mt19937_64 rng(2);
  Trace t = testing::random_text_trace(rng, 3, 2, 2, 1);
  std::fill(t.gradients.data.begin(), t.gradients.data.end(), 0.0f);
  const auto c = token_contributions(t, 2);
  EXPECT_EQ(c.scores, (std::vector<double>{0.0, 0.0, 0.0}));
}

TEST(TokenContributions, MatchesNaiveOracle) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const std::uint64_t ctx = 1 + trial % 5, sum = 1 + trial % 3;
    const Trace t = testing::random_text_trace(rng, ctx, sum, 2 + trial % 3, 1 + trial % 2);
    const auto got = token_contributions(t, t.manifest.target_layer);
    const auto want = testing::naive_lambda(t);
    ASSERT_EQ(got.scores.size(), ctx);
    for (std::size_t i = 0; i < ctx; ++i)
      EXPECT_TRUE(testing::relative_close(got.scores[i], want[i], 1e-9))
          << got.scores[i] << " vs " << want[i];
  }
}

TEST(TokenContributions, FourByTwoExample) {
  std::mt19937_64 rng(4);
  const Trace t = testing::random_text_trace(rng, 4, 2, 2, 2);
  const auto got = token_contributions(t, 2);
  const auto a = testing::naive_relevance(t, 5, false);
  const auto b = testing::naive_relevance(t, 6, false);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(got.scores[i], (a[i] + b[i]) / 2.0, 1e-12);
}

TEST(TokenContributions, SeparatorShiftsSummaryStart) {
  std::mt19937_64 rng(5);
  testing::TraceSpec spec;
  spec.modality = Modality::text;
  spec.n = 6;
  spec.layers = 2;
  spec.target_layer = 2;
  spec.context_len = 3;
  spec.summary_len = 2;
  spec.causal = true;
  spec.targets = {5, 6};
  Trace t = testing::random_trace(rng, spec);
  t.manifest.summary_start = 5;
  const auto got = token_contributions(t, 2);
  const auto a = testing::naive_relevance(t, 5, false);
  const auto b = testing::naive_relevance(t, 6, false);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(got.scores[i], (a[i] + b[i]) / 2.0, 1e-12);
}

TEST(TokenContributions, Errors) {
  std::mt19937_64 rng(6);
  const Trace t = testing::random_text_trace(rng, 3, 2, 3, 1);
  EXPECT_THROW(token_contributions(t, 2), Error);
  Trace missing = t;
  missing.manifest.target_token_indices = {4};
  EXPECT_THROW(token_contributions(missing, 3), Error);
  testing::TraceSpec vision;
  EXPECT_THROW(token_contributions(testing::random_trace(rng, vision), 3), Error);
}

TEST(TokenContributions, DeterministicAcrossThreads) {
  std::mt19937_64 rng(7);
  const Trace t = testing::random_text_trace(rng, 8, 4, 3, 2);
  EXPECT_EQ(token_contributions(t, 3, 1).scores, token_contributions(t, 3, 8).scores);
}

TEST(Heatmap, Intensities) {
  EXPECT_EQ(heat_intensities({0.25, 0.5, 0.75}), (std::vector<double>{0.0, 0.5, 1.0}));
  EXPECT_EQ(heat_intensities({0.3, 0.3}), (std::vector<double>{0.5, 0.5}));
}

TEST(Heatmap, RenderingIsDeterministic) {
  TokenContribution c{{0.0, 0.5, 1.0}, 2, {"a", "<b>", "c"}};
  const auto html = render_heatmap(c, HeatmapFormat::html);
  EXPECT_EQ(html, render_heatmap(c, HeatmapFormat::html));
  EXPECT_NE(html.find("&lt;b&gt;"), std::string::npos);
  EXPECT_NE(html.find("rgb(255,0,0)"), std::string::npos);
  EXPECT_NE(html.find("rgb(255,255,255)"), std::string::npos);
  const auto ansi = render_heatmap(c, HeatmapFormat::ansi);
  EXPECT_NE(ansi.find("\x1b[48;2;255;128;128m"), std::string::npos);
  EXPECT_THROW(render_heatmap(TokenContribution{}, HeatmapFormat::ansi), Error);
}

TEST(Heatmap, CsvExport) {
  TokenContribution c{{0.25, 0.125}, 2, {"x,y", "z"}};
  EXPECT_EQ(contribution_csv(c), "token_index,surface,lambda\n0,\"x,y\",0.25\n1,z,0.125\n");
}

}  // namespace
}  // namespace ultra
