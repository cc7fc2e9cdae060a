#include <gtest/gtest.h>

#include "fundus/ensemble.hpp"
#include "fundus/rng.hpp"

using namespace fundus;

namespace {

ProbVector pv(double p0) { return {{p0, 1.0 - p0}}; }

ProbVector swapped(const ProbVector& p) { return {{p[1], p[0]}}; }

std::map<View, ProbVector> random_views(CounterRng& rng) {
  std::map<View, ProbVector> m;
  for (View v : kModelViews) m[v] = pv(rng.uniform());
  return m;
}

}  // namespace

TEST(Fuse, WeightedMeanExample) {
  const auto p = fuse({{View::original, pv(0.8)}, {View::cropped, pv(0.4)}, {View::polar, pv(0.5)}}, {});
  EXPECT_NEAR(p[0], (1.6 + 0.2 + 0.25) / 3, 1e-15);
  EXPECT_NEAR(p[1], (0.4 + 0.3 + 0.25) / 3, 1e-15);
  EXPECT_NEAR(p[0], 0.68333, 1e-5);
  EXPECT_EQ(decide(p), 0);
}

TEST(Fuse, IdenticalViewsAreAFixedPoint) {
  const ProbVector q{{0.37, 0.63}};
  const auto p = fuse({{View::original, q}, {View::cropped, q}, {View::polar, q}}, {});
  EXPECT_NEAR(p[0], 0.37, 1e-15);
  EXPECT_NEAR(p[1], 0.63, 1e-15);
}

TEST(Fuse, SingleViewPassesThrough) {
  EnsembleConfig cfg;
  cfg.weights[View::polar] = 7.5;
  EXPECT_EQ(fuse({{View::polar, pv(0.2)}}, cfg), pv(0.2));
  EXPECT_EQ(fuse({{View::cropped, pv(0.9)}}, {}), pv(0.9));
}

TEST(Fuse, MissingViewRenormalizesOverPresentViews) {
  const auto p = fuse({{View::original, pv(0.8)}, {View::cropped, pv(0.4)}}, {});
  EXPECT_NEAR(p[0], (2.0 * 0.8 + 0.5 * 0.4) / 2.5, 1e-15);
}

TEST(Fuse, Errors) {
  EXPECT_THROW(fuse({}, {}), DataError);
  EnsembleConfig zero;
  zero.weights[View::original] = 0.0;
  EXPECT_THROW(fuse({{View::original, pv(0.5)}}, zero), DataError);
  EnsembleConfig only_original;
  only_original.weights = {{View::original, 1.0}};
  EXPECT_THROW(fuse({{View::polar, pv(0.5)}}, only_original), UsageError);
}

TEST(Fuse, ConvexCombinationProperties) {
  CounterRng rng(1);
  for (int t = 0; t < 2000; ++t) {
    const auto preds = random_views(rng);
    EnsembleConfig cfg;
    for (View v : kModelViews) cfg.weights[v] = rng.uniform(0.0, 3.0);
    const auto p = fuse(preds, cfg);
    ASSERT_NEAR(p[0] + p[1], 1.0, 1e-9);
    for (int j = 0; j < 2; ++j) {
      double lo = 1, hi = 0;
      for (const auto& [v, q] : preds) lo = std::min(lo, q[j]), hi = std::max(hi, q[j]);
      ASSERT_GE(p[j], lo - 1e-15);
      ASSERT_LE(p[j], hi + 1e-15);
    }
    EnsembleConfig scaled = cfg;
    const double c = rng.uniform(0.01, 100.0);
    for (auto& [v, w] : scaled.weights) w *= c;
    const auto q = fuse(preds, scaled);
    ASSERT_NEAR(p[0], q[0], 1e-12);
    ASSERT_NEAR(p[1], q[1], 1e-12);
  }
}

TEST(Fuse, ClassRelabelingCommutes) {
  CounterRng rng(2);
  for (int t = 0; t < 2000; ++t) {
    const auto preds = random_views(rng);
    std::map<View, ProbVector> flipped;
    for (const auto& [v, q] : preds) flipped[v] = swapped(q);
    const auto p = fuse(preds, {}), q = fuse(flipped, {});
    ASSERT_NEAR(q[0], p[1], 1e-15);
    ASSERT_NEAR(q[1], p[0], 1e-15);
    if (std::abs(p[0] - p[1]) > 1e-9) {
      ASSERT_EQ(decide(q), 1 - decide(p));
    }
  }
}

TEST(Decide, ArgmaxWithReferableTieBreak) {
  EXPECT_EQ(decide({{0.68333, 0.31667}}), 0);
  EXPECT_EQ(decide({{0.5, 0.5}}), 1);
  EXPECT_EQ(decide({{0.1, 0.9}}), 1);
  EXPECT_EQ(decide({{0.5 + 1e-13, 0.5 - 1e-13}}), 1);
  EXPECT_EQ(decide({{0.5 + 1e-9, 0.5 - 1e-9}}), 0);
}

TEST(EnsembleConfig, DefaultsAndConfigKeys) {
  const EnsembleConfig d;
  EXPECT_EQ(d.weights.at(View::original), 2.0);
  EXPECT_EQ(d.weights.at(View::cropped), 0.5);
  EXPECT_EQ(d.weights.at(View::polar), 0.5);
  const auto cfg = EnsembleConfig::from(KeyValueConfig::parse("weight.cropped = 1.5\n"));
  EXPECT_EQ(cfg.weights.at(View::cropped), 1.5);
  EXPECT_EQ(cfg.weights.at(View::original), 2.0);
  EXPECT_THROW(EnsembleConfig::from(KeyValueConfig::parse("weight.polar = -1\n")), UsageError);
  EXPECT_THROW(EnsembleConfig::from(
                   KeyValueConfig::parse("weight.original = 0\nweight.cropped = 0\nweight.polar = 0\n")),
               UsageError);
}
