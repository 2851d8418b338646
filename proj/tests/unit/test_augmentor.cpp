#include <gtest/gtest.h>

#include <random>

#include "support/synthetic.hpp"

using namespace histonorm;
using namespace histonorm::testing;

namespace {

// Upper 0.1% point of the chi-square distribution with 7 degrees of freedom.
constexpr double kChiSquare7At001 = 24.3219;

AugmentationPlan dummy_plan(std::size_t refs, double p, std::uint64_t seed) {
  AugmentationPlan plan;
  plan.references.resize(refs);
  plan.p_passthrough = p;
  plan.seed = seed;
  return plan;
}

const std::vector<ReferenceProfile>& tile_profiles() {
  static const std::vector<ReferenceProfile> profiles = [] {
    std::vector<ReferenceProfile> out;
    for (int i = 0; i < 7; ++i)
      out.push_back(build_reference_profile(tissue_tile(200 + i, canonical_basis()).image, {}, "r" + std::to_string(i)));
    return out;
  }();
  return profiles;
}

}  // namespace

TEST(Rng, StreamsArePureFunctionsOfTheirKey) {
  RngState a = item_stream(1, 2, 3), b = item_stream(1, 2, 3);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_NE(item_stream(1, 2, 3).next_u64(), item_stream(1, 2, 4).next_u64());
  EXPECT_NE(item_stream(1, 2, 3).next_u64(), item_stream(1, 3, 3).next_u64());
  EXPECT_NE(item_stream(1, 2, 3).next_u64(), item_stream(2, 2, 3).next_u64());
}

TEST(Rng, UnitDrawsLieInHalfOpenInterval) {
  RngState r = item_stream(9, 0, 0);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.next_unit();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
  }
}

TEST(Plan, BranchProbabilitiesSumToOne) {
  for (std::size_t r : {1, 3, 7, 13})
    for (double p : {0.0, 0.25, 0.5, 0.9, 1.0}) {
      const auto probs = dummy_plan(r, p, 0).branch_probabilities();
      EXPECT_EQ(probs.size(), r + 1);
      EXPECT_NEAR(std::accumulate(probs.begin(), probs.end(), 0.0), 1.0, 1e-12);
    }
  EXPECT_NEAR(dummy_plan(7, 0.5, 0).p_reference(), 0.5 / 7, 1e-15);
}

TEST(Plan, Validation) {
  EXPECT_THROW(dummy_plan(0, 0.5, 0).validate(), Error);
  EXPECT_THROW(dummy_plan(2, -0.1, 0).validate(), Error);
  EXPECT_THROW(dummy_plan(2, 1.1, 0).validate(), Error);
}

TEST(Sampler, AlwaysPassthroughAtOne) {
  const auto plan = dummy_plan(7, 1.0, 3);
  for (std::uint64_t i = 0; i < 10000; ++i) EXPECT_TRUE(sample_item(plan, 0, i).passthrough());
}

TEST(Sampler, NeverPassthroughAtZero) {
  const auto plan = dummy_plan(3, 0.0, 3);
  for (std::uint64_t i = 0; i < 10000; ++i) {
    const auto d = sample_item(plan, 0, i);
    ASSERT_FALSE(d.passthrough());
    EXPECT_LT(*d.reference, 3u);
  }
}

TEST(Sampler, DefaultPlanFrequencies) {
  const auto plan = dummy_plan(7, 0.5, 2024);
  const std::size_t n = 100000;
  std::vector<double> counts(8, 0.0);
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto d = sample_item(plan, 0, i);
    counts[d.passthrough() ? 0 : 1 + *d.reference] += 1;
  }
  EXPECT_NEAR(counts[0] / n, 0.5, 0.01);
  for (std::size_t r = 1; r < 8; ++r) EXPECT_NEAR(counts[r] / n, 0.0714, 0.005);
  const auto probs = plan.branch_probabilities();
  double chi2 = 0.0;
  for (std::size_t r = 0; r < 8; ++r) {
    const double expected = probs[r] * n;
    chi2 += (counts[r] - expected) * (counts[r] - expected) / expected;
  }
  EXPECT_LT(chi2, kChiSquare7At001);
}

TEST(Sampler, SequentialStreamIsDeterministic) {
  const auto plan = dummy_plan(7, 0.5, 0);
  RngState a{42, 0}, b{42, 0};
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(sample_branch(plan, a), sample_branch(plan, b));
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.counter, 1000u);
}

TEST(Sampler, ItemDrawsDoNotDependOnVisitOrder) {
  const auto plan = dummy_plan(7, 0.5, 77);
  std::vector<AugmentationDraw> forward, backward(50);
  for (std::uint64_t i = 0; i < 50; ++i) forward.push_back(sample_item(plan, 1, i));
  for (std::uint64_t i = 50; i-- > 0;) backward[i] = sample_item(plan, 1, i);
  EXPECT_EQ(forward, backward);
}

TEST(Sampler, EpochsAreResampled) {
  const auto plan = dummy_plan(7, 0.5, 5);
  int same = 0;
  for (std::uint64_t i = 0; i < 200; ++i) same += sample_item(plan, 0, i) == sample_item(plan, 1, i);
  EXPECT_LT(same, 200);
}

TEST(Apply, PassthroughIsBitIdentical) {
  AugmentationPlan plan;
  plan.references = tile_profiles();
  const RgbImage img = tissue_tile(1, shifted_basis()).image;
  const auto r = apply_augmentation(img, AugmentationDraw{}, plan);
  EXPECT_EQ(r.image, img);
  EXPECT_FALSE(r.fell_back);
}

TEST(Apply, NormalizeToMatchesDirectCall) {
  AugmentationPlan plan;
  plan.references = tile_profiles();
  const RgbImage img = tissue_tile(2, shifted_basis()).image;
  for (std::size_t i = 0; i < 7; ++i) {
    AugmentationDraw d;
    d.reference = i;
    EXPECT_EQ(apply_augmentation(img, d, plan).image, normalize_to_reference(img, plan.references[i]));
  }
  AugmentationDraw bad;
  bad.reference = 7;
  EXPECT_THROW(apply_augmentation(img, bad, plan), Error);
}

TEST(Apply, FailurePolicies) {
  AugmentationPlan plan;
  plan.references = tile_profiles();
  const RgbImage blank = make_rgb(16, 16);
  AugmentationDraw d;
  d.reference = 0;
  const auto r = apply_augmentation(blank, d, plan);
  EXPECT_TRUE(r.fell_back);
  EXPECT_EQ(r.image, blank);
  EXPECT_FALSE(r.warning.empty());
  EXPECT_THROW(apply_augmentation(blank, d, plan, {}, FailurePolicy::Error), Error);
}

TEST(Apply, SeededEpochReproduces) {
  AugmentationPlan plan;
  plan.references = tile_profiles();
  plan.seed = 99;
  std::vector<RgbImage> images;
  for (int i = 0; i < 30; ++i) images.push_back(tissue_tile(300 + i, shifted_basis(), {.width = 48, .height = 48, .nuclei = 4}).image);
  const auto epoch = [&] {
    std::vector<RgbImage> out;
    for (std::size_t i = 0; i < images.size(); ++i) out.push_back(apply_augmentation(images[i], sample_item(plan, 0, i), plan).image);
    return out;
  };
  EXPECT_EQ(epoch(), epoch());
}

TEST(Offline, ExtendDoublesAndKeepsOriginals) {
  std::vector<NamedImage> set;
  for (int i = 0; i < 4; ++i) set.push_back({"t" + std::to_string(i), tissue_tile(400 + i, shifted_basis(), {.width = 64, .height = 64}).image});
  const auto out = materialize_offline(set, tile_profiles()[0], OfflineMode::Extend);
  ASSERT_EQ(out.images.size(), 8u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(out.images[i].id, set[i].id);
    EXPECT_EQ(out.images[i].image, set[i].image);
    EXPECT_EQ(out.images[4 + i].id, set[i].id + "_norm");
    EXPECT_EQ(out.images[4 + i].image, normalize_to_reference(set[i].image, tile_profiles()[0]));
  }
}

TEST(Offline, ReplaceMatchesDirectCall) {
  std::vector<NamedImage> set;
  for (int i = 0; i < 3; ++i) set.push_back({"t" + std::to_string(i), tissue_tile(500 + i, shifted_basis(), {.width = 64, .height = 64}).image});
  const auto out = materialize_offline(set, tile_profiles()[1], OfflineMode::Replace);
  ASSERT_EQ(out.images.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(out.images[i].id, set[i].id);
    EXPECT_EQ(out.images[i].image, normalize_to_reference(set[i].image, tile_profiles()[1]));
  }
}

TEST(Offline, ReplaceWithOwnProfileIsNearIdentity) {
  const RgbImage img = tissue_tile(600, canonical_basis()).image;
  const auto out = materialize_offline({{"self", img}}, build_reference_profile(img), OfflineMode::Replace);
  EXPECT_LE(max_abs_diff_on(out.images[0].image, img, tissue_pixels(img)), 2);
}

TEST(Offline, FailureNamesTheImage) {
  const std::vector<NamedImage> set{{"good", tissue_tile(1, canonical_basis()).image}, {"blank_tile", make_rgb(8, 8)}};
  try {
    materialize_offline(set, tile_profiles()[0], OfflineMode::Replace);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NormalizationFailed);
    EXPECT_NE(std::string(e.what()).find("blank_tile"), std::string::npos);
  }
  const auto out = materialize_offline(set, tile_profiles()[0], OfflineMode::Replace, {}, FailurePolicy::Passthrough);
  ASSERT_EQ(out.warnings.size(), 1u);
  EXPECT_EQ(out.warnings[0].first, "blank_tile");
  EXPECT_EQ(out.images[1].image, set[1].image);
}
