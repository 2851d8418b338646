#include <gtest/gtest.h>

#include <Eigen/QR>
#include <random>
#include <set>

#include "support/synthetic.hpp"

using namespace histonorm;
using namespace histonorm::testing;

namespace {

// Independent least-squares oracle: QR on the 3x2 stain matrix.
std::array<double, 2> qr_solve(const StainBasis& b, const Vec3& od) {
  Eigen::Matrix<double, 3, 2> m;
  for (int k = 0; k < 3; ++k) {
    m(k, 0) = b.h[k];
    m(k, 1) = b.e[k];
  }
  const Eigen::Vector2d s = m.colPivHouseholderQr().solve(Eigen::Vector3d(od[0], od[1], od[2]));
  return {s(0), s(1)};
}

double oracle_od(int v, double io) { return std::max(0.0, -std::log(std::max(v, 1) / io) / std::log(10.0)); }

}  // namespace

TEST(RgbToOd, WhiteIsZero) {
  const OdImage od = rgb_to_od(make_rgb(3, 2, 255));
  for (double v : od.data()) EXPECT_EQ(v, 0.0);
}

TEST(RgbToOd, ZeroIsClampedToOne) {
  const OdImage od = rgb_to_od(make_rgb(1, 1, 0));
  EXPECT_NEAR(od[0], 2.40654, 1e-5);
  EXPECT_DOUBLE_EQ(od[0], -std::log10(1.0 / 255.0));
}

TEST(RgbToOd, TenPercentTransmissionIsOneDecade) {
  NormalizationParams p;
  p.io = 250.0;
  const OdImage od = rgb_to_od(make_rgb(1, 1, 25), p);
  EXPECT_NEAR(od[0], 1.0, 1e-15);
}

TEST(RgbToOd, MatchesDirectFormulaForEveryValue) {
  for (double io : {255.0, 240.0, 128.5}) {
    NormalizationParams p;
    p.io = io;
    RgbImage img(256, 1, 3);
    for (int v = 0; v < 256; ++v)
      for (std::size_t c = 0; c < 3; ++c) img.at(static_cast<std::size_t>(v), 0, c) = static_cast<std::uint8_t>(v);
    const OdImage od = rgb_to_od(img, p);
    for (int v = 0; v < 256; ++v) {
      EXPECT_NEAR(od.at(static_cast<std::size_t>(v), 0, 0), oracle_od(v, io), 1e-12) << "v=" << v << " io=" << io;
      EXPECT_GE(od.at(static_cast<std::size_t>(v), 0, 0), 0.0);
    }
  }
}

TEST(OdToRgb, ZeroIsWhite) {
  const RgbImage img = od_to_rgb(OdImage(2, 2, 3));
  for (auto v : img.data()) EXPECT_EQ(v, 255);
}

TEST(OdToRgb, RoundsHalfUp) {
  OdImage od(1, 1, 3);
  od[0] = 1.0;
  od[1] = 0.0;
  od[2] = 10.0;
  const RgbImage img = od_to_rgb(od);
  EXPECT_EQ(img[0], 26);
  EXPECT_EQ(img[1], 255);
  EXPECT_EQ(img[2], 0);
}

TEST(RoundTrip, IdentityForAllValuesAboveZero) {
  RgbImage img(255, 3, 3);
  for (std::size_t x = 0; x < 255; ++x)
    for (std::size_t y = 0; y < 3; ++y)
      for (std::size_t c = 0; c < 3; ++c) img.at(x, y, c) = static_cast<std::uint8_t>((x + 17 * y + 101 * c) % 255 + 1);
  EXPECT_EQ(od_to_rgb(rgb_to_od(img)), img);
}

TEST(RoundTrip, ZeroComesBackAsOne) {
  EXPECT_EQ(od_to_rgb(rgb_to_od(make_rgb(1, 1, 0)))[0], 1);
}

TEST(Params, RejectsOutOfRange) {
  const auto bad = [](auto mutate) {
    NormalizationParams p;
    mutate(p);
    EXPECT_THROW(p.validate(), Error);
  };
  bad([](auto& p) { p.io = 0.5; });
  bad([](auto& p) { p.io = 256; });
  bad([](auto& p) { p.beta = 0; });
  bad([](auto& p) { p.beta = 3; });
  bad([](auto& p) { p.alpha = 0; });
  bad([](auto& p) { p.alpha = 50; });
  bad([](auto& p) { p.sat_percentile = 50; });
  bad([](auto& p) { p.sat_percentile = 100.5; });
  NormalizationParams ok;
  ok.sat_percentile = 100;
  EXPECT_NO_THROW(ok.validate());
}

TEST(EstimateBasis, RecoversRandomGroundTruth) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const StainBasis truth = random_basis(rng);
    const StainCloud cloud = stain_cloud(rng, truth, 2000);
    const StainBasis est = estimate_stain_basis(cloud.od);
    EXPECT_GE(cosine(est.h, truth.h), 0.999) << "trial " << trial;
    EXPECT_GE(cosine(est.e, truth.e), 0.999) << "trial " << trial;
  }
}

TEST(EstimateBasis, OutputInvariants) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const StainCloud cloud = stain_cloud(rng, random_basis(rng), 500, 0.05);
    const StainBasis b = estimate_stain_basis(cloud.od);
    EXPECT_NO_THROW(b.validate());
    EXPECT_NEAR(norm(b.h), 1.0, 1e-12);
    EXPECT_NEAR(norm(b.e), 1.0, 1e-12);
    EXPECT_GT(b.h[0], b.e[0]);
    EXPECT_EQ(estimate_stain_basis(cloud.od), b);
  }
}

TEST(EstimateBasis, CanonicalTileOrdersHematoxylinFirst) {
  const Tile t = tissue_tile(3, canonical_basis());
  const StainBasis b = estimate_stain_basis(rgb_to_od(t.image));
  EXPECT_GT(cosine(b.h, canonical_basis().h), cosine(b.h, canonical_basis().e));
  EXPECT_GT(cosine(b.e, canonical_basis().e), cosine(b.e, canonical_basis().h));
}

TEST(EstimateBasis, WhiteImageHasTooFewTissuePixels) {
  try {
    estimate_stain_basis(rgb_to_od(make_rgb(64, 64)));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TooFewTissuePixels);
  }
}

TEST(EstimateBasis, TissueCountThreshold) {
  std::mt19937_64 rng(2);
  const StainCloud cloud = stain_cloud(rng, canonical_basis(), kMinTissuePixels);
  OdImage od(kMinTissuePixels + 50, 1, 3);  // trailing pixels are background
  std::copy(cloud.od.data().begin(), cloud.od.data().end(), od.data().begin());
  EXPECT_NO_THROW(estimate_stain_basis(od));
  od[0] = od[1] = od[2] = 0.0;
  EXPECT_THROW(estimate_stain_basis(od), Error);
}

TEST(EstimateBasis, SingleStainIsDegenerate) {
  std::mt19937_64 rng(4);
  const StainCloud cloud = stain_cloud(rng, canonical_basis(), 1000, 0.5);
  OdImage od = cloud.od;
  for (std::size_t i = 0; i < od.pixel_count(); ++i)
    for (std::size_t k = 0; k < 3; ++k) od[3 * i + k] = (cloud.sh[i] + 0.5) * canonical_basis().h[k];
  try {
    estimate_stain_basis(od);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegenerateStainCloud);
  }
}

TEST(EstimateBasis, FiltersPixelsWithAnyChannelAtOrBelowBeta) {
  // A third "stain" that is transparent in blue must not affect the basis.
  std::mt19937_64 rng(8);
  const StainBasis truth = canonical_basis();
  const StainCloud cloud = stain_cloud(rng, truth, 1000);
  OdImage od(1500, 1, 3);
  std::copy(cloud.od.data().begin(), cloud.od.data().end(), od.data().begin());
  for (std::size_t i = 1000; i < 1500; ++i) {
    od[3 * i] = 2.0;
    od[3 * i + 1] = 0.1;
    od[3 * i + 2] = 2.0;
  }
  const StainBasis b = estimate_stain_basis(od);
  EXPECT_GE(cosine(b.h, truth.h), 0.999);
  EXPECT_GE(cosine(b.e, truth.e), 0.999);
}

TEST(Saturations, ExactInPlaneSolve) {
  const StainBasis b = canonical_basis();
  OdImage od(2, 1, 3);
  for (std::size_t k = 0; k < 3; ++k) od[k] = 2 * b.h[k] + 3 * b.e[k];
  const SaturationMap s = compute_saturations(od, b);
  EXPECT_NEAR(s[0], 2.0, 1e-9);
  EXPECT_NEAR(s[1], 3.0, 1e-9);
  EXPECT_EQ(s[2], 0.0);
  EXPECT_EQ(s[3], 0.0);
}

TEST(Saturations, MatchesQrOracleOffPlane) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0.0, 2.5);
  for (int trial = 0; trial < 20; ++trial) {
    const StainBasis b = random_basis(rng);
    OdImage od(50, 4, 3);
    for (double& v : od.data()) v = u(rng);
    const SaturationMap raw = compute_saturations(od, b, false);
    const SaturationMap clamped = compute_saturations(od, b);
    for (std::size_t i = 0; i < od.pixel_count(); ++i) {
      const auto ref = qr_solve(b, {od[3 * i], od[3 * i + 1], od[3 * i + 2]});
      EXPECT_NEAR(raw[2 * i], ref[0], 1e-9);
      EXPECT_NEAR(raw[2 * i + 1], ref[1], 1e-9);
      EXPECT_EQ(clamped[2 * i], std::max(0.0, raw[2 * i]));
      EXPECT_EQ(clamped[2 * i + 1], std::max(0.0, raw[2 * i + 1]));
    }
  }
}

TEST(Saturations, ResidualIsOrthogonalToStainPlane) {
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  const StainBasis b = random_basis(rng);
  OdImage od(100, 1, 3);
  for (double& v : od.data()) v = u(rng);
  const OdImage rec = reconstruct_od(compute_saturations(od, b, false), b);
  for (std::size_t i = 0; i < od.pixel_count(); ++i) {
    const Vec3 r{od[3 * i] - rec[3 * i], od[3 * i + 1] - rec[3 * i + 1], od[3 * i + 2] - rec[3 * i + 2]};
    EXPECT_NEAR(dot(r, b.h), 0.0, 1e-6);
    EXPECT_NEAR(dot(r, b.e), 0.0, 1e-6);
  }
}

TEST(Saturations, ParallelBasisIsSingular) {
  const Vec3 v = canonical_basis().h;
  try {
    compute_saturations(OdImage(1, 1, 3), StainBasis{v, v});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SingularBasis);
  }
}

TEST(Profile, MatchesGeneratorBasisAndPercentiles) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    const StainBasis truth = random_basis(rng);
    const StainCloud cloud = stain_cloud(rng, truth, 5000);
    const ReferenceProfile p = build_reference_profile(cloud.od, {}, "cloud");
    for (std::size_t k = 0; k < 3; ++k) {
      EXPECT_NEAR(p.basis.h[k], truth.h[k], 1e-3);
      EXPECT_NEAR(p.basis.e[k], truth.e[k], 1e-3);
    }
    // order-statistic oracle with linear interpolation
    const auto pct = [](std::vector<double> v) {
      std::sort(v.begin(), v.end());
      const double r = 0.99 * static_cast<double>(v.size() - 1);
      const auto lo = static_cast<std::size_t>(std::floor(r));
      return v[lo] + (r - static_cast<double>(lo)) * (v[std::min(lo + 1, v.size() - 1)] - v[lo]);
    };
    EXPECT_NEAR(p.max_sat[0], pct(cloud.sh), 1e-3);
    EXPECT_NEAR(p.max_sat[1], pct(cloud.se), 1e-3);
    EXPECT_EQ(p.source_id, "cloud");
  }
}

TEST(Profile, SevenTilesGiveSevenDistinctProfiles) {
  std::mt19937_64 rng(7);
  std::set<std::string> ids;
  std::vector<ReferenceProfile> profiles;
  for (int i = 0; i < 7; ++i) {
    const Tile t = tissue_tile(100 + i, i == 0 ? canonical_basis() : random_basis(rng), {});
    profiles.push_back(build_reference_profile(t.image, {}, "ref" + std::to_string(i)));
    ids.insert(profiles.back().source_id);
    EXPECT_GT(profiles.back().max_sat[0], 0.0);
    EXPECT_GT(profiles.back().max_sat[1], 0.0);
  }
  EXPECT_EQ(ids.size(), 7u);
  for (int i = 0; i < 7; ++i)
    for (int j = i + 1; j < 7; ++j) EXPECT_NE(profiles[i].basis, profiles[j].basis);
}

TEST(Normalize, SelfNormalizationIsNearIdentity) {
  std::mt19937_64 rng(41);
  for (int trial = 0; trial < 10; ++trial) {
    const RgbImage img = two_stain_image(rng, random_basis(rng, 0.3), 64, 64);
    const RgbImage out = normalize_to_reference(img, build_reference_profile(img));
    EXPECT_LE(max_abs_diff_on(out, img, tissue_pixels(img)), 2) << "trial " << trial;
  }
  for (const StainBasis& b : {canonical_basis(), shifted_basis()}) {
    const Tile t = tissue_tile(9, b);
    const RgbImage out = normalize_to_reference(t.image, build_reference_profile(t.image));
    EXPECT_LE(max_abs_diff_on(out, t.image, tissue_pixels(t.image)), 2);
  }
}

// With a weak channel the filter drops dim pure-stain pixels, so the robust
// cone misses part of the cloud. Only pixels the clamp moves may drift.
TEST(Normalize, SelfNormalizationDriftIsConfinedToClampedPixels) {
  std::mt19937_64 rng(43);
  int drifted = 0;
  for (int trial = 0; trial < 60; ++trial) {
    const StainBasis truth = random_basis(rng);
    const RgbImage img = two_stain_image(rng, truth, 64, 64);
    const ReferenceProfile self = build_reference_profile(img);
    const RgbImage out = normalize_to_reference(img, self);
    const SaturationMap raw = compute_saturations(rgb_to_od(img), self.basis, false);
    for (std::size_t p : tissue_pixels(img)) {
      if (max_abs_diff_on(out, img, {p}) <= 2) continue;
      ++drifted;
      EXPECT_TRUE(raw[2 * p] < 0.0 || raw[2 * p + 1] < 0.0) << "trial " << trial << " pixel " << p;
    }
  }
  EXPECT_GT(drifted, 0);
}

TEST(Normalize, WhiteStaysWhite) {
  const Tile src = tissue_tile(12, shifted_basis());
  const Tile ref = tissue_tile(13, canonical_basis());
  const RgbImage out = normalize_to_reference(src.image, build_reference_profile(ref.image));
  ASSERT_TRUE(out.same_shape(src.image));
  for (std::size_t i = 0; i < src.image.pixel_count(); ++i) {
    if (src.image[3 * i] == 255 && src.image[3 * i + 1] == 255 && src.image[3 * i + 2] == 255) {
      EXPECT_EQ(out[3 * i], 255);
      EXPECT_EQ(out[3 * i + 1], 255);
      EXPECT_EQ(out[3 * i + 2], 255);
    }
  }
}

TEST(Normalize, TransfersReferenceBasis) {
  std::mt19937_64 rng(51);
  for (int trial = 0; trial < 5; ++trial) {
    const StainBasis b1 = random_basis(rng), b2 = random_basis(rng);
    const RgbImage src = two_stain_image(rng, b1, 96, 96);
    const ReferenceProfile ref = build_reference_profile(two_stain_image(rng, b2, 96, 96));
    const StainBasis got = estimate_stain_basis(rgb_to_od(normalize_to_reference(src, ref)));
    EXPECT_GE(cosine(got.h, ref.basis.h), 0.99) << "trial " << trial;
    EXPECT_GE(cosine(got.e, ref.basis.e), 0.99) << "trial " << trial;
  }
}

TEST(Normalize, IdempotentUpToQuantization) {
  const ReferenceProfile ref = build_reference_profile(tissue_tile(61, canonical_basis()).image);
  for (std::uint64_t seed : {62, 63, 64}) {
    const RgbImage once = normalize_to_reference(tissue_tile(seed, shifted_basis()).image, ref);
    const RgbImage twice = normalize_to_reference(once, ref);
    EXPECT_LE(max_abs_diff_on(twice, once, all_pixels(once)), 2);
  }
}

TEST(Normalize, LogBaseCancels) {
  std::mt19937_64 rng(71);
  for (int trial = 0; trial < 5; ++trial) {
    const RgbImage src = two_stain_image(rng, random_basis(rng), 48, 48);
    const RgbImage ref = two_stain_image(rng, random_basis(rng), 48, 48);
    const RgbImage a = normalize_to_reference<Log10Od>(src, build_reference_profile<Log10Od>(ref));
    const RgbImage b = normalize_to_reference<LnOd>(src, build_reference_profile<LnOd>(ref));
    EXPECT_EQ(a, b) << "trial " << trial;
  }
}

TEST(Normalize, PropagatesEstimationErrors) {
  const ReferenceProfile ref = build_reference_profile(tissue_tile(1, canonical_basis()).image);
  EXPECT_THROW(normalize_to_reference(make_rgb(32, 32), ref), Error);
}
