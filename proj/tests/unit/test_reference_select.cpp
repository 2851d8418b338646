#include <gtest/gtest.h>

#include <random>

#include "support/synthetic.hpp"

using namespace histonorm;
using namespace histonorm::testing;

namespace {

AnnotatedImage two_level(std::uint8_t nuclei, std::uint8_t background, std::string id, std::string organ) {
  AnnotatedImage a{make_rgb(8, 8, background), make_labels(8, 8), std::move(organ), std::move(id)};
  for (std::size_t y = 2; y < 5; ++y)
    for (std::size_t x = 2; x < 6; ++x) {
      a.mask.at(x, y) = 3;
      for (std::size_t c = 0; c < 3; ++c) a.image.at(x, y, c) = nuclei;
    }
  return a;
}

ContrastScore scored(std::string id, std::string organ, double score) {
  ContrastScore s;
  s.id = std::move(id);
  s.organ = std::move(organ);
  s.score = score;
  return s;
}

// Exhaustive oracle: full sort of each organ group by (score desc, id asc).
std::vector<std::string> oracle_select(std::vector<ContrastScore> scores, std::size_t k) {
  std::sort(scores.begin(), scores.end(), [](const ContrastScore& a, const ContrastScore& b) {
    return std::tie(a.organ, b.score, a.id) < std::tie(b.organ, a.score, b.id);
  });
  std::vector<std::string> out;
  std::map<std::string, std::size_t> taken;
  for (const auto& s : scores)
    if (taken[s.organ]++ < k) out.push_back(s.organ + "/" + s.id);
  return out;
}

std::vector<std::string> keys(const std::vector<ContrastScore>& v) {
  std::vector<std::string> out;
  for (const auto& s : v) out.push_back(s.organ + "/" + s.id);
  return out;
}

}  // namespace

TEST(ContrastScore, TwoGrayLevels) {
  const ContrastScore s = contrast_score(two_level(50, 200, "a", "colon"));
  EXPECT_NEAR(s.mean_nuclei, 50.0, 1e-12);
  EXPECT_NEAR(s.mean_background, 200.0, 1e-12);
  EXPECT_NEAR(s.score, 150.0, 1e-12);
  EXPECT_EQ(s.id, "a");
  EXPECT_EQ(s.organ, "colon");
}

TEST(ContrastScore, UniformImageScoresZero) {
  EXPECT_EQ(contrast_score(two_level(90, 90, "u", "x")).score, 0.0);
}

TEST(ContrastScore, MatchesDirectSummation) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> byte(0, 255), label(0, 3);
  for (int trial = 0; trial < 50; ++trial) {
    RgbImage img(17, 13, 3);
    InstanceLabelMap mask = make_labels(17, 13);
    for (auto& v : img.data()) v = static_cast<std::uint8_t>(byte(rng));
    for (auto& v : mask.data()) v = static_cast<std::uint32_t>(label(rng));
    mask[0] = 0;
    mask[1] = 9;
    double fg = 0, bg = 0;
    int nf = 0, nb = 0;
    for (std::size_t i = 0; i < mask.pixel_count(); ++i) {
      const double g = 0.299 * img[3 * i] + 0.587 * img[3 * i + 1] + 0.114 * img[3 * i + 2];
      (mask[i] ? fg : bg) += g;
      ++(mask[i] ? nf : nb);
    }
    const ContrastScore s = contrast_score(img, mask);
    EXPECT_NEAR(s.mean_nuclei, fg / nf, 1e-9);
    EXPECT_NEAR(s.mean_background, bg / nb, 1e-9);
    EXPECT_EQ(s.score, std::abs(s.mean_background - s.mean_nuclei));
    EXPECT_GE(s.mean_nuclei, 0.0);
    EXPECT_LE(s.mean_background, 255.0);
  }
}

TEST(ContrastScore, EmptyRegions) {
  AnnotatedImage a = two_level(1, 2, "a", "o");
  for (auto& v : a.mask.data()) v = 0;
  try {
    contrast_score(a);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyRegion);
  }
  for (auto& v : a.mask.data()) v = 4;
  EXPECT_THROW(contrast_score(a), Error);
}

TEST(ContrastScore, ShapeMismatch) {
  EXPECT_THROW(contrast_score(make_rgb(4, 4), make_labels(4, 5)), Error);
}

TEST(Select, PicksArgmax) {
  const auto out = select_references({two_level(190, 200, "s10", "liver"), two_level(150, 200, "s50", "liver"),
                                      two_level(170, 200, "s30", "liver")});
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].id, "s50");
}

TEST(Select, OnePerOrganForSevenOrgans) {
  std::vector<AnnotatedImage> set;
  const char* organs[] = {"stomach", "bladder", "liver", "colon", "kidney", "prostate", "breast"};
  int n = 0;
  for (const char* organ : organs)
    for (int k = 0; k < 3; ++k, ++n) set.push_back(two_level(static_cast<std::uint8_t>(20 + 7 * n), 220, "img" + std::to_string(n), organ));
  const auto out = select_references(set);
  ASSERT_EQ(out.size(), 7u);
  for (std::size_t i = 1; i < out.size(); ++i) EXPECT_LT(out[i - 1].organ, out[i].organ);
  for (const auto& a : out) {
    for (const auto& b : set)
      if (b.organ == a.organ) {
        EXPECT_GE(contrast_score(a).score, contrast_score(b).score);
      }
  }
}

TEST(Select, TiesBreakByLexicographicId) {
  const auto out = select_by_score({scored("b", "o", 5), scored("a", "o", 5), scored("c", "o", 5)}, 2);
  EXPECT_EQ(keys(out), (std::vector<std::string>{"o/a", "o/b"}));
}

TEST(Select, MatchesSortOracleAndIgnoresInputOrder) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> organ(0, 4), score(0, 6), kk(1, 2);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<ContrastScore> scores;
    for (int i = 0; i < 30; ++i) scores.push_back(scored("id" + std::to_string(i), "o" + std::to_string(organ(rng)), score(rng)));
    for (int o = 0; o < 5; ++o)
      for (int r = 0; r < 2; ++r) scores.push_back(scored("pad" + std::to_string(o) + std::to_string(r), "o" + std::to_string(o), 0));
    const std::size_t k = static_cast<std::size_t>(kk(rng));
    const auto out = select_by_score(scores, k);
    EXPECT_EQ(keys(out), oracle_select(scores, k));
    EXPECT_EQ(out.size(), k * 5);
    std::shuffle(scores.begin(), scores.end(), rng);
    EXPECT_EQ(keys(select_by_score(scores, k)), keys(out));
    for (const auto& s : scores) {
      const bool chosen = std::any_of(out.begin(), out.end(), [&](const auto& o) { return o.id == s.id; });
      if (chosen) continue;
      for (const auto& o : out)
        if (o.organ == s.organ) {
          EXPECT_LE(s.score, o.score);
        }
    }
  }
}

TEST(Select, OutputOrderedByOrganThenScore) {
  const auto out = select_by_score({scored("x", "b", 1), scored("y", "a", 2), scored("z", "b", 3), scored("w", "a", 4)}, 2);
  EXPECT_EQ(keys(out), (std::vector<std::string>{"a/w", "a/y", "b/z", "b/x"}));
}

TEST(Select, TooFewCandidates) {
  try {
    select_by_score({scored("x", "a", 1)}, 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InsufficientCandidates);
  }
  EXPECT_THROW(select_by_score({scored("x", "a", 1)}, 0), Error);
}

TEST(Select, PropagatesEmptyRegion) {
  AnnotatedImage bad = two_level(1, 2, "bad", "o");
  for (auto& v : bad.mask.data()) v = 0;
  EXPECT_THROW(select_references({two_level(1, 200, "ok", "o"), bad}), Error);
}
