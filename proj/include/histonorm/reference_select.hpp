#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "histonorm/error.hpp"
#include "histonorm/raster.hpp"

namespace histonorm {

struct AnnotatedImage {
  RgbImage image;
  InstanceLabelMap mask;
  std::string organ;
  std::string id;
};

struct ContrastScore {
  std::string id;
  std::string organ;
  double mean_nuclei = 0.0;
  double mean_background = 0.0;
  double score = 0.0;
};

/// ITU-R BT.601 luma.
inline double luma(std::uint8_t r, std::uint8_t g, std::uint8_t b) noexcept {
  return 0.299 * r + 0.587 * g + 0.114 * b;
}

/// Mean grayscale intensity inside (mask > 0) and outside the nuclei mask.
inline ContrastScore contrast_score(const RgbImage& image, const InstanceLabelMap& mask, const std::string& id = {},
                                    const std::string& organ = {}) {
  require_same_extent(image, mask, "contrast_score(" + id + ")");
  double sum_fg = 0.0, sum_bg = 0.0;
  std::size_t n_fg = 0, n_bg = 0;
  for (std::size_t i = 0; i < mask.pixel_count(); ++i) {
    const double g = luma(image[3 * i], image[3 * i + 1], image[3 * i + 2]);
    if (mask[i] > 0) {
      sum_fg += g;
      ++n_fg;
    } else {
      sum_bg += g;
      ++n_bg;
    }
  }
  if (n_fg == 0 || n_bg == 0) {
    throw Error(ErrorCode::EmptyRegion, id + (n_fg == 0 ? ": mask has no nuclei" : ": mask has no background"));
  }
  ContrastScore s;
  s.id = id;
  s.organ = organ;
  s.mean_nuclei = sum_fg / static_cast<double>(n_fg);
  s.mean_background = sum_bg / static_cast<double>(n_bg);
  s.score = std::abs(s.mean_background - s.mean_nuclei);
  return s;
}

inline ContrastScore contrast_score(const AnnotatedImage& img) {
  return contrast_score(img.image, img.mask, img.id, img.organ);
}

/// Higher score first, then lexicographic id.
inline bool ranks_before(const ContrastScore& a, const ContrastScore& b) noexcept {
  if (a.score != b.score) return a.score > b.score;
  return a.id < b.id;
}

/// Per organ, the `k_per_organ` highest-contrast entries. Output is
/// ordered by organ name, then by rank within the organ.
inline std::vector<ContrastScore> select_by_score(const std::vector<ContrastScore>& scores, std::size_t k_per_organ = 1) {
  if (k_per_organ == 0) throw Error(ErrorCode::InvalidArgument, "k_per_organ must be positive");
  std::map<std::string, std::vector<ContrastScore>> groups;
  for (const auto& s : scores) groups[s.organ].push_back(s);
  std::vector<ContrastScore> out;
  for (auto& [organ, group] : groups) {
    if (group.size() < k_per_organ) {
      throw Error(ErrorCode::InsufficientCandidates, "organ '" + organ + "' has " + std::to_string(group.size()) +
                                                         " images, need " + std::to_string(k_per_organ));
    }
    std::sort(group.begin(), group.end(), ranks_before);
    out.insert(out.end(), group.begin(), group.begin() + static_cast<std::ptrdiff_t>(k_per_organ));
  }
  return out;
}

/// Selected images, in the order described for select_by_score.
inline std::vector<AnnotatedImage> select_references(const std::vector<AnnotatedImage>& set, std::size_t k_per_organ = 1) {
  std::vector<ContrastScore> scores;
  scores.reserve(set.size());
  for (const auto& img : set) scores.push_back(contrast_score(img));
  std::vector<AnnotatedImage> out;
  for (const auto& s : select_by_score(scores, k_per_organ)) {
    auto it = std::find_if(set.begin(), set.end(), [&](const AnnotatedImage& a) { return a.id == s.id && a.organ == s.organ; });
    out.push_back(*it);
  }
  return out;
}

}  // namespace histonorm
