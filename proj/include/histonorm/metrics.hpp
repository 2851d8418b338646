#pragma once

// Dice, Aggregated Jaccard Index and Panoptic Quality for instance label
// maps.

#include <algorithm>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "histonorm/error.hpp"
#include "histonorm/raster.hpp"

namespace histonorm {

/// Pairwise overlap table between ground-truth and predicted instances.
/// Instances are indexed densely in ascending id order.
struct OverlapTable {
  std::vector<std::uint32_t> gt_ids, pred_ids;
  std::vector<std::size_t> gt_area, pred_area;
  /// Sparse intersections: key gt_index * pred_count + pred_index.
  std::unordered_map<std::size_t, std::size_t> intersection;

  std::size_t inter(std::size_t g, std::size_t p) const {
    auto it = intersection.find(g * pred_ids.size() + p);
    return it == intersection.end() ? 0 : it->second;
  }
  std::size_t uni(std::size_t g, std::size_t p) const { return gt_area[g] + pred_area[p] - inter(g, p); }
};

namespace detail {

inline void dense_ids(const InstanceLabelMap& m, std::vector<std::uint32_t>& ids, std::vector<std::size_t>& area,
                      std::vector<std::size_t>& index_of_pixel) {
  std::unordered_map<std::uint32_t, std::size_t> count;
  for (std::uint32_t v : m.data())
    if (v) ++count[v];
  ids.clear();
  for (const auto& [id, c] : count) ids.push_back(id);
  std::sort(ids.begin(), ids.end());
  std::unordered_map<std::uint32_t, std::size_t> idx;
  area.assign(ids.size(), 0);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    idx[ids[i]] = i;
    area[i] = count[ids[i]];
  }
  index_of_pixel.assign(m.pixel_count(), SIZE_MAX);
  for (std::size_t p = 0; p < m.pixel_count(); ++p)
    if (m[p]) index_of_pixel[p] = idx[m[p]];
}

}  // namespace detail

inline OverlapTable overlap_table(const InstanceLabelMap& gt, const InstanceLabelMap& pred) {
  require_same_extent(gt, pred, "metrics");
  OverlapTable t;
  std::vector<std::size_t> gi, pi;
  detail::dense_ids(gt, t.gt_ids, t.gt_area, gi);
  detail::dense_ids(pred, t.pred_ids, t.pred_area, pi);
  for (std::size_t p = 0; p < gt.pixel_count(); ++p) {
    if (gi[p] != SIZE_MAX && pi[p] != SIZE_MAX) ++t.intersection[gi[p] * t.pred_ids.size() + pi[p]];
  }
  return t;
}

/// Binary Dice; 1 when both maps are empty.
inline double dice(const InstanceLabelMap& gt, const InstanceLabelMap& pred) {
  require_same_extent(gt, pred, "dice");
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t p = 0; p < gt.pixel_count(); ++p) {
    const bool g = gt[p] != 0, q = pred[p] != 0;
    a += g;
    b += q;
    both += g && q;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

/// AJI with each prediction used at most once: ground-truth instances in
/// ascending id take the unused prediction of highest IoU (smaller id on
/// ties). 1 when both maps are empty.
inline double aji(const OverlapTable& t) {
  const std::size_t ng = t.gt_ids.size(), np = t.pred_ids.size();
  if (ng == 0 && np == 0) return 1.0;
  std::vector<std::vector<std::size_t>> candidates(ng);
  for (const auto& [key, c] : t.intersection) candidates[key / np].push_back(key % np);
  std::vector<char> used(np, 0);
  std::size_t inter = 0, uni = 0;
  for (std::size_t g = 0; g < ng; ++g) {
    auto& cand = candidates[g];
    std::sort(cand.begin(), cand.end());
    std::size_t best = SIZE_MAX, best_i = 0, best_u = 1;
    for (std::size_t p : cand) {
      if (used[p]) continue;
      const std::size_t i = t.inter(g, p), u = t.uni(g, p);
      // i / u > best_i / best_u, exactly
      if (best == SIZE_MAX || i * best_u > best_i * u) {
        best = p;
        best_i = i;
        best_u = u;
      }
    }
    if (best == SIZE_MAX) {
      uni += t.gt_area[g];
    } else {
      used[best] = 1;
      inter += best_i;
      uni += best_u;
    }
  }
  for (std::size_t p = 0; p < np; ++p)
    if (!used[p]) uni += t.pred_area[p];
  return static_cast<double>(inter) / static_cast<double>(uni);
}

inline double aji(const InstanceLabelMap& gt, const InstanceLabelMap& pred) { return aji(overlap_table(gt, pred)); }

struct PanopticScore {
  double pq = 0.0, dq = 0.0, sq = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0;
};

/// Pairs match when IoU > 0.5 (strict); such a matching is unique.
/// Both maps empty gives (1, 1, 1) with zero counts; otherwise sq is 0
/// when nothing matches.
inline PanopticScore pq(const OverlapTable& t) {
  PanopticScore s;
  const std::size_t ng = t.gt_ids.size(), np = t.pred_ids.size();
  if (ng == 0 && np == 0) {
    s.pq = s.dq = s.sq = 1.0;
    return s;
  }
  // Summed in ascending order so relabeling cannot change the rounding.
  std::vector<double> matched;
  for (const auto& [key, i] : t.intersection) {
    const std::size_t u = t.uni(key / np, key % np);
    if (2 * i > u) matched.push_back(static_cast<double>(i) / static_cast<double>(u));
  }
  std::sort(matched.begin(), matched.end());
  double iou_sum = 0.0;
  for (double v : matched) iou_sum += v;
  s.tp = matched.size();
  s.fp = np - s.tp;
  s.fn = ng - s.tp;
  s.dq = static_cast<double>(s.tp) / (static_cast<double>(s.tp) + 0.5 * static_cast<double>(s.fp + s.fn));
  s.sq = s.tp == 0 ? 0.0 : iou_sum / static_cast<double>(s.tp);
  s.pq = s.dq * s.sq;
  return s;
}

inline PanopticScore pq(const InstanceLabelMap& gt, const InstanceLabelMap& pred) { return pq(overlap_table(gt, pred)); }

struct ImageScores {
  std::string id;
  double dice = 0.0, aji = 0.0;
  PanopticScore panoptic;
};

inline ImageScores score_image(const InstanceLabelMap& gt, const InstanceLabelMap& pred, std::string id = {}) {
  const OverlapTable t = overlap_table(gt, pred);
  return {std::move(id), dice(gt, pred), aji(t), pq(t)};
}

/// Dataset-level report: unweighted means of per-image scores, summed
/// counts. pq == dq * sq holds per image, not for the means.
struct MetricsReport {
  std::string name;
  double dice = 0.0, aji = 0.0, pq = 0.0, dq = 0.0, sq = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0;
  std::vector<ImageScores> per_image;
};

inline MetricsReport aggregate(std::vector<ImageScores> per_image, std::string name = {}) {
  MetricsReport r;
  r.name = std::move(name);
  if (per_image.empty()) throw Error(ErrorCode::EmptyInput, "no images to aggregate");
  for (const auto& s : per_image) {
    r.dice += s.dice;
    r.aji += s.aji;
    r.pq += s.panoptic.pq;
    r.dq += s.panoptic.dq;
    r.sq += s.panoptic.sq;
    r.tp += s.panoptic.tp;
    r.fp += s.panoptic.fp;
    r.fn += s.panoptic.fn;
  }
  const auto n = static_cast<double>(per_image.size());
  r.dice /= n;
  r.aji /= n;
  r.pq /= n;
  r.dq /= n;
  r.sq /= n;
  r.per_image = std::move(per_image);
  return r;
}

}  // namespace histonorm
