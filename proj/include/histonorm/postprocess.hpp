#pragma once

// Probability + distance maps -> instance labels: Gaussian smoothing of
// the distance map, h-maxima seeds, seeded watershed restricted to the
// foreground, and per-instance morphological cleanup.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <queue>
#include <tuple>
#include <utility>
#include <vector>

#include "histonorm/error.hpp"
#include "histonorm/raster.hpp"

namespace histonorm {

struct PostprocessParams {
  double prob_threshold = 0.5;
  double gaussian_sigma = 1.0;
  /// h for the h-maxima seeds as a fraction of the smoothed distance
  /// map's dynamic range over the foreground...
  double marker_h_fraction = 0.1;
  /// ...unless an absolute depth is given.
  std::optional<double> marker_h;
  std::size_t min_instance_area = 10;
  int opening_radius = 1;

  void validate() const {
    auto fail = [](const char* m) { throw Error(ErrorCode::InvalidArgument, m); };
    if (!(prob_threshold > 0.0 && prob_threshold < 1.0)) fail("prob_threshold must lie in (0, 1)");
    if (!(gaussian_sigma >= 0.0)) fail("gaussian_sigma must be non-negative");
    if (!(marker_h_fraction >= 0.0)) fail("marker_h_fraction must be non-negative");
    if (marker_h && !(*marker_h >= 0.0)) fail("marker_h must be non-negative");
    if (opening_radius < 0) fail("opening_radius must be non-negative");
  }
};

namespace detail {

/// Whole-sample symmetric reflection: d c b a | a b c d | d c b a.
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) noexcept {
  const auto period = static_cast<std::ptrdiff_t>(2 * n);
  std::ptrdiff_t m = i % period;
  if (m < 0) m += period;
  return m < static_cast<std::ptrdiff_t>(n) ? static_cast<std::size_t>(m)
                                            : static_cast<std::size_t>(period - 1 - m);
}

struct Offset {
  int dx, dy;
};

inline constexpr Offset kN4[] = {{0, -1}, {-1, 0}, {1, 0}, {0, 1}};
inline constexpr Offset kN8[] = {{-1, -1}, {0, -1}, {1, -1}, {-1, 0}, {1, 0}, {-1, 1}, {0, 1}, {1, 1}};

template <typename Fn>
void for_neighbors(std::span<const Offset> offsets, std::size_t w, std::size_t h, std::size_t p, Fn&& fn) {
  const auto x = static_cast<std::ptrdiff_t>(p % w), y = static_cast<std::ptrdiff_t>(p / w);
  for (const auto& o : offsets) {
    const std::ptrdiff_t nx = x + o.dx, ny = y + o.dy;
    if (nx < 0 || ny < 0 || nx >= static_cast<std::ptrdiff_t>(w) || ny >= static_cast<std::ptrdiff_t>(h)) continue;
    fn(static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx));
  }
}

}  // namespace detail

/// Normalized sampled Gaussian with radius ceil(4 sigma).
inline std::vector<double> gaussian_kernel(double sigma) {
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(4.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    sum += v;
  }
  for (double& v : k) v /= sum;
  return k;
}

/// Separable Gaussian blur with reflected borders. Each pass evaluates
/// x_c + sum_i k_i (x_i - x_c), which keeps constant regions exact.
template <typename T>
FloatMapT<T> gaussian_smooth(const FloatMapT<T>& map, double sigma) {
  if (map.channels() != 1) throw Error(ErrorCode::InvalidArgument, "gaussian_smooth needs a single-channel map");
  if (!(sigma >= 0.0)) throw Error(ErrorCode::InvalidArgument, "sigma must be non-negative");
  if (sigma == 0.0 || map.empty()) return map;
  const auto kernel = gaussian_kernel(sigma);
  const auto radius = static_cast<std::ptrdiff_t>(kernel.size() / 2);
  const std::size_t w = map.width(), h = map.height();

  std::vector<double> tmp(w * h);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double c = static_cast<double>(map.at(x, y));
      double acc = 0.0;
      for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
        const std::size_t xx = detail::reflect_index(static_cast<std::ptrdiff_t>(x) + i, w);
        acc += kernel[static_cast<std::size_t>(i + radius)] * (static_cast<double>(map.at(xx, y)) - c);
      }
      tmp[y * w + x] = c + acc;
    }
  }
  FloatMapT<T> out(w, h, 1);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double c = tmp[y * w + x];
      double acc = 0.0;
      for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
        const std::size_t yy = detail::reflect_index(static_cast<std::ptrdiff_t>(y) + i, h);
        acc += kernel[static_cast<std::size_t>(i + radius)] * (tmp[yy * w + x] - c);
      }
      out.at(x, y) = static_cast<T>(c + acc);
    }
  }
  return out;
}

inline Mask threshold(const FloatMap& prob, double t) {
  Mask fg(prob.width(), prob.height(), 1);
  for (std::size_t i = 0; i < fg.pixel_count(); ++i) fg[i] = prob[i * prob.channels()] >= t ? 1 : 0;
  return fg;
}

/// Connected components of pixels for which `same(p, q)` links neighbors
/// and `member(p)` holds. Ids are assigned from `first_id` in raster order
/// of each component's first pixel.
template <typename Member, typename Same>
InstanceLabelMap label_components(std::size_t w, std::size_t h, bool eight_connected, Member&& member, Same&& same,
                                  std::uint32_t first_id = 1) {
  InstanceLabelMap out = make_labels(w, h);
  const std::span<const detail::Offset> nbrs =
      eight_connected ? std::span<const detail::Offset>(detail::kN8) : std::span<const detail::Offset>(detail::kN4);
  std::vector<std::size_t> stack;
  std::uint32_t next = first_id;
  for (std::size_t p = 0; p < w * h; ++p) {
    if (out[p] != 0 || !member(p)) continue;
    out[p] = next;
    stack.push_back(p);
    while (!stack.empty()) {
      const std::size_t c = stack.back();
      stack.pop_back();
      detail::for_neighbors(nbrs, w, h, c, [&](std::size_t q) {
        if (out[q] == 0 && member(q) && same(c, q)) {
          out[q] = next;
          stack.push_back(q);
        }
      });
    }
    ++next;
  }
  return out;
}

/// Seeds: regional maxima (8-connected) of the h-maxima transform of
/// `dist` over the foreground. A flat or empty foreground gives no seeds.
inline InstanceLabelMap extract_markers(const FloatMap& dist, const Mask& fg, const PostprocessParams& params = {}) {
  require_same_extent(dist, fg, "extract_markers");
  const std::size_t w = dist.width(), h = dist.height(), n = w * h;
  const auto in_fg = [&](std::size_t p) { return fg[p] != 0; };
  const auto value = [&](std::size_t p) { return static_cast<double>(dist[p * dist.channels()]); };

  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t p = 0; p < n; ++p) {
    if (!in_fg(p)) continue;
    lo = std::min(lo, value(p));
    hi = std::max(hi, value(p));
  }
  if (!(hi > lo)) return make_labels(w, h);
  const double depth = params.marker_h ? *params.marker_h : params.marker_h_fraction * (hi - lo);
  if (!(depth > 0.0)) return make_labels(w, h);

  // Morphological reconstruction by dilation of (f - h) under f, as a
  // max-min path propagation.
  std::vector<double> rec(n, -std::numeric_limits<double>::infinity());
  using Item = std::pair<double, std::size_t>;
  std::priority_queue<Item> queue;
  for (std::size_t p = 0; p < n; ++p) {
    if (!in_fg(p)) continue;
    rec[p] = value(p) - depth;
    queue.emplace(rec[p], p);
  }
  while (!queue.empty()) {
    const auto [v, p] = queue.top();
    queue.pop();
    if (v < rec[p]) continue;
    detail::for_neighbors(detail::kN8, w, h, p, [&](std::size_t q) {
      if (!in_fg(q)) return;
      const double nv = std::min(rec[p], value(q));
      if (nv > rec[q]) {
        rec[q] = nv;
        queue.emplace(nv, q);
      }
    });
  }

  // Regional maxima: equal-valued 8-connected plateaus without a higher
  // foreground neighbour.
  const InstanceLabelMap plateaus = label_components(
      w, h, true, in_fg, [&](std::size_t a, std::size_t b) { return rec[a] == rec[b]; });
  std::vector<char> is_max(n + 1, 1);
  for (std::size_t p = 0; p < n; ++p) {
    if (!in_fg(p)) continue;
    detail::for_neighbors(detail::kN8, w, h, p, [&](std::size_t q) {
      if (in_fg(q) && rec[q] > rec[p]) is_max[plateaus[p]] = 0;
    });
  }
  return label_components(
      w, h, true, [&](std::size_t p) { return in_fg(p) && is_max[plateaus[p]] != 0; },
      [](std::size_t, std::size_t) { return true; });
}

/// Priority flood from the seeds over the foreground in order of
/// decreasing distance (ties by raster order), 4-connected. Foreground
/// components no seed reaches become instances with fresh ids.
inline InstanceLabelMap watershed_split(const Mask& fg, const FloatMap& dist, const InstanceLabelMap& seeds) {
  require_same_extent(fg, dist, "watershed_split");
  require_same_extent(fg, seeds, "watershed_split");
  const std::size_t w = fg.width(), h = fg.height(), n = w * h;
  InstanceLabelMap out = make_labels(w, h);
  const auto value = [&](std::size_t p) { return static_cast<double>(dist[p * dist.channels()]); };

  // Highest distance first, then lowest raster index.
  using Item = std::pair<double, std::size_t>;
  const auto later = [](const Item& a, const Item& b) {
    if (a.first != b.first) return a.first < b.first;
    return a.second > b.second;
  };
  std::priority_queue<Item, std::vector<Item>, decltype(later)> queue(later);
  std::uint32_t max_id = 0;
  for (std::size_t p = 0; p < n; ++p) {
    if (seeds[p] == 0 || fg[p] == 0) continue;
    out[p] = seeds[p];
    max_id = std::max(max_id, seeds[p]);
    queue.emplace(value(p), p);
  }
  while (!queue.empty()) {
    const std::size_t p = queue.top().second;
    queue.pop();
    detail::for_neighbors(detail::kN4, w, h, p, [&](std::size_t q) {
      if (fg[q] != 0 && out[q] == 0) {
        out[q] = out[p];
        queue.emplace(value(q), q);
      }
    });
  }

  const InstanceLabelMap rest = label_components(
      w, h, false, [&](std::size_t p) { return fg[p] != 0 && out[p] == 0; },
      [](std::size_t, std::size_t) { return true; }, max_id + 1);
  for (std::size_t p = 0; p < n; ++p)
    if (rest[p] != 0) out[p] = rest[p];
  return out;
}

/// Offsets of the digital disk dx^2 + dy^2 <= r^2.
inline std::vector<detail::Offset> disk_offsets(int radius) {
  std::vector<detail::Offset> out;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx)
      if (dx * dx + dy * dy <= radius * radius) out.push_back({dx, dy});
  return out;
}

/// Per-instance binary opening with a disk.
inline InstanceLabelMap open_instances(const InstanceLabelMap& inst, int radius) {
  if (radius <= 0) return inst;
  const std::size_t w = inst.width(), h = inst.height();
  const auto disk = disk_offsets(radius);
  const auto label_at = [&](std::ptrdiff_t x, std::ptrdiff_t y) -> std::uint32_t {
    if (x < 0 || y < 0 || x >= static_cast<std::ptrdiff_t>(w) || y >= static_cast<std::ptrdiff_t>(h)) return 0;
    return inst.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y));
  };
  InstanceLabelMap out = make_labels(w, h);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::uint32_t id = inst.at(x, y);
      if (id == 0) continue;
      const auto sx = static_cast<std::ptrdiff_t>(x), sy = static_cast<std::ptrdiff_t>(y);
      const bool survives = std::all_of(disk.begin(), disk.end(),
                                        [&](const detail::Offset& o) { return label_at(sx + o.dx, sy + o.dy) == id; });
      if (!survives) continue;
      for (const auto& o : disk) out.at(static_cast<std::size_t>(sx + o.dx), static_cast<std::size_t>(sy + o.dy)) = id;
    }
  }
  return out;
}

/// Opening, then split into 4-connected pieces, drop pieces smaller than
/// min_instance_area, and renumber 1..N by descending area (ties: first
/// pixel in raster order).
inline InstanceLabelMap cleanup(const InstanceLabelMap& inst, const PostprocessParams& params = {}) {
  const InstanceLabelMap opened = open_instances(inst, params.opening_radius);
  const std::size_t w = inst.width(), h = inst.height(), n = w * h;
  const InstanceLabelMap pieces = label_components(
      w, h, false, [&](std::size_t p) { return opened[p] != 0; },
      [&](std::size_t a, std::size_t b) { return opened[a] == opened[b]; });

  struct Piece {
    std::size_t area = 0;
    std::size_t first = 0;
    std::uint32_t id = 0;
  };
  std::vector<Piece> stats;
  for (std::size_t p = 0; p < n; ++p) {
    const std::uint32_t id = pieces[p];
    if (id == 0) continue;
    if (id > stats.size()) stats.resize(id);
    Piece& s = stats[id - 1];
    if (s.area++ == 0) s.first = p;
    s.id = id;
  }
  std::vector<Piece> kept;
  for (const auto& s : stats)
    if (s.area > 0 && s.area >= params.min_instance_area) kept.push_back(s);
  std::sort(kept.begin(), kept.end(), [](const Piece& a, const Piece& b) {
    return std::tie(b.area, a.first) < std::tie(a.area, b.first);
  });
  std::vector<std::uint32_t> remap(stats.size() + 1, 0);
  for (std::size_t i = 0; i < kept.size(); ++i) remap[kept[i].id] = static_cast<std::uint32_t>(i + 1);
  InstanceLabelMap out = make_labels(w, h);
  for (std::size_t p = 0; p < n; ++p) out[p] = remap[pieces[p]];
  return out;
}

/// threshold -> smooth distance -> seeds -> watershed -> cleanup.
inline InstanceLabelMap instances_from_maps(const FloatMap& prob, const FloatMap& dist,
                                            const PostprocessParams& params = {}) {
  params.validate();
  require_same_extent(prob, dist, "instances_from_maps");
  const Mask fg = threshold(prob, params.prob_threshold);
  const FloatMap smoothed = gaussian_smooth(dist.channels() == 1 ? dist : channel(dist, 0), params.gaussian_sigma);
  const InstanceLabelMap seeds = extract_markers(smoothed, fg, params);
  return cleanup(watershed_split(fg, smoothed, seeds), params);
}

}  // namespace histonorm
