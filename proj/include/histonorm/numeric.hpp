#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "histonorm/error.hpp"

namespace histonorm {

/// Percentile in [0, 100] with linear interpolation between order
/// statistics (numpy's default "linear" method). Reorders `values`.
inline double percentile_inplace(std::vector<double>& values, double p) {
  if (values.empty()) throw Error(ErrorCode::EmptyInput, "percentile of empty sample");
  const double rank = std::clamp(p, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const double frac = rank - static_cast<double>(lo);
  auto lo_it = values.begin() + static_cast<std::ptrdiff_t>(lo);
  std::nth_element(values.begin(), lo_it, values.end());
  const double lo_val = *lo_it;
  if (frac == 0.0 || lo + 1 >= values.size()) return lo_val;
  const double hi_val = *std::min_element(lo_it + 1, values.end());
  return lo_val + frac * (hi_val - lo_val);
}

inline double percentile(std::vector<double> values, double p) { return percentile_inplace(values, p); }

}  // namespace histonorm
