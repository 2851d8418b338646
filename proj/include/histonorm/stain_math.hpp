#pragma once

// Macenko-style color deconvolution for H&E images: optical density
// conversion, stain-basis estimation from the OD point cloud, per-pixel
// saturation solve and normalization to a reference profile.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "histonorm/error.hpp"
#include "histonorm/numeric.hpp"
#include "histonorm/raster.hpp"

namespace histonorm {

using Vec3 = std::array<double, 3>;

inline double dot(const Vec3& a, const Vec3& b) noexcept { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm(const Vec3& a) noexcept { return std::sqrt(dot(a, a)); }

struct NormalizationParams {
  double io = 255.0;              // transmitted background intensity, 8-bit scale
  double beta = 0.15;             // OD tissue threshold (log10 units)
  double alpha = 1.0;             // robust angle percentile
  double sat_percentile = 99.0;   // saturation scaling percentile

  double od_max() const { return -std::log10(1.0 / io); }

  void validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::InvalidArgument, m); };
    if (!(io >= 1.0 && io <= 255.0)) fail("Io must lie in [1, 255]");
    if (!(beta > 0.0 && beta < od_max())) fail("beta must lie in (0, OD_max)");
    if (!(alpha > 0.0 && alpha < 50.0)) fail("alpha must lie in (0, 50)");
    if (!(sat_percentile > 50.0 && sat_percentile <= 100.0)) fail("sat_percentile must lie in (50, 100]");
  }

  friend bool operator==(const NormalizationParams&, const NormalizationParams&) = default;
};

/// Base-10 optical density, the default.
struct Log10Od {
  static constexpr double kUnitsPerDecade = 1.0;
  static double from_ratio(double r) { return -std::log10(r); }
  static double to_ratio(double od) { return std::pow(10.0, -od); }
};

/// Natural-log optical density. Differs from Log10Od by a constant factor
/// that cancels between decomposition and reconstruction.
struct LnOd {
  static constexpr double kUnitsPerDecade = std::numbers::ln10;
  static double from_ratio(double r) { return -std::log(r); }
  static double to_ratio(double od) { return std::exp(-od); }
};

/// Unit stain directions in OD space, hematoxylin first.
struct StainBasis {
  Vec3 h{};
  Vec3 e{};

  double cosine() const noexcept { return dot(h, e); }

  void validate() const {
    for (const Vec3* v : {&h, &e}) {
      if (std::abs(norm(*v) - 1.0) > 1e-9) throw Error(ErrorCode::InvalidArgument, "stain vector is not unit norm");
      for (double c : *v)
        if (c < 0.0) throw Error(ErrorCode::InvalidArgument, "stain vector has a negative component");
    }
    if (std::abs(cosine()) >= 1.0 - 1e-6) throw Error(ErrorCode::SingularBasis, "stain vectors are parallel");
  }

  friend bool operator==(const StainBasis&, const StainBasis&) = default;
};

struct SaturationTag {};
/// Two channels per pixel: hematoxylin then eosin saturation.
using SaturationMap = Raster<double, SaturationTag>;

struct ReferenceProfile {
  StainBasis basis;
  std::array<double, 2> max_sat{};
  std::string source_id;
  NormalizationParams params;

  friend bool operator==(const ReferenceProfile&, const ReferenceProfile&) = default;
};

/// Minimum number of tissue pixels needed to estimate a basis.
inline constexpr std::size_t kMinTissuePixels = 100;
/// Second eigenvalue below this fraction of the first means one stain only.
inline constexpr double kDegenerateEigenRatio = 1e-9;

template <typename Log = Log10Od>
OdImage rgb_to_od(const RgbImage& img, const NormalizationParams& params = {}) {
  params.validate();
  // Only 256 distinct inputs exist, so tabulate.
  std::array<double, 256> lut{};
  for (int v = 0; v < 256; ++v) {
    lut[static_cast<std::size_t>(v)] = std::max(0.0, Log::from_ratio(std::max(v, 1) / params.io));
  }
  OdImage od(img.width(), img.height(), 3);
  auto src = img.data();
  auto dst = od.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = lut[src[i]];
  return od;
}

/// Round half up, then clamp to the 8-bit range.
template <typename Log = Log10Od>
RgbImage od_to_rgb(const OdImage& od, const NormalizationParams& params = {}) {
  RgbImage img(od.width(), od.height(), 3);
  auto src = od.data();
  auto dst = img.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double v = std::floor(params.io * Log::to_ratio(src[i]) + 0.5);
    dst[i] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
  }
  return img;
}

namespace detail {

inline bool is_tissue(const double* px, double beta) noexcept {
  return px[0] > beta && px[1] > beta && px[2] > beta;
}

// Sign convention for eigenvectors: the largest-magnitude component is
// positive (first index wins ties).
inline Vec3 canonical_sign(Vec3 v) noexcept {
  std::size_t k = 0;
  for (std::size_t i = 1; i < 3; ++i)
    if (std::abs(v[i]) > std::abs(v[k])) k = i;
  if (v[k] < 0.0)
    for (double& c : v) c = -c;
  return v;
}

inline Vec3 to_nonnegative_unit(Vec3 v) {
  if (v[0] + v[1] + v[2] < 0.0)
    for (double& c : v) c = -c;
  for (double& c : v) c = std::max(c, 0.0);
  const double n = norm(v);
  if (!(n > 0.0)) throw Error(ErrorCode::DegenerateStainCloud, "extreme stain direction has no positive part");
  for (double& c : v) c /= n;
  return v;
}

// Hematoxylin absorbs more red: larger red OD component. Near-ties fall
// back to the smaller green component.
inline bool is_hematoxylin_first(const Vec3& a, const Vec3& b) noexcept {
  if (std::abs(a[0] - b[0]) >= 1e-9) return a[0] > b[0];
  return a[1] < b[1];
}

}  // namespace detail

template <typename Log = Log10Od>
StainBasis estimate_stain_basis(const OdImage& od, const NormalizationParams& params = {}) {
  params.validate();
  const double beta = params.beta * Log::kUnitsPerDecade;

  // Uncentered second-moment matrix of the tissue cloud. Its two dominant
  // eigenvectors span the same plane as the two leading right singular
  // vectors of the pixel matrix.
  Eigen::Matrix3d moment = Eigen::Matrix3d::Zero();
  std::size_t count = 0;
  const double* base = od.data().data();
  for (std::size_t i = 0; i < od.pixel_count(); ++i) {
    const double* px = base + 3 * i;
    if (!detail::is_tissue(px, beta)) continue;
    const Eigen::Vector3d v(px[0], px[1], px[2]);
    moment.noalias() += v * v.transpose();
    ++count;
  }
  if (count < kMinTissuePixels) {
    throw Error(ErrorCode::TooFewTissuePixels,
                std::to_string(count) + " tissue pixels, need " + std::to_string(kMinTissuePixels));
  }
  moment /= static_cast<double>(count);

  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> solver(moment);
  const Eigen::Vector3d& evals = solver.eigenvalues();  // ascending
  if (!(evals(1) >= kDegenerateEigenRatio * evals(2)) || !(evals(2) > 0.0)) {
    throw Error(ErrorCode::DegenerateStainCloud, "OD cloud is effectively rank one");
  }
  const auto col = [&](int c) {
    return Vec3{solver.eigenvectors()(0, c), solver.eigenvectors()(1, c), solver.eigenvectors()(2, c)};
  };
  Vec3 major = col(2);
  if (major[0] + major[1] + major[2] < 0.0)
    for (double& c : major) c = -c;
  const Vec3 minor = detail::canonical_sign(col(1));

  std::vector<double> angles;
  angles.reserve(count);
  for (std::size_t i = 0; i < od.pixel_count(); ++i) {
    const double* px = base + 3 * i;
    if (!detail::is_tissue(px, beta)) continue;
    const Vec3 v{px[0], px[1], px[2]};
    angles.push_back(std::atan2(dot(v, minor), dot(v, major)));
  }
  const double lo = percentile_inplace(angles, params.alpha);
  const double hi = percentile_inplace(angles, 100.0 - params.alpha);

  const auto direction = [&](double phi) {
    const double c = std::cos(phi), s = std::sin(phi);
    return detail::to_nonnegative_unit(
        Vec3{c * major[0] + s * minor[0], c * major[1] + s * minor[1], c * major[2] + s * minor[2]});
  };
  Vec3 a = direction(lo);
  Vec3 b = direction(hi);
  if (std::abs(dot(a, b)) >= 1.0 - 1e-6) {
    throw Error(ErrorCode::DegenerateStainCloud, "extreme stain directions are parallel");
  }
  if (!detail::is_hematoxylin_first(a, b)) std::swap(a, b);
  return StainBasis{a, b};
}

/// Per-pixel least-squares solve of od = sH * vH + sE * vE. With
/// `clamp_negative` unset the raw solution is returned.
inline SaturationMap compute_saturations(const OdImage& od, const StainBasis& basis, bool clamp_negative = true) {
  const double c = basis.cosine();
  const double hh = dot(basis.h, basis.h), ee = dot(basis.e, basis.e);
  const double det = hh * ee - c * c;
  if (!(std::abs(det) > 1e-12) || std::abs(c) / std::sqrt(hh * ee) >= 1.0 - 1e-6) {
    throw Error(ErrorCode::SingularBasis, "stain vectors are parallel");
  }
  SaturationMap sat(od.width(), od.height(), 2);
  const double* src = od.data().data();
  double* dst = sat.data().data();
  for (std::size_t i = 0; i < od.pixel_count(); ++i) {
    const Vec3 v{src[3 * i], src[3 * i + 1], src[3 * i + 2]};
    const double bh = dot(basis.h, v), be = dot(basis.e, v);
    double sh = (ee * bh - c * be) / det;
    double se = (hh * be - c * bh) / det;
    if (clamp_negative) {
      sh = std::max(sh, 0.0);
      se = std::max(se, 0.0);
    }
    dst[2 * i] = sh;
    dst[2 * i + 1] = se;
  }
  return sat;
}

/// od = sH * vH + sE * vE per pixel.
inline OdImage reconstruct_od(const SaturationMap& sat, const StainBasis& basis) {
  OdImage od(sat.width(), sat.height(), 3);
  const double* src = sat.data().data();
  double* dst = od.data().data();
  for (std::size_t i = 0; i < sat.pixel_count(); ++i) {
    for (std::size_t k = 0; k < 3; ++k) dst[3 * i + k] = src[2 * i] * basis.h[k] + src[2 * i + 1] * basis.e[k];
  }
  return od;
}

inline std::array<double, 2> saturation_percentiles(const SaturationMap& sat, double p) {
  std::array<double, 2> out{};
  std::vector<double> buf(sat.pixel_count());
  for (std::size_t k = 0; k < 2; ++k) {
    for (std::size_t i = 0; i < sat.pixel_count(); ++i) buf[i] = sat[2 * i + k];
    out[k] = percentile_inplace(buf, p);
  }
  return out;
}

template <typename Log = Log10Od>
ReferenceProfile build_reference_profile(const OdImage& od, const NormalizationParams& params = {},
                                         std::string source_id = {}) {
  ReferenceProfile profile;
  profile.basis = estimate_stain_basis<Log>(od, params);
  profile.max_sat = saturation_percentiles(compute_saturations(od, profile.basis), params.sat_percentile);
  if (!(profile.max_sat[0] > 0.0 && profile.max_sat[1] > 0.0)) {
    throw Error(ErrorCode::ZeroSaturation, "a stain has zero saturation at the scaling percentile");
  }
  profile.source_id = std::move(source_id);
  profile.params = params;
  return profile;
}

template <typename Log = Log10Od>
ReferenceProfile build_reference_profile(const RgbImage& img, const NormalizationParams& params = {},
                                         std::string source_id = {}) {
  return build_reference_profile<Log>(rgb_to_od<Log>(img, params), params, std::move(source_id));
}

/// Re-express `src` in the reference's stain basis with its saturation
/// scale, then convert back to RGB. White (zero OD) stays white.
template <typename Log = Log10Od>
RgbImage normalize_to_reference(const RgbImage& src, const ReferenceProfile& ref,
                                const NormalizationParams& params = {}) {
  const OdImage od = rgb_to_od<Log>(src, params);
  const StainBasis own = estimate_stain_basis<Log>(od, params);
  SaturationMap sat = compute_saturations(od, own);
  const auto own_max = saturation_percentiles(sat, params.sat_percentile);
  if (!(own_max[0] > 0.0 && own_max[1] > 0.0)) {
    throw Error(ErrorCode::ZeroSaturation, "source has zero saturation at the scaling percentile");
  }
  const double scale_h = ref.max_sat[0] / own_max[0];
  const double scale_e = ref.max_sat[1] / own_max[1];
  for (std::size_t i = 0; i < sat.pixel_count(); ++i) {
    sat[2 * i] *= scale_h;
    sat[2 * i + 1] *= scale_e;
  }
  return od_to_rgb<Log>(reconstruct_od(sat, ref.basis), params);
}

}  // namespace histonorm
