#pragma once

// Test-time stain normalization: predictions on the original image and
// on its normalized variants (optionally rotated/flipped) are merged by a
// fixed-order weighted mean.

#include <algorithm>
#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "histonorm/error.hpp"
#include "histonorm/predictor.hpp"
#include "histonorm/raster.hpp"
#include "histonorm/stain_math.hpp"

namespace histonorm {

// --- padding ------------------------------------------------------------------

struct CropRecord {
  std::size_t width = 0;
  std::size_t height = 0;
};

struct PaddedImage {
  RgbImage image;
  CropRecord crop;
};

/// Place `img` at the top-left of a white canvas.
inline PaddedImage pad_white(const RgbImage& img, std::size_t target_width, std::size_t target_height) {
  if (target_width < img.width() || target_height < img.height()) {
    throw Error(ErrorCode::TargetTooSmall, std::to_string(img.width()) + "x" + std::to_string(img.height()) +
                                               " does not fit " + std::to_string(target_width) + "x" +
                                               std::to_string(target_height));
  }
  PaddedImage out{make_rgb(target_width, target_height, 255), {img.width(), img.height()}};
  for (std::size_t y = 0; y < img.height(); ++y) {
    auto src = img.data().begin() + static_cast<std::ptrdiff_t>(img.index(0, y));
    std::copy(src, src + static_cast<std::ptrdiff_t>(img.width() * 3),
              out.image.data().begin() + static_cast<std::ptrdiff_t>(out.image.index(0, y)));
  }
  return out;
}

template <typename T, typename Tag>
Raster<T, Tag> crop(const Raster<T, Tag>& padded, const CropRecord& record) {
  return crop_top_left(padded, record.width, record.height);
}

/// Smallest square side that is at least 1024 and a multiple of 32
/// covering both dimensions: 1024 for 1000x1000, 1056 for 1032x808.
inline std::size_t auto_pad_side(std::size_t width, std::size_t height) {
  const std::size_t side = std::max<std::size_t>({width, height, 1024});
  return (side + 31) / 32 * 32;
}

// --- variants -------------------------------------------------------------------

enum class MorphOp : std::uint8_t { Identity = 0, Rot90 = 1, HFlip = 2, Rot90HFlip = 3 };

inline std::string_view to_string(MorphOp op) noexcept {
  switch (op) {
    case MorphOp::Identity: return "";
    case MorphOp::Rot90: return "-rot90";
    case MorphOp::HFlip: return "-hflip";
    case MorphOp::Rot90HFlip: return "-rot90-hflip";
  }
  return "";
}

template <typename T, typename Tag>
Raster<T, Tag> apply_morph(const Raster<T, Tag>& in, MorphOp op) {
  switch (op) {
    case MorphOp::Identity: return in;
    case MorphOp::Rot90: return rotate90(in);
    case MorphOp::HFlip: return hflip(in);
    case MorphOp::Rot90HFlip: return hflip(rotate90(in));
  }
  return in;
}

template <typename T, typename Tag>
Raster<T, Tag> invert_morph(const Raster<T, Tag>& in, MorphOp op) {
  switch (op) {
    case MorphOp::Identity: return in;
    case MorphOp::Rot90: return rotate270(in);
    case MorphOp::HFlip: return hflip(in);
    case MorphOp::Rot90HFlip: return rotate270(hflip(in));
  }
  return in;
}

/// stain 0 is the original image, stain k >= 1 the k-th reference.
struct VariantKey {
  std::size_t stain = 0;
  MorphOp morph = MorphOp::Identity;

  /// "s0", "s3", "s3-rot90", "s3-hflip", "s3-rot90-hflip".
  std::string id() const { return "s" + std::to_string(stain) + std::string(to_string(morph)); }

  friend auto operator<=>(const VariantKey&, const VariantKey&) = default;
};

struct MorphologicalTta {
  bool rot90 = false;
  bool hflip = false;

  std::vector<MorphOp> ops() const {
    std::vector<MorphOp> out{MorphOp::Identity};
    if (rot90) out.push_back(MorphOp::Rot90);
    if (hflip) out.push_back(MorphOp::HFlip);
    if (rot90 && hflip) out.push_back(MorphOp::Rot90HFlip);
    return out;
  }
};

struct EnsembleSpec {
  std::vector<ReferenceProfile> references;
  double weight_original = 50.0;
  double weight_per_reference = 7.14;
  MorphologicalTta morphological_tta;

  void validate() const {
    if (!(weight_original > 0.0) || (!references.empty() && !(weight_per_reference > 0.0))) {
      throw Error(ErrorCode::InvalidArgument, "ensemble weights must be positive");
    }
  }
};

struct Variant {
  VariantKey key;
  RgbImage image;
};

struct VariantSet {
  std::vector<Variant> variants;
  /// Stain variants whose normalization failed, with the reason.
  std::vector<std::pair<std::size_t, std::string>> dropped;
};

/// Original plus one normalized variant per reference, each expanded by the
/// enabled morphological transforms. Failed normalizations are dropped
/// unless `drop_failed` is false.
inline VariantSet make_variants(const RgbImage& img, const EnsembleSpec& spec, const NormalizationParams& params = {},
                                bool drop_failed = true) {
  spec.validate();
  VariantSet out;
  const auto ops = spec.morphological_tta.ops();
  const auto expand = [&](std::size_t stain, const RgbImage& base) {
    for (MorphOp op : ops) out.variants.push_back({{stain, op}, apply_morph(base, op)});
  };
  expand(0, img);
  for (std::size_t r = 0; r < spec.references.size(); ++r) {
    try {
      expand(r + 1, normalize_to_reference(img, spec.references[r], params));
    } catch (const Error& e) {
      if (!drop_failed) throw Error(ErrorCode::NormalizationFailed, "variant s" + std::to_string(r + 1) + ": " + e.what());
      out.dropped.emplace_back(r + 1, e.what());
    }
  }
  return out;
}

// --- weighting and reduction ------------------------------------------------

/// Raw weight per key. A stain variant's weight is shared equally by its
/// morphological sub-variants present in `keys`.
inline std::vector<double> variant_weights(const std::vector<VariantKey>& keys, const EnsembleSpec& spec) {
  std::map<std::size_t, std::size_t> per_stain;
  for (const auto& k : keys) ++per_stain[k.stain];
  std::vector<double> w;
  w.reserve(keys.size());
  for (const auto& k : keys) {
    const double stain_weight = k.stain == 0 ? spec.weight_original : spec.weight_per_reference;
    w.push_back(stain_weight / static_cast<double>(per_stain[k.stain]));
  }
  return w;
}

inline std::vector<double> normalized_weights(const std::vector<VariantKey>& keys, const EnsembleSpec& spec) {
  auto w = variant_weights(keys, spec);
  double total = 0.0;
  for (double x : w) total += x;
  for (double& x : w) x /= total;
  return w;
}

/// Weighted mean over variants in ascending key order with f64
/// accumulation. Evaluated as first + sum(w_i * (x_i - first)) / W so that
/// identical inputs reproduce exactly; the result is clamped to the input
/// range to absorb rounding.
template <typename T>
FloatMapT<T> ensemble(const std::vector<std::pair<VariantKey, FloatMapT<T>>>& maps, const EnsembleSpec& spec) {
  if (maps.empty()) throw Error(ErrorCode::EmptyInput, "ensemble of zero maps");
  std::vector<std::size_t> order(maps.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return maps[a].first < maps[b].first; });
  std::vector<VariantKey> keys;
  for (std::size_t i : order) keys.push_back(maps[i].first);
  for (std::size_t i = 1; i < keys.size(); ++i) {
    if (keys[i] == keys[i - 1]) throw Error(ErrorCode::InvalidArgument, "duplicate variant " + keys[i].id());
  }
  const auto& first = maps[order.front()].second;
  for (std::size_t i : order) {
    if (!maps[i].second.same_shape(first)) {
      throw Error(ErrorCode::DimensionMismatch, "map for variant " + maps[i].first.id() + " differs in shape");
    }
  }
  const auto weights = variant_weights(keys, spec);
  double total = 0.0;
  for (double w : weights) total += w;

  FloatMapT<T> out(first.width(), first.height(), first.channels());
  const std::size_t n = first.data().size();
  for (std::size_t p = 0; p < n; ++p) {
    const double base = static_cast<double>(first[p]);
    double acc = 0.0, lo = base, hi = base;
    for (std::size_t k = 0; k < order.size(); ++k) {
      const double x = static_cast<double>(maps[order[k]].second[p]);
      acc += weights[k] * (x - base);
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
    out[p] = static_cast<T>(std::clamp(base + acc / total, lo, hi));
  }
  return out;
}

// --- end to end ------------------------------------------------------------------

struct TtsnOptions {
  /// Square side to white-pad every variant to before prediction.
  std::optional<std::size_t> pad_side;
  /// Drop stain variants whose normalization fails instead of failing.
  bool drop_failed_variants = true;
  /// Drop variants whose prediction fails instead of failing.
  bool drop_failed_predictions = false;
};

struct TtsnResult {
  FloatMap probability;
  FloatMap distance;
  std::vector<std::string> used_variants;
  std::vector<std::string> warnings;
};

/// variants -> (pad) -> predict -> (crop) -> inverse transform -> ensemble.
inline TtsnResult run_ttsn(const RgbImage& img, const std::string& image_id, const Predictor& predictor,
                           const EnsembleSpec& spec, const NormalizationParams& params = {},
                           const TtsnOptions& options = {}) {
  VariantSet set = make_variants(img, spec, params, options.drop_failed_variants);
  TtsnResult result;
  for (const auto& [stain, why] : set.dropped) {
    result.warnings.push_back(image_id + ": dropped variant s" + std::to_string(stain) + " (" + why + ")");
  }

  std::vector<std::pair<VariantKey, FloatMap>> maps;
  for (const auto& variant : set.variants) {
    const std::string vid = variant.key.id();
    const RgbImage& plain = variant.image;
    try {
      FloatMap map;
      if (options.pad_side) {
        const PaddedImage padded = pad_white(plain, *options.pad_side, *options.pad_side);
        map = predictor.predict(padded.image, image_id, vid);
        if (map.same_extent(padded.image)) map = crop(map, padded.crop);
      } else {
        map = predictor.predict(plain, image_id, vid);
      }
      if (!map.same_extent(plain)) {
        throw Error(ErrorCode::DimensionMismatch, "map " + std::to_string(map.width()) + "x" +
                                                      std::to_string(map.height()) + " for image " +
                                                      std::to_string(plain.width()) + "x" + std::to_string(plain.height()));
      }
      if (map.channels() < 2) throw Error(ErrorCode::DimensionMismatch, "map needs probability and distance channels");
      maps.emplace_back(variant.key, invert_morph(map, variant.key.morph));
    } catch (const Error& e) {
      if (!options.drop_failed_predictions) {
        throw Error(ErrorCode::PredictorFailure, image_id + " variant " + vid + ": " + e.what());
      }
      result.warnings.push_back(image_id + ": dropped prediction " + vid + " (" + e.what() + ")");
    }
  }
  if (maps.empty()) throw Error(ErrorCode::EmptyInput, image_id + ": every variant failed");
  for (const auto& m : maps) result.used_variants.push_back(m.first.id());

  const FloatMap merged = ensemble(maps, spec);
  result.probability = channel(merged, kProbabilityChannel);
  result.distance = channel(merged, kDistanceChannel);
  return result;
}

}  // namespace histonorm
