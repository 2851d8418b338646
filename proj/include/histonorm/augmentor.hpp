#pragma once

// Seeded train-time stain augmentation: each image is either passed
// through unchanged or normalized to one reference drawn uniformly.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "histonorm/error.hpp"
#include "histonorm/rng.hpp"
#include "histonorm/stain_math.hpp"

namespace histonorm {

struct AugmentationPlan {
  std::vector<ReferenceProfile> references;
  double p_passthrough = 0.5;
  std::uint64_t seed = 0;

  std::size_t reference_count() const noexcept { return references.size(); }
  double p_reference() const noexcept {
    return (1.0 - p_passthrough) / static_cast<double>(references.size());
  }

  /// Passthrough first, then one entry per reference.
  std::vector<double> branch_probabilities() const {
    std::vector<double> p(references.size() + 1, p_reference());
    p[0] = p_passthrough;
    return p;
  }

  void validate() const {
    if (references.empty()) throw Error(ErrorCode::InvalidArgument, "augmentation plan needs at least one reference");
    if (!(p_passthrough >= 0.0 && p_passthrough <= 1.0)) {
      throw Error(ErrorCode::InvalidArgument, "p_passthrough must lie in [0, 1]");
    }
  }
};

struct AugmentationDraw {
  /// Reference index, or nullopt for passthrough.
  std::optional<std::size_t> reference;
  std::uint64_t rng_stream_id = 0;

  bool passthrough() const noexcept { return !reference.has_value(); }
  friend bool operator==(const AugmentationDraw&, const AugmentationDraw&) = default;
};

/// One uniform draw decides the branch; `rng` advances by one step.
inline AugmentationDraw sample_branch(const AugmentationPlan& plan, RngState& rng) {
  plan.validate();
  AugmentationDraw draw;
  draw.rng_stream_id = rng.key;
  const double u = rng.next_unit();
  if (u < plan.p_passthrough) return draw;
  const double r = static_cast<double>(plan.reference_count());
  const double scaled = (u - plan.p_passthrough) / (1.0 - plan.p_passthrough) * r;
  draw.reference = std::min(static_cast<std::size_t>(scaled), plan.reference_count() - 1);
  return draw;
}

/// Draw for item `item` of epoch `epoch`, independent of all other items.
inline AugmentationDraw sample_item(const AugmentationPlan& plan, std::uint64_t epoch, std::uint64_t item) {
  RngState rng = item_stream(plan.seed, epoch, item);
  return sample_branch(plan, rng);
}

enum class FailurePolicy { Passthrough, Error };

struct AugmentResult {
  RgbImage image;
  AugmentationDraw draw;
  bool fell_back = false;
  std::string warning;
};

inline AugmentResult apply_augmentation(const RgbImage& img, const AugmentationDraw& draw, const AugmentationPlan& plan,
                                        const NormalizationParams& params = {},
                                        FailurePolicy on_failure = FailurePolicy::Passthrough) {
  AugmentResult out{img, draw, false, {}};
  if (draw.passthrough()) return out;
  if (*draw.reference >= plan.reference_count()) {
    throw Error(ErrorCode::InvalidArgument, "draw references index " + std::to_string(*draw.reference) +
                                                " but plan has " + std::to_string(plan.reference_count()));
  }
  try {
    out.image = normalize_to_reference(img, plan.references[*draw.reference], params);
  } catch (const Error& e) {
    if (on_failure == FailurePolicy::Error) throw;
    out.image = img;
    out.fell_back = true;
    out.warning = e.what();
  }
  return out;
}

enum class OfflineMode { Replace, Extend };

struct NamedImage {
  std::string id;
  RgbImage image;
};

struct OfflineResult {
  std::vector<NamedImage> images;
  /// (id, message) for every image that fell back to passthrough.
  std::vector<std::pair<std::string, std::string>> warnings;
};

/// Replace: every image normalized to `ref`. Extend: originals followed by
/// their normalized copies (ids suffixed "_norm").
inline OfflineResult materialize_offline(const std::vector<NamedImage>& set, const ReferenceProfile& ref, OfflineMode mode,
                                         const NormalizationParams& params = {},
                                         FailurePolicy on_failure = FailurePolicy::Error) {
  OfflineResult out;
  out.images.reserve(mode == OfflineMode::Extend ? 2 * set.size() : set.size());
  if (mode == OfflineMode::Extend) out.images = set;
  for (const auto& item : set) {
    RgbImage normalized;
    try {
      normalized = normalize_to_reference(item.image, ref, params);
    } catch (const Error& e) {
      if (on_failure == FailurePolicy::Error) {
        throw Error(ErrorCode::NormalizationFailed, item.id + ": " + e.what());
      }
      normalized = item.image;
      out.warnings.emplace_back(item.id, e.what());
    }
    out.images.push_back({mode == OfflineMode::Extend ? item.id + "_norm" : item.id, std::move(normalized)});
  }
  return out;
}

}  // namespace histonorm
