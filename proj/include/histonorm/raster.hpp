#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "histonorm/error.hpp"

namespace histonorm {

/// Dense row-major raster with interleaved channels. The tag keeps
/// semantically different rasters (RGB images, label maps, masks) apart
/// at the type level even when they share a sample type.
template <typename T, typename Tag>
class Raster {
 public:
  using value_type = T;

  Raster() = default;
  Raster(std::size_t width, std::size_t height, std::size_t channels, T fill = T{})
      : width_(width), height_(height), channels_(channels), data_(width * height * channels, fill) {}
  Raster(std::size_t width, std::size_t height, std::size_t channels, std::vector<T> data)
      : width_(width), height_(height), channels_(channels), data_(std::move(data)) {
    if (data_.size() != width_ * height_ * channels_) {
      throw Error(ErrorCode::InvalidArgument, "raster data length does not match " +
                                                  std::to_string(width_) + "x" + std::to_string(height_) + "x" +
                                                  std::to_string(channels_));
    }
  }

  std::size_t width() const noexcept { return width_; }
  std::size_t height() const noexcept { return height_; }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t pixel_count() const noexcept { return width_ * height_; }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t index(std::size_t x, std::size_t y, std::size_t c = 0) const noexcept {
    return (y * width_ + x) * channels_ + c;
  }
  T& at(std::size_t x, std::size_t y, std::size_t c = 0) noexcept { return data_[index(x, y, c)]; }
  const T& at(std::size_t x, std::size_t y, std::size_t c = 0) const noexcept { return data_[index(x, y, c)]; }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  template <typename U, typename OtherTag>
  bool same_shape(const Raster<U, OtherTag>& other) const noexcept {
    return width_ == other.width() && height_ == other.height() && channels_ == other.channels();
  }

  template <typename U, typename OtherTag>
  bool same_extent(const Raster<U, OtherTag>& other) const noexcept {
    return width_ == other.width() && height_ == other.height();
  }

  friend bool operator==(const Raster& a, const Raster& b) = default;

 private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  std::size_t channels_ = 0;
  std::vector<T> data_;
};

struct RgbTag {};
struct OdTag {};
struct FloatTag {};
struct LabelTag {};
struct MaskTag {};

/// 8-bit RGB, always three channels.
using RgbImage = Raster<std::uint8_t, RgbTag>;
/// Optical density, three channels.
using OdImage = Raster<double, OdTag>;
template <typename T = float>
using FloatMapT = Raster<T, FloatTag>;
using FloatMap = FloatMapT<float>;
/// 0 is background; every positive id is one instance.
using InstanceLabelMap = Raster<std::uint32_t, LabelTag>;
using Mask = Raster<std::uint8_t, MaskTag>;

inline RgbImage make_rgb(std::size_t width, std::size_t height, std::uint8_t fill = 255) {
  return RgbImage(width, height, 3, fill);
}

inline InstanceLabelMap make_labels(std::size_t width, std::size_t height) {
  return InstanceLabelMap(width, height, 1, 0u);
}

template <typename T, typename Tag>
void require_same_extent(const Raster<T, Tag>& a, const auto& b, const std::string& what) {
  if (!a.same_extent(b)) {
    throw Error(ErrorCode::DimensionMismatch,
                what + ": " + std::to_string(a.width()) + "x" + std::to_string(a.height()) + " vs " +
                    std::to_string(b.width()) + "x" + std::to_string(b.height()));
  }
}

/// Extract a single channel as a new one-channel raster.
template <typename T, typename Tag>
Raster<T, Tag> channel(const Raster<T, Tag>& in, std::size_t c) {
  Raster<T, Tag> out(in.width(), in.height(), 1);
  for (std::size_t i = 0; i < in.pixel_count(); ++i) out[i] = in[i * in.channels() + c];
  return out;
}

// --- geometric transforms -------------------------------------------------

/// Counter-clockwise quarter turn: (x, y) -> (y, w - 1 - x).
template <typename T, typename Tag>
Raster<T, Tag> rotate90(const Raster<T, Tag>& in) {
  const std::size_t w = in.width(), h = in.height(), ch = in.channels();
  Raster<T, Tag> out(h, w, ch);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < ch; ++c) out.at(y, w - 1 - x, c) = in.at(x, y, c);
  return out;
}

/// Clockwise quarter turn, the inverse of rotate90.
template <typename T, typename Tag>
Raster<T, Tag> rotate270(const Raster<T, Tag>& in) {
  const std::size_t w = in.width(), h = in.height(), ch = in.channels();
  Raster<T, Tag> out(h, w, ch);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < ch; ++c) out.at(h - 1 - y, x, c) = in.at(x, y, c);
  return out;
}

template <typename T, typename Tag>
Raster<T, Tag> hflip(const Raster<T, Tag>& in) {
  const std::size_t w = in.width(), h = in.height(), ch = in.channels();
  Raster<T, Tag> out(w, h, ch);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < ch; ++c) out.at(w - 1 - x, y, c) = in.at(x, y, c);
  return out;
}

/// Top-left window of the given size.
template <typename T, typename Tag>
Raster<T, Tag> crop_top_left(const Raster<T, Tag>& in, std::size_t width, std::size_t height) {
  if (width > in.width() || height > in.height()) {
    throw Error(ErrorCode::DimensionMismatch, "crop window exceeds raster");
  }
  Raster<T, Tag> out(width, height, in.channels());
  const std::size_t row = width * in.channels();
  for (std::size_t y = 0; y < height; ++y) {
    auto src = in.data().begin() + static_cast<std::ptrdiff_t>(in.index(0, y));
    std::copy(src, src + static_cast<std::ptrdiff_t>(row), out.data().begin() + static_cast<std::ptrdiff_t>(out.index(0, y)));
  }
  return out;
}

}  // namespace histonorm
