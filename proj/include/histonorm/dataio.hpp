#pragma once

// Persistence: 8-bit RGB PNG, 16-bit label PNG, the F32M float-map
// container and JSON dataset manifests.

#include <png.h>

#include <array>
#include <bit>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "histonorm/error.hpp"
#include "histonorm/raster.hpp"

namespace histonorm {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const noexcept {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const fs::path& path, const char* mode) {
  FilePtr f(std::fopen(path.string().c_str(), mode));
  if (!f) {
    throw Error(mode[0] == 'r' ? ErrorCode::MissingFile : ErrorCode::IoError, "cannot open " + path.string());
  }
  return f;
}

enum class PngKind { Rgb8, Gray };

struct DecodedPng {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  int bit_depth = 0;
  std::vector<std::uint8_t> bytes;
};

// Returns false on a libpng error. No objects with non-trivial destructors
// are created between setjmp and the last libpng call.
inline bool decode_png(std::FILE* fp, PngKind kind, DecodedPng& out, std::string& err) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) {
    err = "png_create_read_struct failed";
    return false;
  }
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    err = "malformed PNG";
    return false;
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (kind == PngKind::Rgb8) {
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
  } else {
    if (color != PNG_COLOR_TYPE_GRAY) {
      png_destroy_read_struct(&png, &info, nullptr);
      err = "label PNG must be single-channel grayscale";
      return false;
    }
    if (depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  }
  png_read_update_info(png, info);
  out.width = png_get_image_width(png, info);
  out.height = png_get_image_height(png, info);
  out.bit_depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  out.bytes.resize(rowbytes * out.height);
  for (std::uint32_t y = 0; y < out.height; ++y) png_read_row(png, out.bytes.data() + y * rowbytes, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

inline bool encode_png(std::FILE* fp, std::uint32_t width, std::uint32_t height, int color_type, int bit_depth,
                       const std::uint8_t* rows, std::size_t rowbytes, std::string& err) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) {
    err = "png_create_write_struct failed";
    return false;
  }
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    err = "PNG encoding failed";
    return false;
  }
  png_init_io(png, fp);
  png_set_compression_level(png, 6);
  png_set_IHDR(png, info, width, height, bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::uint32_t y = 0; y < height; ++y) png_write_row(png, rows + y * rowbytes);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

}  // namespace detail

inline RgbImage read_rgb_png(const fs::path& path) {
  auto fp = detail::open_file(path, "rb");
  detail::DecodedPng png;
  std::string err;
  if (!detail::decode_png(fp.get(), detail::PngKind::Rgb8, png, err)) {
    throw Error(ErrorCode::ParseError, path.string() + ": " + err);
  }
  return RgbImage(png.width, png.height, 3, std::move(png.bytes));
}

inline void write_rgb_png(const fs::path& path, const RgbImage& img) {
  if (img.channels() != 3) throw Error(ErrorCode::InvalidArgument, "RGB image must have 3 channels");
  auto fp = detail::open_file(path, "wb");
  std::string err;
  if (!detail::encode_png(fp.get(), static_cast<std::uint32_t>(img.width()), static_cast<std::uint32_t>(img.height()),
                          PNG_COLOR_TYPE_RGB, 8, img.data().data(), img.width() * 3, err)) {
    throw Error(ErrorCode::IoError, path.string() + ": " + err);
  }
}

/// Width and height from the IHDR chunk without decoding pixels.
inline std::pair<std::size_t, std::size_t> read_png_size(const fs::path& path) {
  auto fp = detail::open_file(path, "rb");
  std::array<std::uint8_t, 24> head{};
  if (std::fread(head.data(), 1, head.size(), fp.get()) != head.size() || png_sig_cmp(head.data(), 0, 8) != 0) {
    throw Error(ErrorCode::ParseError, path.string() + ": not a PNG file");
  }
  const auto be32 = [&](std::size_t o) {
    return static_cast<std::size_t>(head[o]) << 24 | static_cast<std::size_t>(head[o + 1]) << 16 |
           static_cast<std::size_t>(head[o + 2]) << 8 | head[o + 3];
  };
  return {be32(16), be32(20)};
}

/// Accepts 8- or 16-bit grayscale.
inline InstanceLabelMap read_label_png(const fs::path& path) {
  auto fp = detail::open_file(path, "rb");
  detail::DecodedPng png;
  std::string err;
  if (!detail::decode_png(fp.get(), detail::PngKind::Gray, png, err)) {
    throw Error(ErrorCode::ParseError, path.string() + ": " + err);
  }
  InstanceLabelMap labels = make_labels(png.width, png.height);
  if (png.bit_depth == 16) {
    for (std::size_t i = 0; i < labels.pixel_count(); ++i) {
      labels[i] = static_cast<std::uint32_t>(png.bytes[2 * i]) << 8 | png.bytes[2 * i + 1];
    }
  } else {
    for (std::size_t i = 0; i < labels.pixel_count(); ++i) labels[i] = png.bytes[i];
  }
  return labels;
}

/// 16-bit grayscale; ids above 65535 raise LabelOverflow.
inline void write_label_png(const fs::path& path, const InstanceLabelMap& labels) {
  std::vector<std::uint8_t> bytes(labels.pixel_count() * 2);
  for (std::size_t i = 0; i < labels.pixel_count(); ++i) {
    if (labels[i] > 0xFFFF) {
      throw Error(ErrorCode::LabelOverflow, "label id " + std::to_string(labels[i]) + " does not fit 16 bits");
    }
    bytes[2 * i] = static_cast<std::uint8_t>(labels[i] >> 8);
    bytes[2 * i + 1] = static_cast<std::uint8_t>(labels[i] & 0xFF);
  }
  auto fp = detail::open_file(path, "wb");
  std::string err;
  if (!detail::encode_png(fp.get(), static_cast<std::uint32_t>(labels.width()),
                          static_cast<std::uint32_t>(labels.height()), PNG_COLOR_TYPE_GRAY, 16, bytes.data(),
                          labels.width() * 2, err)) {
    throw Error(ErrorCode::IoError, path.string() + ": " + err);
  }
}

// --- F32M -------------------------------------------------------------------
//
//   offset 0   magic 'F' '3' '2' 'M'
//   offset 4   u32 width, u32 height, u32 channels (little-endian)
//   offset 16  width*height*channels f32, little-endian, row-major,
//              channels interleaved

inline constexpr std::array<std::uint8_t, 4> kF32mMagic{0x46, 0x33, 0x32, 0x4D};
inline constexpr std::size_t kF32mHeaderBytes = 16;

namespace detail {

inline void put_u32le(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32le(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_f32m(const FloatMap& map) {
  std::vector<std::uint8_t> out;
  out.reserve(kF32mHeaderBytes + map.data().size() * 4);
  for (std::uint8_t b : kF32mMagic) out.push_back(b);
  detail::put_u32le(out, static_cast<std::uint32_t>(map.width()));
  detail::put_u32le(out, static_cast<std::uint32_t>(map.height()));
  detail::put_u32le(out, static_cast<std::uint32_t>(map.channels()));
  for (float f : map.data()) detail::put_u32le(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

inline FloatMap decode_f32m(const std::vector<std::uint8_t>& bytes, const std::string& what = "F32M") {
  if (bytes.size() < kF32mHeaderBytes) throw Error(ErrorCode::ParseError, what + ": truncated header");
  if (!std::equal(kF32mMagic.begin(), kF32mMagic.end(), bytes.begin())) {
    throw Error(ErrorCode::BadMagic, what + ": not an F32M file");
  }
  const std::uint64_t w = detail::get_u32le(&bytes[4]);
  const std::uint64_t h = detail::get_u32le(&bytes[8]);
  const std::uint64_t c = detail::get_u32le(&bytes[12]);
  const std::uint64_t n = w * h * c;
  if (bytes.size() != kF32mHeaderBytes + 4 * n) {
    throw Error(ErrorCode::ParseError, what + ": payload is " + std::to_string(bytes.size() - kF32mHeaderBytes) +
                                           " bytes, header implies " + std::to_string(4 * n));
  }
  std::vector<float> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    data[i] = std::bit_cast<float>(detail::get_u32le(&bytes[kF32mHeaderBytes + 4 * i]));
    if (!std::isfinite(data[i])) throw Error(ErrorCode::ParseError, what + ": non-finite value");
  }
  return FloatMap(w, h, c, std::move(data));
}

inline std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MissingFile, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::IoError, "short write to " + path.string());
}

inline FloatMap read_f32m(const fs::path& path) { return decode_f32m(read_bytes(path), path.string()); }
inline void write_f32m(const fs::path& path, const FloatMap& map) { write_bytes(path, encode_f32m(map)); }

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << text;
}

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::MissingFile, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
}

// --- manifests --------------------------------------------------------------

enum class Split { Train, Test };

inline std::string_view to_string(Split s) noexcept { return s == Split::Train ? "train" : "test"; }

struct ManifestEntry {
  std::string id;
  fs::path image;
  std::optional<fs::path> mask;
  std::optional<std::string> organ;
  Split split = Split::Train;
};

struct DatasetManifest {
  std::string name;
  std::vector<ManifestEntry> entries;

  std::vector<const ManifestEntry*> split(Split s) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries)
      if (e.split == s) out.push_back(&e);
    return out;
  }
};

/// Raised after a full validation pass; lists every problem found.
class ValidationError : public Error {
 public:
  struct Issue {
    ErrorCode code;
    std::string message;
  };

  explicit ValidationError(std::vector<Issue> issues)
      : Error(issues.front().code, join(issues)), issues_(std::move(issues)) {}

  const std::vector<Issue>& issues() const noexcept { return issues_; }

 private:
  static std::string join(const std::vector<Issue>& issues) {
    std::string s = std::to_string(issues.size()) + " manifest problem(s)";
    for (const auto& i : issues) s += "; " + std::string(histonorm::to_string(i.code)) + " " + i.message;
    return s;
  }
  std::vector<Issue> issues_;
};

/// Relative paths resolve against `base_dir`.
inline DatasetManifest parse_manifest(const nlohmann::json& j, const fs::path& base_dir, bool check_files = true) {
  std::vector<ValidationError::Issue> issues;
  DatasetManifest m;
  if (!j.is_object() || !j.contains("entries") || !j["entries"].is_array()) {
    throw Error(ErrorCode::ParseError, "manifest must be an object with an 'entries' array");
  }
  m.name = j.value("name", "");
  const auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base_dir / p; };
  std::set<std::string> seen;
  std::size_t index = 0;
  for (const auto& e : j["entries"]) {
    const std::string where = "entry " + std::to_string(index++);
    try {
      ManifestEntry entry;
      entry.id = e.at("id").get<std::string>();
      entry.image = resolve(e.at("image").get<std::string>());
      if (e.contains("mask") && !e["mask"].is_null()) entry.mask = resolve(e["mask"].get<std::string>());
      if (e.contains("organ") && !e["organ"].is_null()) entry.organ = e["organ"].get<std::string>();
      const std::string split = e.value("split", "train");
      if (split == "train") {
        entry.split = Split::Train;
      } else if (split == "test") {
        entry.split = Split::Test;
      } else {
        issues.push_back({ErrorCode::ParseError, where + ": split must be 'train' or 'test'"});
        continue;
      }
      if (!seen.insert(entry.id).second) issues.push_back({ErrorCode::DuplicateId, "'" + entry.id + "'"});
      if (check_files) {
        if (!fs::exists(entry.image)) issues.push_back({ErrorCode::MissingFile, entry.id + ": " + entry.image.string()});
        if (entry.mask && !fs::exists(*entry.mask)) {
          issues.push_back({ErrorCode::MissingFile, entry.id + ": " + entry.mask->string()});
        }
      }
      m.entries.push_back(std::move(entry));
    } catch (const nlohmann::json::exception& ex) {
      issues.push_back({ErrorCode::ParseError, where + ": " + ex.what()});
    }
  }
  if (!issues.empty()) throw ValidationError(std::move(issues));
  return m;
}

inline DatasetManifest load_manifest(const fs::path& path, bool check_files = true) {
  return parse_manifest(read_json(path), path.parent_path(), check_files);
}

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : m.entries) {
    nlohmann::json j{{"id", e.id}, {"image", e.image.string()}, {"split", std::string(to_string(e.split))}};
    if (e.mask) j["mask"] = e.mask->string();
    if (e.organ) j["organ"] = *e.organ;
    entries.push_back(std::move(j));
  }
  return {{"name", m.name}, {"entries", std::move(entries)}};
}

/// Entries grouped by organ; entries without an organ are skipped.
inline std::map<std::string, std::vector<const ManifestEntry*>> group_by_organ(const DatasetManifest& m,
                                                                               std::optional<Split> split = {}) {
  std::map<std::string, std::vector<const ManifestEntry*>> groups;
  for (const auto& e : m.entries) {
    if (!e.organ || (split && e.split != *split)) continue;
    groups[*e.organ].push_back(&e);
  }
  return groups;
}

}  // namespace histonorm
