#pragma once

// The boundary to the trained segmentation model. A predictor maps an RGB
// image to a FloatMap with at least two channels: channel 0 is the nuclear
// probability, channel 1 the distance map.

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <utility>

#include "histonorm/dataio.hpp"
#include "histonorm/error.hpp"
#include "histonorm/raster.hpp"

namespace histonorm {

inline constexpr std::size_t kProbabilityChannel = 0;
inline constexpr std::size_t kDistanceChannel = 1;

class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual FloatMap predict(const RgbImage& image, const std::string& image_id, const std::string& variant_id) const = 0;
};

/// File naming shared by map directories and external commands.
inline std::string map_file_name(const std::string& image_id, const std::string& variant_id) {
  return image_id + "__" + variant_id + ".f32m";
}

/// Precomputed maps: <dir>/<image_id>__<variant_id>.f32m.
class MapDirectoryPredictor final : public Predictor {
 public:
  explicit MapDirectoryPredictor(fs::path dir) : dir_(std::move(dir)) {}

  FloatMap predict(const RgbImage&, const std::string& image_id, const std::string& variant_id) const override {
    const fs::path path = dir_ / map_file_name(image_id, variant_id);
    if (!fs::exists(path)) throw Error(ErrorCode::PredictorFailure, "no map " + path.string());
    return read_f32m(path);
  }

  const fs::path& directory() const noexcept { return dir_; }

 private:
  fs::path dir_;
};

/// Runs a shell command per variant. The template may use the
/// placeholders {input} (PNG written by us), {output} (F32M the command
/// must write), {id} and {variant}. Exit status 0 is required.
class ExternalCommandPredictor final : public Predictor {
 public:
  ExternalCommandPredictor(std::string command_template, fs::path scratch_dir)
      : template_(std::move(command_template)), scratch_(std::move(scratch_dir)) {
    fs::create_directories(scratch_);
  }

  FloatMap predict(const RgbImage& image, const std::string& image_id, const std::string& variant_id) const override {
    const std::string stem = image_id + "__" + variant_id;
    const fs::path input = scratch_ / (stem + ".png");
    const fs::path output = scratch_ / (stem + ".f32m");
    write_rgb_png(input, image);
    fs::remove(output);
    const std::string cmd = expand(input, output, image_id, variant_id);
    const int status = std::system(cmd.c_str());
    if (status != 0) {
      throw Error(ErrorCode::PredictorFailure,
                  "variant " + variant_id + " of " + image_id + ": command exited with status " + std::to_string(status));
    }
    if (!fs::exists(output)) {
      throw Error(ErrorCode::PredictorFailure, "variant " + variant_id + " of " + image_id + ": no output written");
    }
    FloatMap map = read_f32m(output);
    fs::remove(input);
    fs::remove(output);
    return map;
  }

  std::string expand(const fs::path& input, const fs::path& output, const std::string& image_id,
                     const std::string& variant_id) const {
    std::string cmd = template_;
    const std::pair<std::string, std::string> subs[] = {
        {"{input}", input.string()}, {"{output}", output.string()}, {"{id}", image_id}, {"{variant}", variant_id}};
    for (const auto& [key, value] : subs) {
      for (std::size_t pos = cmd.find(key); pos != std::string::npos; pos = cmd.find(key, pos + value.size())) {
        cmd.replace(pos, key.size(), value);
      }
    }
    return cmd;
  }

 private:
  std::string template_;
  fs::path scratch_;
};

/// In-process predictor, mainly for tests and embedding.
class FunctionPredictor final : public Predictor {
 public:
  using Fn = std::function<FloatMap(const RgbImage&, const std::string&, const std::string&)>;
  explicit FunctionPredictor(Fn fn) : fn_(std::move(fn)) {}

  FloatMap predict(const RgbImage& image, const std::string& image_id, const std::string& variant_id) const override {
    return fn_(image, image_id, variant_id);
  }

 private:
  Fn fn_;
};

}  // namespace histonorm
