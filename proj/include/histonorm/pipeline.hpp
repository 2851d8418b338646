#pragma once

// Dataset-level stages (reference selection, offline materialization,
// inference, post-processing, evaluation) and the five-mode experiment
// driver built from them. The CLI is a thin layer over this header.

#include <algorithm>
#include <cctype>
#include <functional>
#include <iostream>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "histonorm/augmentor.hpp"
#include "histonorm/dataio.hpp"
#include "histonorm/metrics.hpp"
#include "histonorm/parallel.hpp"
#include "histonorm/postprocess.hpp"
#include "histonorm/predictor.hpp"
#include "histonorm/reference_select.hpp"
#include "histonorm/serialization.hpp"
#include "histonorm/stain_math.hpp"
#include "histonorm/tta_ensemble.hpp"

namespace histonorm {

inline constexpr int kRunConfigSchemaVersion = 1;

using WarningSink = std::function<void(const std::string&)>;

inline WarningSink stderr_warnings() {
  static std::mutex mu;
  return [](const std::string& msg) {
    std::lock_guard lock(mu);
    std::cerr << "warning: " << msg << '\n';
  };
}

// --- settings -------------------------------------------------------------------

enum class ExperimentMode { Baseline, Offline, ExtendedOffline, Nondet, NondetTtsn };

inline constexpr ExperimentMode kAllModes[] = {ExperimentMode::Baseline, ExperimentMode::Offline,
                                               ExperimentMode::ExtendedOffline, ExperimentMode::Nondet,
                                               ExperimentMode::NondetTtsn};

inline std::string to_string(ExperimentMode m) {
  switch (m) {
    case ExperimentMode::Baseline: return "baseline";
    case ExperimentMode::Offline: return "offline";
    case ExperimentMode::ExtendedOffline: return "extended_offline";
    case ExperimentMode::Nondet: return "nondet";
    case ExperimentMode::NondetTtsn: return "nondet_ttsn";
  }
  return "?";
}

inline ExperimentMode parse_mode(const std::string& s) {
  for (ExperimentMode m : kAllModes)
    if (to_string(m) == s) return m;
  throw Error(ErrorCode::InvalidArgument, "unknown experiment mode '" + s + "'");
}

/// Padding before prediction: none, a fixed square side, or the smallest
/// admissible side for the largest image of the dataset.
struct PadSetting {
  enum class Kind { None, Fixed, Auto } kind = Kind::None;
  std::size_t side = 0;

  static PadSetting parse(const std::string& s) {
    if (s == "none") return {};
    if (s == "auto") return {Kind::Auto, 0};
    if (!s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); })) {
      try {
        const unsigned long v = std::stoul(s);
        if (v > 0) return {Kind::Fixed, v};
      } catch (const std::exception&) {
      }
    }
    throw Error(ErrorCode::InvalidArgument, "pad must be none, auto or a positive side length, got '" + s + "'");
  }

  std::string str() const {
    switch (kind) {
      case Kind::None: return "none";
      case Kind::Auto: return "auto";
      case Kind::Fixed: return std::to_string(side);
    }
    return "none";
  }
};

struct PredictorConfig {
  enum class Kind { MapDirectory, ExternalCommand } kind = Kind::MapDirectory;
  /// Directory or command template; "{mode}" is replaced by the mode name.
  std::string location;

  /// "map-dir:PATH" or "cmd:TEMPLATE".
  static PredictorConfig parse(const std::string& s) {
    if (s.rfind("map-dir:", 0) == 0) return {Kind::MapDirectory, s.substr(8)};
    if (s.rfind("cmd:", 0) == 0) return {Kind::ExternalCommand, s.substr(4)};
    throw Error(ErrorCode::InvalidArgument, "predictor must be map-dir:PATH or cmd:TEMPLATE");
  }
};

inline std::string replace_all(std::string s, const std::string& key, const std::string& value) {
  for (std::size_t pos = s.find(key); pos != std::string::npos; pos = s.find(key, pos + value.size())) {
    s.replace(pos, key.size(), value);
  }
  return s;
}

inline std::unique_ptr<Predictor> make_predictor(const PredictorConfig& cfg, const std::string& mode,
                                                 const fs::path& scratch) {
  if (cfg.location.empty()) throw Error(ErrorCode::InvalidArgument, "no predictor configured");
  const std::string loc = replace_all(cfg.location, "{mode}", mode);
  if (cfg.kind == PredictorConfig::Kind::MapDirectory) return std::make_unique<MapDirectoryPredictor>(loc);
  return std::make_unique<ExternalCommandPredictor>(loc, scratch);
}

// --- reference selection --------------------------------------------------------

struct ReferenceSelection {
  std::vector<ContrastScore> scores;
  std::vector<ContrastScore> selected;
  std::vector<ReferenceProfile> profiles;
  std::vector<fs::path> profile_paths;
};

inline std::string scores_table(const std::vector<ContrastScore>& scores) {
  std::ostringstream os;
  os << "id\torgan\tmean_nuclei\tmean_background\tscore\n" << std::setprecision(17);
  for (const auto& s : scores) {
    os << s.id << '\t' << s.organ << '\t' << s.mean_nuclei << '\t' << s.mean_background << '\t' << s.score << '\n';
  }
  return os.str();
}

/// Scores every entry, keeps the top `k_per_organ` per organ and builds a
/// profile for each. With `single`, all organs compete for one reference.
/// Writes scores.tsv, selected.json and profiles/<id>.json into out_dir.
inline ReferenceSelection select_refs(const std::vector<const ManifestEntry*>& entries, std::size_t k_per_organ,
                                      const NormalizationParams& params, const fs::path& out_dir,
                                      std::size_t jobs = 1, bool single = false) {
  for (const auto* e : entries) {
    if (!e->mask || !e->organ) {
      throw Error(ErrorCode::InvalidArgument, e->id + ": reference selection needs a mask and an organ");
    }
  }
  ReferenceSelection sel;
  sel.scores.resize(entries.size());
  parallel_for(entries.size(), jobs, [&](std::size_t i) {
    const auto* e = entries[i];
    sel.scores[i] = contrast_score(read_rgb_png(e->image), read_label_png(*e->mask), e->id, *e->organ);
  });
  if (single) {
    std::vector<ContrastScore> pooled = sel.scores;
    for (auto& s : pooled) s.organ = "";
    sel.selected = select_by_score(pooled, 1);
    for (const auto& s : sel.scores)
      if (s.id == sel.selected.front().id) sel.selected.front().organ = s.organ;
  } else {
    sel.selected = select_by_score(sel.scores, k_per_organ);
  }

  fs::create_directories(out_dir / "profiles");
  sel.profiles.resize(sel.selected.size());
  sel.profile_paths.resize(sel.selected.size());
  parallel_for(sel.selected.size(), jobs, [&](std::size_t i) {
    const auto& s = sel.selected[i];
    const auto it = std::find_if(entries.begin(), entries.end(), [&](const ManifestEntry* e) { return e->id == s.id; });
    sel.profiles[i] = build_reference_profile(read_rgb_png((*it)->image), params, s.id);
    sel.profile_paths[i] = out_dir / "profiles" / (s.id + ".json");
    save_profile(sel.profile_paths[i], sel.profiles[i]);
  });

  write_text(out_dir / "scores.tsv", scores_table(sel.scores));
  json selected = json::array();
  for (std::size_t i = 0; i < sel.selected.size(); ++i) {
    selected.push_back({{"id", sel.selected[i].id},
                        {"organ", sel.selected[i].organ},
                        {"score", sel.selected[i].score},
                        {"profile", sel.profile_paths[i].string()}});
  }
  write_text(out_dir / "selected.json", selected.dump(2) + "\n");
  return sel;
}

// --- training-side data preparation ------------------------------------------

inline std::vector<NamedImage> load_images(const std::vector<const ManifestEntry*>& entries, std::size_t jobs) {
  std::vector<NamedImage> out(entries.size());
  parallel_for(entries.size(), jobs, [&](std::size_t i) { out[i] = {entries[i]->id, read_rgb_png(entries[i]->image)}; });
  return out;
}

inline void write_image_set(const fs::path& dir, const std::vector<NamedImage>& images, const std::string& name,
                            std::size_t jobs) {
  fs::create_directories(dir);
  parallel_for(images.size(), jobs, [&](std::size_t i) { write_rgb_png(dir / (images[i].id + ".png"), images[i].image); });
  DatasetManifest m;
  m.name = name;
  for (const auto& img : images) m.entries.push_back({img.id, fs::path(img.id + ".png"), {}, {}, Split::Train});
  write_text(dir / "manifest.json", manifest_to_json(m).dump(2) + "\n");
}

/// Replace or Extend materialization written to `dir` as PNG + manifest.
inline std::vector<std::string> augment_offline(const std::vector<const ManifestEntry*>& entries,
                                                const ReferenceProfile& ref, OfflineMode mode,
                                                const NormalizationParams& params, const fs::path& dir,
                                                FailurePolicy on_failure, std::size_t jobs) {
  const auto images = load_images(entries, jobs);
  std::vector<OfflineResult> parts(images.size());
  parallel_for(images.size(), jobs, [&](std::size_t i) {
    parts[i] = materialize_offline({images[i]}, ref, OfflineMode::Replace, params, on_failure);
  });
  std::vector<NamedImage> out;
  std::vector<std::string> warnings;
  if (mode == OfflineMode::Extend) out = images;
  for (auto& p : parts) {
    for (auto& img : p.images) {
      if (mode == OfflineMode::Extend) img.id += "_norm";
      out.push_back(std::move(img));
    }
    for (auto& [id, msg] : p.warnings) warnings.push_back(id + ": normalization failed, kept original (" + msg + ")");
  }
  write_image_set(dir, out, mode == OfflineMode::Extend ? "extended_offline" : "offline", jobs);
  return warnings;
}

/// Seeded non-deterministic normalization: materializes `epochs` epochs
/// into dir/epoch_<e>/ and records every draw in dir/draws.json.
inline std::vector<std::string> augment_stream(const std::vector<const ManifestEntry*>& entries,
                                               const AugmentationPlan& plan, std::size_t epochs,
                                               const NormalizationParams& params, const fs::path& dir,
                                               FailurePolicy on_failure, std::size_t jobs) {
  const auto images = load_images(entries, jobs);
  std::vector<std::string> warnings;
  json draws = json::array();
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    std::vector<AugmentResult> results(images.size());
    parallel_for(images.size(), jobs, [&](std::size_t i) {
      const AugmentationDraw draw = sample_item(plan, epoch, i);
      results[i] = apply_augmentation(images[i].image, draw, plan, params, on_failure);
    });
    std::vector<NamedImage> out;
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto& r = results[i];
      out.push_back({images[i].id, r.image});
      draws.push_back({{"epoch", epoch},
                       {"id", images[i].id},
                       {"branch", r.draw.passthrough() ? std::string("passthrough")
                                                       : "ref" + std::to_string(*r.draw.reference + 1)},
                       {"reference", r.draw.passthrough() ? json(nullptr)
                                                          : json(plan.references[*r.draw.reference].source_id)},
                       {"fell_back", r.fell_back}});
      if (r.fell_back) warnings.push_back(images[i].id + ": normalization failed, passed through (" + r.warning + ")");
    }
    write_image_set(dir / ("epoch_" + std::to_string(epoch)), out, "epoch_" + std::to_string(epoch), jobs);
  }
  write_text(dir / "draws.json", draws.dump(2) + "\n");
  return warnings;
}

// --- inference ------------------------------------------------------------------

struct InferOptions {
  PadSetting pad;
  std::size_t jobs = 1;
  bool drop_failed_predictions = false;
  /// Normalize each test image to this profile before anything else.
  std::optional<ReferenceProfile> pre_normalize;
  FailurePolicy on_normalization_failure = FailurePolicy::Passthrough;
};

inline std::optional<std::size_t> resolve_pad(const PadSetting& pad, const std::vector<const ManifestEntry*>& entries) {
  switch (pad.kind) {
    case PadSetting::Kind::None: return std::nullopt;
    case PadSetting::Kind::Fixed: return pad.side;
    case PadSetting::Kind::Auto: {
      std::size_t w = 0, h = 0;
      for (const auto* e : entries) {
        const auto [ew, eh] = read_png_size(e->image);
        w = std::max(w, ew);
        h = std::max(h, eh);
      }
      return auto_pad_side(w, h);
    }
  }
  return std::nullopt;
}

/// Writes <out_dir>/<id>.f32m with channels (probability, distance).
/// An ensemble spec without references is the single-prediction baseline.
inline std::vector<std::string> infer(const std::vector<const ManifestEntry*>& entries, const Predictor& predictor,
                                      const EnsembleSpec& spec, const NormalizationParams& params,
                                      const InferOptions& options, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const auto pad = resolve_pad(options.pad, entries);
  std::vector<std::vector<std::string>> warnings(entries.size());
  parallel_for(entries.size(), options.jobs, [&](std::size_t i) {
    const auto* e = entries[i];
    RgbImage img = read_rgb_png(e->image);
    if (options.pre_normalize) {
      try {
        img = normalize_to_reference(img, *options.pre_normalize, params);
      } catch (const Error& err) {
        if (options.on_normalization_failure == FailurePolicy::Error) throw;
        warnings[i].push_back(e->id + ": test-time normalization failed, using raw image (" + err.what() + ")");
      }
    }
    if (pad && (img.width() > *pad || img.height() > *pad)) {
      throw Error(ErrorCode::TargetTooSmall, e->id + " is larger than pad side " + std::to_string(*pad));
    }
    TtsnOptions topt;
    topt.pad_side = pad;
    topt.drop_failed_predictions = options.drop_failed_predictions;
    TtsnResult r = run_ttsn(img, e->id, predictor, spec, params, topt);
    FloatMap both(img.width(), img.height(), 2);
    for (std::size_t p = 0; p < both.pixel_count(); ++p) {
      both[2 * p] = r.probability[p];
      both[2 * p + 1] = r.distance[p];
    }
    write_f32m(out_dir / (e->id + ".f32m"), both);
    warnings[i].insert(warnings[i].end(), r.warnings.begin(), r.warnings.end());
  });
  std::vector<std::string> all;
  for (auto& w : warnings) all.insert(all.end(), w.begin(), w.end());
  return all;
}

// --- post-processing and evaluation -------------------------------------------

/// Every <id>.f32m in maps_dir becomes <out_dir>/<id>.png. Returns the ids.
inline std::vector<std::string> postprocess_dir(const fs::path& maps_dir, const PostprocessParams& params,
                                                const fs::path& out_dir, std::size_t jobs = 1) {
  if (!fs::is_directory(maps_dir)) throw Error(ErrorCode::MissingFile, "no maps directory " + maps_dir.string());
  std::vector<fs::path> files;
  for (const auto& de : fs::directory_iterator(maps_dir))
    if (de.path().extension() == ".f32m") files.push_back(de.path());
  std::sort(files.begin(), files.end());
  fs::create_directories(out_dir);
  std::vector<std::string> ids(files.size());
  parallel_for(files.size(), jobs, [&](std::size_t i) {
    const FloatMap map = read_f32m(files[i]);
    if (map.channels() < 2) {
      throw Error(ErrorCode::DimensionMismatch, files[i].string() + ": need probability and distance channels");
    }
    ids[i] = files[i].stem().string();
    const auto labels = instances_from_maps(channel(map, kProbabilityChannel), channel(map, kDistanceChannel), params);
    write_label_png(out_dir / (ids[i] + ".png"), labels);
  });
  return ids;
}

/// Scores <pred_dir>/<id>.png against every entry that has a mask.
inline MetricsReport evaluate_dir(const fs::path& pred_dir, const std::vector<const ManifestEntry*>& entries,
                                  const std::string& name, std::size_t jobs = 1) {
  std::vector<const ManifestEntry*> scored;
  for (const auto* e : entries)
    if (e->mask) scored.push_back(e);
  if (scored.empty()) throw Error(ErrorCode::EmptyInput, "no entries with ground-truth masks to evaluate");
  std::vector<ImageScores> per(scored.size());
  parallel_for(scored.size(), jobs, [&](std::size_t i) {
    const auto* e = scored[i];
    const auto gt = read_label_png(*e->mask);
    const auto pred = read_label_png(pred_dir / (e->id + ".png"));
    if (!gt.same_extent(pred)) {
      throw Error(ErrorCode::DimensionMismatch, e->id + ": prediction and ground truth differ in size");
    }
    per[i] = score_image(gt, pred, e->id);
  });
  return aggregate(std::move(per), name);
}

// --- experiment driver ------------------------------------------------------------

struct RunConfig {
  int schema_version = kRunConfigSchemaVersion;
  std::vector<ExperimentMode> modes;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  fs::path manifest;
  fs::path out_dir;
  PredictorConfig predictor;
  PadSetting pad;
  NormalizationParams normalization;
  PostprocessParams postprocess;
  double weight_original = 50.0;
  double weight_per_reference = 7.14;
  MorphologicalTta morphological_tta;
  double p_passthrough = 0.5;
  std::size_t augment_epochs = 1;
  std::size_t k_per_organ = 1;
  FailurePolicy fallback = FailurePolicy::Passthrough;

  bool needs_seed() const {
    return std::any_of(modes.begin(), modes.end(), [](ExperimentMode m) {
      return m == ExperimentMode::Nondet || m == ExperimentMode::NondetTtsn;
    });
  }
};

/// Empty stays empty.
inline fs::path absolute_from(const fs::path& base, const std::string& p) {
  return p.empty() ? fs::path() : fs::weakly_canonical(resolve_path(base, p));
}

inline RunConfig run_config_from_json(const json& j, const fs::path& base_dir) {
  RunConfig c;
  try {
    c.schema_version = j.value("schema_version", kRunConfigSchemaVersion);
    if (c.schema_version != kRunConfigSchemaVersion) {
      throw Error(ErrorCode::ParseError, "unsupported schema_version " + std::to_string(c.schema_version));
    }
    if (j.contains("modes")) {
      for (const auto& m : j["modes"]) c.modes.push_back(parse_mode(m.get<std::string>()));
    } else if (j.contains("mode")) {
      const std::string m = j["mode"].get<std::string>();
      if (m == "all") {
        c.modes.assign(std::begin(kAllModes), std::end(kAllModes));
      } else {
        c.modes.push_back(parse_mode(m));
      }
    }
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    c.jobs = j.value("jobs", std::size_t{1});
    c.manifest = absolute_from(base_dir, j.at("manifest").get<std::string>());
    c.out_dir = absolute_from(base_dir, j.at("out_dir").get<std::string>());
    const json& pj = j.at("predictor");
    const std::string kind = pj.at("kind").get<std::string>();
    if (kind == "map_dir") {
      c.predictor = {PredictorConfig::Kind::MapDirectory, absolute_from(base_dir, pj.at("path").get<std::string>()).string()};
    } else if (kind == "command") {
      c.predictor = {PredictorConfig::Kind::ExternalCommand, pj.at("template").get<std::string>()};
    } else {
      throw Error(ErrorCode::ParseError, "predictor.kind must be map_dir or command");
    }
    if (j.contains("pad")) c.pad = PadSetting::parse(j["pad"].is_string() ? j["pad"].get<std::string>()
                                                                          : std::to_string(j["pad"].get<std::size_t>()));
    if (j.contains("normalization")) c.normalization = normalization_params_from_json(j["normalization"]);
    if (j.contains("postprocess")) c.postprocess = postprocess_params_from_json(j["postprocess"]);
    if (j.contains("ensemble")) {
      const json& e = j["ensemble"];
      c.weight_original = e.value("weight_original", c.weight_original);
      c.weight_per_reference = e.value("weight_per_reference", c.weight_per_reference);
      if (e.contains("morphological_tta")) {
        c.morphological_tta.rot90 = e["morphological_tta"].value("rot90", false);
        c.morphological_tta.hflip = e["morphological_tta"].value("hflip", false);
      }
    }
    if (j.contains("augmentation")) {
      c.p_passthrough = j["augmentation"].value("p_passthrough", c.p_passthrough);
      c.augment_epochs = j["augmentation"].value("epochs", c.augment_epochs);
    }
    c.k_per_organ = j.value("k_per_organ", c.k_per_organ);
    const std::string fb = j.value("fallback", std::string("passthrough"));
    if (fb != "passthrough" && fb != "error") throw Error(ErrorCode::ParseError, "fallback must be passthrough or error");
    c.fallback = fb == "error" ? FailurePolicy::Error : FailurePolicy::Passthrough;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("run config: ") + e.what());
  }
  if (c.modes.empty()) throw Error(ErrorCode::InvalidArgument, "run config selects no experiment mode");
  if (c.needs_seed() && !j.contains("seed")) {
    throw Error(ErrorCode::InvalidArgument, "a seed is required for the non-deterministic modes");
  }
  if (c.jobs == 0) throw Error(ErrorCode::InvalidArgument, "jobs must be positive");
  return c;
}

inline RunConfig load_run_config(const fs::path& path) {
  return run_config_from_json(read_json(path), fs::absolute(path).parent_path());
}

/// Fully resolved config; feeding it back reproduces the run.
inline json to_json(const RunConfig& c) {
  json modes = json::array();
  for (ExperimentMode m : c.modes) modes.push_back(to_string(m));
  json pred = c.predictor.kind == PredictorConfig::Kind::MapDirectory
                  ? json{{"kind", "map_dir"}, {"path", c.predictor.location}}
                  : json{{"kind", "command"}, {"template", c.predictor.location}};
  return {{"schema_version", c.schema_version},
          {"modes", modes},
          {"seed", c.seed},
          {"jobs", c.jobs},
          {"manifest", c.manifest.string()},
          {"out_dir", c.out_dir.string()},
          {"predictor", pred},
          {"pad", c.pad.str()},
          {"normalization", to_json(c.normalization)},
          {"postprocess", to_json(c.postprocess)},
          {"ensemble",
           {{"weight_original", c.weight_original},
            {"weight_per_reference", c.weight_per_reference},
            {"morphological_tta", {{"rot90", c.morphological_tta.rot90}, {"hflip", c.morphological_tta.hflip}}}}},
          {"augmentation", {{"p_passthrough", c.p_passthrough}, {"epochs", c.augment_epochs}}},
          {"k_per_organ", c.k_per_organ},
          {"fallback", c.fallback == FailurePolicy::Error ? "error" : "passthrough"},
          {"rng_algorithm", std::string(kRngAlgorithm)}};
}

/// Creates the predictor used for one mode.
using PredictorFactory = std::function<std::unique_ptr<Predictor>(ExperimentMode mode, const fs::path& scratch)>;

inline PredictorFactory predictor_factory_from(const RunConfig& c) {
  return [cfg = c.predictor](ExperimentMode mode, const fs::path& scratch) {
    return make_predictor(cfg, to_string(mode), scratch);
  };
}

namespace detail {

template <typename Fn>
auto stage(const std::string& name, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(ErrorCode::StageFailure, name + ": " + e.what());
  }
}

}  // namespace detail

/// Runs every configured mode end to end and returns one report per mode.
/// Layout under out_dir: references/, <mode>/{train,maps,instances}/,
/// <mode>/report.json, table.txt, effective_config.json.
inline std::vector<MetricsReport> run_experiment(const RunConfig& cfg, const PredictorFactory& factory = {},
                                                 const WarningSink& warn = stderr_warnings()) {
  const PredictorFactory make = factory ? factory : predictor_factory_from(cfg);
  const DatasetManifest manifest = detail::stage("load-manifest", [&] { return load_manifest(cfg.manifest); });
  const auto train = manifest.split(Split::Train);
  const auto test = manifest.split(Split::Test);
  if (test.empty()) throw Error(ErrorCode::InvalidArgument, "manifest has no test entries");

  fs::create_directories(cfg.out_dir);
  write_text(cfg.out_dir / "effective_config.json", to_json(cfg).dump(2) + "\n");

  const bool need_organ_refs = std::any_of(cfg.modes.begin(), cfg.modes.end(), [](ExperimentMode m) {
    return m == ExperimentMode::Nondet || m == ExperimentMode::NondetTtsn;
  });
  const bool need_single_ref = std::any_of(cfg.modes.begin(), cfg.modes.end(), [](ExperimentMode m) {
    return m == ExperimentMode::Offline || m == ExperimentMode::ExtendedOffline;
  });
  std::optional<ReferenceSelection> organ_refs, single_ref;
  if (need_organ_refs) {
    organ_refs = detail::stage("select-refs", [&] {
      return select_refs(train, cfg.k_per_organ, cfg.normalization, cfg.out_dir / "references" / "per_organ", cfg.jobs);
    });
  }
  if (need_single_ref) {
    single_ref = detail::stage("select-refs", [&] {
      return select_refs(train, 1, cfg.normalization, cfg.out_dir / "references" / "single", cfg.jobs, true);
    });
  }
  const auto rel_paths = [](const ReferenceSelection& sel, const fs::path& from) {
    std::vector<std::string> out;
    for (const auto& p : sel.profile_paths) out.push_back(fs::relative(p, from).string());
    return out;
  };

  std::vector<MetricsReport> rows;
  for (ExperimentMode mode : cfg.modes) {
    const std::string name = to_string(mode);
    const fs::path dir = cfg.out_dir / name;
    fs::create_directories(dir);
    std::vector<std::string> warnings;

    EnsembleSpec spec;
    spec.weight_original = cfg.weight_original;
    spec.weight_per_reference = cfg.weight_per_reference;
    InferOptions opt;
    opt.pad = cfg.pad;
    opt.jobs = cfg.jobs;
    opt.on_normalization_failure = cfg.fallback;

    detail::stage(name + "/prepare", [&] {
      switch (mode) {
        case ExperimentMode::Baseline:
          break;
        case ExperimentMode::Offline:
        case ExperimentMode::ExtendedOffline: {
          const ReferenceProfile& ref = single_ref->profiles.front();
          const auto w = augment_offline(train, ref,
                                         mode == ExperimentMode::Offline ? OfflineMode::Replace : OfflineMode::Extend,
                                         cfg.normalization, dir / "train", cfg.fallback, cfg.jobs);
          warnings.insert(warnings.end(), w.begin(), w.end());
          if (mode == ExperimentMode::Offline) {
            opt.pre_normalize = ref;
          } else {
            // raw and normalized test predictions, plainly averaged
            spec.references = {ref};
            spec.weight_original = 1.0;
            spec.weight_per_reference = 1.0;
          }
          break;
        }
        case ExperimentMode::Nondet:
        case ExperimentMode::NondetTtsn: {
          AugmentationPlan plan;
          plan.references = organ_refs->profiles;
          plan.p_passthrough = cfg.p_passthrough;
          plan.seed = cfg.seed;
          fs::create_directories(dir / "train");
          write_text(dir / "train" / "plan.json",
                     plan_to_json(plan, rel_paths(*organ_refs, dir / "train")).dump(2) + "\n");
          const auto w = augment_stream(train, plan, cfg.augment_epochs, cfg.normalization, dir / "train", cfg.fallback,
                                        cfg.jobs);
          warnings.insert(warnings.end(), w.begin(), w.end());
          if (mode == ExperimentMode::NondetTtsn) {
            spec.references = organ_refs->profiles;
            spec.morphological_tta = cfg.morphological_tta;
            write_text(dir / "ensemble_spec.json",
                       ensemble_spec_to_json(spec, rel_paths(*organ_refs, dir)).dump(2) + "\n");
          }
          break;
        }
      }
      return 0;
    });

    const auto predictor = make(mode, dir / "scratch");
    const auto infer_warnings = detail::stage(name + "/infer", [&] {
      return infer(test, *predictor, spec, cfg.normalization, opt, dir / "maps");
    });
    warnings.insert(warnings.end(), infer_warnings.begin(), infer_warnings.end());
    detail::stage(name + "/postprocess",
                  [&] { return postprocess_dir(dir / "maps", cfg.postprocess, dir / "instances", cfg.jobs); });
    MetricsReport report = detail::stage(name + "/evaluate", [&] { return evaluate_dir(dir / "instances", test, name, cfg.jobs); });

    write_text(dir / "report.json", to_json(report).dump(2) + "\n");
    write_text(dir / "warnings.txt", [&] {
      std::string s;
      for (const auto& w : warnings) s += w + "\n";
      return s;
    }());
    for (const auto& w : warnings) warn(name + ": " + w);
    rows.push_back(std::move(report));
  }
  write_text(cfg.out_dir / "table.txt", metrics_table(rows));
  json summary = json::array();
  for (const auto& r : rows) summary.push_back({{"name", r.name}, {"dice", r.dice}, {"aji", r.aji}, {"pq", r.pq}});
  write_text(cfg.out_dir / "summary.json", summary.dump(2) + "\n");
  return rows;
}

}  // namespace histonorm
