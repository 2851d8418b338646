#pragma once

#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "histonorm/augmentor.hpp"
#include "histonorm/dataio.hpp"
#include "histonorm/metrics.hpp"
#include "histonorm/postprocess.hpp"
#include "histonorm/stain_math.hpp"
#include "histonorm/tta_ensemble.hpp"

namespace histonorm {

using nlohmann::json;

namespace detail {

/// %.17g, which round-trips every double.
inline std::string g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  try {
    return j.contains(key) ? j.at(key).get<T>() : fallback;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string(key) + ": " + e.what());
  }
}

}  // namespace detail

// --- NormalizationParams ------------------------------------------------

inline json to_json(const NormalizationParams& p) {
  return {{"Io", p.io}, {"beta", p.beta}, {"alpha", p.alpha}, {"sat_percentile", p.sat_percentile}};
}

inline NormalizationParams normalization_params_from_json(const json& j) {
  NormalizationParams p;
  p.io = detail::get_or(j, "Io", p.io);
  p.beta = detail::get_or(j, "beta", p.beta);
  p.alpha = detail::get_or(j, "alpha", p.alpha);
  p.sat_percentile = detail::get_or(j, "sat_percentile", p.sat_percentile);
  p.validate();
  return p;
}

// --- ReferenceProfile -----------------------------------------------------

/// {source_id, vH:[3], vE:[3], max_sat:[2], params:{...}}, doubles at 17
/// significant digits.
inline std::string profile_to_json_text(const ReferenceProfile& r) {
  using detail::g17;
  const auto vec = [](auto const& v) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + g17(v[i]);
    return s + "]";
  };
  std::ostringstream os;
  os << "{\n"
     << "  \"source_id\": " << json(r.source_id).dump() << ",\n"
     << "  \"vH\": " << vec(r.basis.h) << ",\n"
     << "  \"vE\": " << vec(r.basis.e) << ",\n"
     << "  \"max_sat\": " << vec(r.max_sat) << ",\n"
     << "  \"params\": {\"Io\": " << g17(r.params.io) << ", \"beta\": " << g17(r.params.beta)
     << ", \"alpha\": " << g17(r.params.alpha) << ", \"sat_percentile\": " << g17(r.params.sat_percentile) << "}\n"
     << "}\n";
  return os.str();
}

inline ReferenceProfile profile_from_json(const json& j) {
  try {
    ReferenceProfile r;
    r.source_id = j.value("source_id", "");
    const auto h = j.at("vH").get<std::vector<double>>();
    const auto e = j.at("vE").get<std::vector<double>>();
    const auto m = j.at("max_sat").get<std::vector<double>>();
    if (h.size() != 3 || e.size() != 3 || m.size() != 2) throw Error(ErrorCode::ParseError, "profile vector sizes");
    std::copy(h.begin(), h.end(), r.basis.h.begin());
    std::copy(e.begin(), e.end(), r.basis.e.begin());
    std::copy(m.begin(), m.end(), r.max_sat.begin());
    if (j.contains("params")) r.params = normalization_params_from_json(j["params"]);
    r.basis.validate();
    if (!(r.max_sat[0] > 0.0 && r.max_sat[1] > 0.0)) throw Error(ErrorCode::ParseError, "max_sat must be positive");
    return r;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("reference profile: ") + e.what());
  }
}

inline void save_profile(const fs::path& path, const ReferenceProfile& r) { write_text(path, profile_to_json_text(r)); }
inline ReferenceProfile load_profile(const fs::path& path) { return profile_from_json(read_json(path)); }

inline fs::path resolve_path(const fs::path& base_dir, const std::string& p) {
  return fs::path(p).is_absolute() ? fs::path(p) : base_dir / p;
}

inline std::vector<ReferenceProfile> load_profiles(const json& paths, const fs::path& base_dir) {
  std::vector<ReferenceProfile> out;
  for (const auto& p : paths) out.push_back(load_profile(resolve_path(base_dir, p.get<std::string>())));
  return out;
}

// --- AugmentationPlan -----------------------------------------------------

/// {p_passthrough, references:[profile paths], seed, rng_algorithm}
inline json plan_to_json(const AugmentationPlan& plan, const std::vector<std::string>& profile_paths) {
  return {{"p_passthrough", plan.p_passthrough},
          {"references", profile_paths},
          {"seed", plan.seed},
          {"rng_algorithm", std::string(kRngAlgorithm)}};
}

inline AugmentationPlan load_plan(const fs::path& path) {
  const json j = read_json(path);
  const std::string algo = detail::get_or<std::string>(j, "rng_algorithm", std::string(kRngAlgorithm));
  if (algo != kRngAlgorithm) {
    throw Error(ErrorCode::ParseError, "plan uses rng '" + algo + "', this build provides '" + std::string(kRngAlgorithm) + "'");
  }
  AugmentationPlan plan;
  plan.p_passthrough = detail::get_or(j, "p_passthrough", plan.p_passthrough);
  plan.seed = detail::get_or<std::uint64_t>(j, "seed", 0);
  plan.references = load_profiles(j.at("references"), path.parent_path());
  plan.validate();
  return plan;
}

// --- EnsembleSpec -----------------------------------------------------------

inline json ensemble_spec_to_json(const EnsembleSpec& s, const std::vector<std::string>& profile_paths) {
  return {{"references", profile_paths},
          {"weight_original", s.weight_original},
          {"weight_per_reference", s.weight_per_reference},
          {"morphological_tta", {{"rot90", s.morphological_tta.rot90}, {"hflip", s.morphological_tta.hflip}}}};
}

inline EnsembleSpec ensemble_spec_from_json(const json& j, const fs::path& base_dir) {
  EnsembleSpec s;
  if (j.contains("references")) s.references = load_profiles(j["references"], base_dir);
  s.weight_original = detail::get_or(j, "weight_original", s.weight_original);
  s.weight_per_reference = detail::get_or(j, "weight_per_reference", s.weight_per_reference);
  if (j.contains("morphological_tta")) {
    s.morphological_tta.rot90 = detail::get_or(j["morphological_tta"], "rot90", false);
    s.morphological_tta.hflip = detail::get_or(j["morphological_tta"], "hflip", false);
  }
  s.validate();
  return s;
}

// --- PostprocessParams ------------------------------------------------------

inline json to_json(const PostprocessParams& p) {
  json j{{"prob_threshold", p.prob_threshold},
         {"gaussian_sigma", p.gaussian_sigma},
         {"marker_h_fraction", p.marker_h_fraction},
         {"min_instance_area", p.min_instance_area},
         {"opening_radius", p.opening_radius}};
  j["marker_h"] = p.marker_h ? json(*p.marker_h) : json(nullptr);
  return j;
}

inline PostprocessParams postprocess_params_from_json(const json& j) {
  PostprocessParams p;
  p.prob_threshold = detail::get_or(j, "prob_threshold", p.prob_threshold);
  p.gaussian_sigma = detail::get_or(j, "gaussian_sigma", p.gaussian_sigma);
  p.marker_h_fraction = detail::get_or(j, "marker_h_fraction", p.marker_h_fraction);
  if (j.contains("marker_h") && !j["marker_h"].is_null()) p.marker_h = j["marker_h"].get<double>();
  p.min_instance_area = detail::get_or(j, "min_instance_area", p.min_instance_area);
  p.opening_radius = detail::get_or(j, "opening_radius", p.opening_radius);
  p.validate();
  return p;
}

// --- metrics ------------------------------------------------------------------

inline json to_json(const ImageScores& s) {
  return {{"id", s.id},  {"dice", s.dice},        {"aji", s.aji},       {"pq", s.panoptic.pq},
          {"dq", s.panoptic.dq}, {"sq", s.panoptic.sq}, {"tp", s.panoptic.tp}, {"fp", s.panoptic.fp},
          {"fn", s.panoptic.fn}};
}

inline json to_json(const MetricsReport& r) {
  json per = json::array();
  for (const auto& s : r.per_image) per.push_back(to_json(s));
  return {{"name", r.name}, {"dice", r.dice}, {"aji", r.aji}, {"pq", r.pq}, {"dq", r.dq}, {"sq", r.sq},
          {"tp", r.tp},     {"fp", r.fp},     {"fn", r.fn},   {"per_image", per}};
}

/// Aligned plain-text table, one row per report.
inline std::string metrics_table(const std::vector<MetricsReport>& rows) {
  std::size_t name_w = 6;
  for (const auto& r : rows) name_w = std::max(name_w, r.name.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(name_w)) << "Method" << std::right << std::setw(9) << "Dice"
     << std::setw(9) << "AJI" << std::setw(9) << "PQ" << '\n';
  os << std::string(name_w + 27, '-') << '\n';
  os << std::fixed << std::setprecision(4);
  for (const auto& r : rows) {
    os << std::left << std::setw(static_cast<int>(name_w)) << r.name << std::right << std::setw(9) << r.dice
       << std::setw(9) << r.aji << std::setw(9) << r.pq << '\n';
  }
  return os.str();
}

}  // namespace histonorm
