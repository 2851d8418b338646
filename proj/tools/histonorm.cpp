// histonorm command-line tool. Exit codes: 0 success, 1 validation
// error, 2 runtime or stage failure.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "histonorm/histonorm.hpp"

namespace hn = histonorm;
using hn::fs::path;
using nlohmann::json;

namespace {

int exit_code_for(hn::ErrorCode c) {
  switch (c) {
    case hn::ErrorCode::InvalidArgument:
    case hn::ErrorCode::ParseError:
    case hn::ErrorCode::MissingFile:
    case hn::ErrorCode::DuplicateId:
    case hn::ErrorCode::ValidationFailed:
    case hn::ErrorCode::BadMagic:
      return 1;
    default:
      return 2;
  }
}

hn::NormalizationParams load_norm_params(const std::string& file) {
  return file.empty() ? hn::NormalizationParams{} : hn::normalization_params_from_json(hn::read_json(file));
}

hn::FailurePolicy parse_fallback(const std::string& s) {
  if (s == "passthrough") return hn::FailurePolicy::Passthrough;
  if (s == "error") return hn::FailurePolicy::Error;
  throw hn::Error(hn::ErrorCode::InvalidArgument, "fallback must be passthrough or error");
}

std::vector<const hn::ManifestEntry*> pick_split(const hn::DatasetManifest& m, const std::string& split) {
  if (split == "train") return m.split(hn::Split::Train);
  if (split == "test") return m.split(hn::Split::Test);
  if (split != "all") throw hn::Error(hn::ErrorCode::InvalidArgument, "split must be train, test or all");
  std::vector<const hn::ManifestEntry*> out;
  for (const auto& e : m.entries) out.push_back(&e);
  return out;
}

void write_effective(const path& where, const std::string& command, json flags) {
  flags["command"] = command;
  flags["version"] = "0.1.0";
  flags["rng_algorithm"] = std::string(hn::kRngAlgorithm);
  hn::write_text(where, flags.dump(2) + "\n");
}

void print_warnings(const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stain normalization, test-time ensembling and instance evaluation for H&E nuclei segmentation"};
  app.require_subcommand(1);

  // select-refs
  auto* sel = app.add_subcommand("select-refs", "Pick the highest-contrast reference image per organ");
  std::string sel_manifest, sel_out, sel_params, sel_split = "train";
  std::size_t sel_k = 1, sel_jobs = 1;
  sel->add_option("--manifest", sel_manifest, "Dataset manifest JSON")->required();
  sel->add_option("--out-dir", sel_out, "Output directory")->required();
  sel->add_option("--k-per-organ", sel_k, "References per organ");
  sel->add_option("--params", sel_params, "Normalization parameters JSON");
  sel->add_option("--split", sel_split, "train, test or all");
  sel->add_option("--jobs", sel_jobs, "Worker threads");

  // normalize
  auto* norm = app.add_subcommand("normalize", "Normalize one image to a reference profile");
  std::string norm_in, norm_ref, norm_out, norm_params, norm_fallback = "error";
  norm->add_option("--in", norm_in, "Input PNG")->required();
  norm->add_option("--ref-profile", norm_ref, "Reference profile JSON")->required();
  norm->add_option("--out", norm_out, "Output PNG")->required();
  norm->add_option("--params", norm_params, "Normalization parameters JSON");
  norm->add_option("--fallback", norm_fallback, "passthrough or error");

  // augment-plan
  auto* plan_cmd = app.add_subcommand("augment-plan", "Write a seeded augmentation plan");
  std::vector<std::string> plan_refs;
  std::string plan_out;
  std::uint64_t plan_seed = 0;
  double plan_p = 0.5;
  plan_cmd->add_option("--ref-profile", plan_refs, "Reference profile JSON (repeatable, ordered)")->required();
  plan_cmd->add_option("--seed", plan_seed, "Seed")->required();
  plan_cmd->add_option("--p-passthrough", plan_p, "Passthrough probability");
  plan_cmd->add_option("--out", plan_out, "Plan JSON to write")->required();

  // augment-apply
  auto* apply = app.add_subcommand("augment-apply", "Materialize an offline, extended or seeded training set");
  std::string ap_manifest, ap_plan, ap_mode, ap_out, ap_ref, ap_params, ap_split = "train", ap_fallback;
  std::size_t ap_epochs = 1, ap_jobs = 1;
  apply->add_option("--manifest", ap_manifest, "Dataset manifest JSON")->required();
  apply->add_option("--plan", ap_plan, "Augmentation plan JSON")->required();
  apply->add_option("--mode", ap_mode, "replace, extend or stream")->required();
  apply->add_option("--out-dir", ap_out, "Output directory")->required();
  apply->add_option("--ref-profile", ap_ref, "Reference for replace/extend (default: the plan's only reference)");
  apply->add_option("--epochs", ap_epochs, "Epochs to materialize in stream mode");
  apply->add_option("--params", ap_params, "Normalization parameters JSON");
  apply->add_option("--split", ap_split, "train, test or all");
  apply->add_option("--fallback", ap_fallback, "passthrough or error (default: error offline, passthrough stream)");
  apply->add_option("--jobs", ap_jobs, "Worker threads");

  // infer
  auto* inf = app.add_subcommand("infer", "Predict maps, optionally with test-time stain normalization");
  std::string inf_manifest, inf_pred, inf_mode = "baseline", inf_spec, inf_pad = "none", inf_out, inf_params,
                                      inf_split = "test";
  std::size_t inf_jobs = 1;
  bool inf_drop = false;
  inf->add_option("--manifest", inf_manifest, "Dataset manifest JSON")->required();
  inf->add_option("--predictor", inf_pred, "map-dir:PATH or cmd:TEMPLATE")->required();
  inf->add_option("--mode", inf_mode, "baseline or ttsn");
  inf->add_option("--ensemble-spec", inf_spec, "Ensemble spec JSON (ttsn)");
  inf->add_option("--pad", inf_pad, "none, auto, 1024, 1056, ...");
  inf->add_option("--out-dir", inf_out, "Output directory")->required();
  inf->add_option("--params", inf_params, "Normalization parameters JSON");
  inf->add_option("--split", inf_split, "train, test or all");
  inf->add_option("--jobs", inf_jobs, "Worker threads");
  inf->add_flag("--drop-failed", inf_drop, "Drop failed variant predictions and renormalize weights");

  // postprocess
  auto* post = app.add_subcommand("postprocess", "Turn probability/distance maps into instance label PNGs");
  std::string pp_maps, pp_params, pp_out;
  std::optional<double> pp_threshold, pp_sigma, pp_hfrac;
  std::optional<std::size_t> pp_min_area;
  std::optional<int> pp_radius;
  std::size_t pp_jobs = 1;
  post->add_option("--maps-dir", pp_maps, "Directory of <id>.f32m maps")->required();
  post->add_option("--params", pp_params, "Post-processing parameters JSON");
  post->add_option("--out-dir", pp_out, "Output directory")->required();
  post->add_option("--threshold", pp_threshold, "Probability threshold");
  post->add_option("--sigma", pp_sigma, "Gaussian sigma for the distance map");
  post->add_option("--marker-h-fraction", pp_hfrac, "h-maxima depth relative to the distance range");
  post->add_option("--min-area", pp_min_area, "Minimum instance area");
  post->add_option("--opening-radius", pp_radius, "Opening disk radius");
  post->add_option("--jobs", pp_jobs, "Worker threads");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Score instance PNGs against ground truth");
  std::string ev_pred, ev_manifest, ev_report, ev_table, ev_name = "run", ev_split = "test";
  std::size_t ev_jobs = 1;
  ev->add_option("--pred-dir", ev_pred, "Directory of <id>.png predictions")->required();
  ev->add_option("--gt-manifest", ev_manifest, "Manifest with ground-truth masks")->required();
  ev->add_option("--report", ev_report, "Metrics JSON to write")->required();
  ev->add_option("--table", ev_table, "Plain-text table to write");
  ev->add_option("--name", ev_name, "Row label");
  ev->add_option("--split", ev_split, "train, test or all");
  ev->add_option("--jobs", ev_jobs, "Worker threads");

  // run-experiment
  auto* run = app.add_subcommand("run-experiment", "Run one or more experiment modes end to end");
  std::string run_config, run_mode, run_out;
  std::optional<std::size_t> run_jobs;
  std::optional<std::uint64_t> run_seed;
  run->add_option("--config", run_config, "RunConfig JSON")->required();
  run->add_option("--mode", run_mode, "Override the configured modes (a mode name or 'all')");
  run->add_option("--out-dir", run_out, "Override the output directory");
  run->add_option("--jobs", run_jobs, "Override worker threads");
  run->add_option("--seed", run_seed, "Override the seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*sel) {
      const auto manifest = hn::load_manifest(sel_manifest);
      const auto params = load_norm_params(sel_params);
      const auto result = hn::select_refs(pick_split(manifest, sel_split), sel_k, params, sel_out, sel_jobs);
      write_effective(path(sel_out) / "effective_config.json", "select-refs",
                      {{"manifest", sel_manifest}, {"k_per_organ", sel_k}, {"split", sel_split},
                       {"normalization", hn::to_json(params)}});
      for (std::size_t i = 0; i < result.selected.size(); ++i) {
        std::cout << result.selected[i].organ << '\t' << result.selected[i].id << '\t'
                  << result.profile_paths[i].string() << '\n';
      }
    } else if (*norm) {
      const auto params = load_norm_params(norm_params);
      const auto policy = parse_fallback(norm_fallback);
      const auto ref = hn::load_profile(norm_ref);
      auto img = hn::read_rgb_png(norm_in);
      try {
        img = hn::normalize_to_reference(img, ref, params);
      } catch (const hn::Error& e) {
        if (policy == hn::FailurePolicy::Error) throw;
        std::cerr << "warning: " << norm_in << ": normalization failed, writing input unchanged (" << e.what() << ")\n";
      }
      hn::write_rgb_png(norm_out, img);
      write_effective(path(norm_out).replace_extension(".effective_config.json"), "normalize",
                      {{"in", norm_in}, {"ref_profile", norm_ref}, {"fallback", norm_fallback},
                       {"normalization", hn::to_json(params)}});
    } else if (*plan_cmd) {
      hn::AugmentationPlan plan;
      plan.p_passthrough = plan_p;
      plan.seed = plan_seed;
      std::vector<std::string> rel;
      const path base = hn::fs::absolute(plan_out).parent_path();
      for (const auto& r : plan_refs) {
        plan.references.push_back(hn::load_profile(r));
        rel.push_back(hn::fs::relative(hn::fs::absolute(r), base).string());
      }
      plan.validate();
      hn::fs::create_directories(base);
      hn::write_text(plan_out, hn::plan_to_json(plan, rel).dump(2) + "\n");
    } else if (*apply) {
      const auto manifest = hn::load_manifest(ap_manifest);
      const auto params = load_norm_params(ap_params);
      const auto plan = hn::load_plan(ap_plan);
      const auto entries = pick_split(manifest, ap_split);
      std::vector<std::string> warnings;
      if (ap_mode == "replace" || ap_mode == "extend") {
        if (ap_ref.empty() && plan.references.size() != 1) {
          throw hn::Error(hn::ErrorCode::InvalidArgument, "plan has several references; pass --ref-profile");
        }
        const auto ref = ap_ref.empty() ? plan.references.front() : hn::load_profile(ap_ref);
        warnings = hn::augment_offline(entries, ref, ap_mode == "replace" ? hn::OfflineMode::Replace : hn::OfflineMode::Extend,
                                       params, ap_out, parse_fallback(ap_fallback.empty() ? "error" : ap_fallback), ap_jobs);
      } else if (ap_mode == "stream") {
        warnings = hn::augment_stream(entries, plan, ap_epochs, params, ap_out,
                                      parse_fallback(ap_fallback.empty() ? "passthrough" : ap_fallback), ap_jobs);
      } else {
        throw hn::Error(hn::ErrorCode::InvalidArgument, "mode must be replace, extend or stream");
      }
      print_warnings(warnings);
      write_effective(path(ap_out) / "effective_config.json", "augment-apply",
                      {{"manifest", ap_manifest}, {"plan", ap_plan}, {"mode", ap_mode}, {"ref_profile", ap_ref},
                       {"epochs", ap_epochs}, {"split", ap_split}, {"normalization", hn::to_json(params)}});
    } else if (*inf) {
      const auto manifest = hn::load_manifest(inf_manifest);
      const auto params = load_norm_params(inf_params);
      const auto pcfg = hn::PredictorConfig::parse(inf_pred);
      hn::EnsembleSpec spec;
      if (inf_mode == "ttsn") {
        if (inf_spec.empty()) throw hn::Error(hn::ErrorCode::InvalidArgument, "ttsn mode needs --ensemble-spec");
        spec = hn::ensemble_spec_from_json(hn::read_json(inf_spec), hn::fs::absolute(inf_spec).parent_path());
      } else if (inf_mode != "baseline") {
        throw hn::Error(hn::ErrorCode::InvalidArgument, "mode must be baseline or ttsn");
      }
      hn::InferOptions opt;
      opt.pad = hn::PadSetting::parse(inf_pad);
      opt.jobs = inf_jobs;
      opt.drop_failed_predictions = inf_drop;
      const auto predictor = hn::make_predictor(pcfg, inf_mode, path(inf_out) / "scratch");
      print_warnings(hn::infer(pick_split(manifest, inf_split), *predictor, spec, params, opt, inf_out));
      write_effective(path(inf_out) / "effective_config.json", "infer",
                      {{"manifest", inf_manifest}, {"predictor", inf_pred}, {"mode", inf_mode},
                       {"ensemble_spec", inf_spec}, {"pad", opt.pad.str()}, {"split", inf_split},
                       {"drop_failed", inf_drop}, {"normalization", hn::to_json(params)}});
    } else if (*post) {
      hn::PostprocessParams params =
          pp_params.empty() ? hn::PostprocessParams{} : hn::postprocess_params_from_json(hn::read_json(pp_params));
      if (pp_threshold) params.prob_threshold = *pp_threshold;
      if (pp_sigma) params.gaussian_sigma = *pp_sigma;
      if (pp_hfrac) params.marker_h_fraction = *pp_hfrac;
      if (pp_min_area) params.min_instance_area = *pp_min_area;
      if (pp_radius) params.opening_radius = *pp_radius;
      params.validate();
      hn::postprocess_dir(pp_maps, params, pp_out, pp_jobs);
      write_effective(path(pp_out) / "effective_config.json", "postprocess",
                      {{"maps_dir", pp_maps}, {"postprocess", hn::to_json(params)}});
    } else if (*ev) {
      const auto manifest = hn::load_manifest(ev_manifest);
      const auto report = hn::evaluate_dir(ev_pred, pick_split(manifest, ev_split), ev_name, ev_jobs);
      hn::write_text(ev_report, hn::to_json(report).dump(2) + "\n");
      const std::string table = hn::metrics_table({report});
      if (!ev_table.empty()) hn::write_text(ev_table, table);
      std::cout << table;
    } else if (*run) {
      json j = hn::read_json(run_config);
      if (!run_mode.empty()) {
        j.erase("modes");
        j["mode"] = run_mode;
      }
      if (!run_out.empty()) j["out_dir"] = hn::fs::absolute(run_out).string();
      if (run_jobs) j["jobs"] = *run_jobs;
      if (run_seed) j["seed"] = *run_seed;
      const auto cfg = hn::run_config_from_json(j, hn::fs::absolute(run_config).parent_path());
      const auto rows = hn::run_experiment(cfg);
      std::cout << hn::metrics_table(rows);
    }
  } catch (const hn::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
