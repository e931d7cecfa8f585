// Command-line front end: scene generation, reconstruction, attack runs,
// sweeps and constants estimation. Exit codes: 0 success, 2 validation
// error, 3 collapse-detected-with---expect-success, 4 internal error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sfmlab/attack.hpp"
#include "sfmlab/image_io.hpp"
#include "sfmlab/scene.hpp"
#include "sfmlab/serialize.hpp"
#include "sfmlab/sfm.hpp"
#include "sfmlab/sweep.hpp"
#include "sfmlab/theory.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using namespace sfmlab;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitCollapse = 3;
constexpr int kExitInternal = 4;

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

std::string view_name(int i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "view_%03d.%s", i, ext);
  return buf;
}

// Manifest goes to <dir>/manifest.json; the wall-clock reading goes to a
// sibling timings.json so the manifest itself stays byte-stable across
// re-runs of the same seed.
void write_manifest(const std::string& dir, serialize::RunManifest m) {
  ordered_json timing;
  timing["wall_seconds"] = m.wall_seconds;
  serialize::save_json(dir + "/timings.json", timing);
  m.wall_seconds = 0;
  serialize::save_json(dir + "/manifest.json", serialize::manifest_to_json(m));
}

std::vector<ImageBuffer> load_views(const std::string& dir, int num_views) {
  std::vector<ImageBuffer> out;
  for (int i = 0; i < num_views; ++i) {
    const std::string path = dir + "/" + view_name(i, "pfm");
    if (!fs::exists(path)) throw ValidationError("missing view image: " + path);
    out.push_back(io::read_pfm(path));
  }
  return out;
}

scene::MultiViewScene load_scene(const std::string& dir) {
  const std::string path = dir + "/scene.json";
  if (!fs::exists(path)) throw ValidationError("missing scene.json in " + dir);
  return serialize::scene_from_json(serialize::load_json(path));
}

// Config file merge: JSON values fill in only the flags the user did not pass
// on the command line.
void merge_config(CLI::App* cmd, const std::string& config_path) {
  if (config_path.empty()) return;
  const json cfg = serialize::load_json(config_path);
  for (const auto& [key, value] : cfg.items()) {
    CLI::Option* opt = cmd->get_option_no_throw("--" + key);
    if (!opt) continue;                 // unknown keys are ignored: profiles are shared
    if (opt->count() > 0) continue;     // explicit flags win
    if (value.is_array()) {
      for (const auto& v : value) opt->add_result(v.dump());
    } else if (value.is_string()) {
      opt->add_result(value.get<std::string>());
    } else {
      opt->add_result(value.dump());
    }
    opt->run_callback();
  }
}

void add_attack_flags(CLI::App* cmd, attack::AttackConfig& atk) {
  // Full-scale defaults; the bundled desk profile dials the schedule down.
  atk.outer_iters = 1000;
  cmd->add_option("--epsilon", atk.epsilon, "l-infinity budget");
  cmd->add_option("--alpha", atk.alpha, "PGD step size");
  cmd->add_option("--inner-steps", atk.inner_steps, "PGD steps per outer iteration");
  cmd->add_option("--outer-iters", atk.outer_iters, "outer iterations");
  cmd->add_option("--refresh-period", atk.refresh_period, "correspondence refresh period");
  cmd->add_option("--w-grad", atk.w_grad, "gradient-inconsistency weight");
  cmd->add_option("--w-ssim", atk.w_ssim, "SSIM regularizer weight");
  cmd->add_option("--w-tv", atk.w_tv, "total-variation regularizer weight");
  cmd->add_option("--ratio", atk.poison_ratio, "poisoned-view ratio");
  cmd->add_option("--patch-radius", atk.patch_radius, "loss patch radius");
  cmd->add_option("--pairs-per-poison", atk.pairs_per_poison, "reference pairs per view");
  cmd->add_option("--corr-per-pair", atk.corr_per_pair, "correspondences per pair");
}

void add_sfm_flags(CLI::App* cmd, sfm::SfmConfig& cfg) {
  cmd->add_option("--max-keypoints", cfg.max_keypoints, "keypoints per view");
  cmd->add_option("--ratio-threshold", cfg.match.ratio_threshold, "NN ratio threshold");
  cmd->add_option("--sampson-px", cfg.match.sampson_threshold_px, "Sampson threshold");
  cmd->add_option("--eta-min", cfg.match.eta_min, "minimum edge inlier ratio");
  cmd->add_option("--ba-iters", cfg.ba_max_iters, "bundle adjustment iterations");
  cmd->add_option("--point-accept-px", cfg.point_accept_px, "track acceptance threshold");
}

ordered_json attack_config_json(const attack::AttackConfig& a) {
  ordered_json j;
  j["epsilon"] = a.epsilon;
  j["alpha"] = a.alpha;
  j["inner_steps"] = a.inner_steps;
  j["outer_iters"] = a.outer_iters;
  j["refresh_period"] = a.refresh_period;
  j["w_grad"] = a.w_grad;
  j["w_ssim"] = a.w_ssim;
  j["w_tv"] = a.w_tv;
  j["poison_ratio"] = a.poison_ratio;
  j["patch_radius"] = a.patch_radius;
  j["pairs_per_poison"] = a.pairs_per_poison;
  j["corr_per_pair"] = a.corr_per_pair;
  j["seed"] = a.seed;
  return j;
}

void write_view_images(const std::string& dir, const std::vector<ImageBuffer>& views,
                       serialize::RunManifest& manifest) {
  for (size_t i = 0; i < views.size(); ++i) {
    const std::string pfm = dir + "/" + view_name(static_cast<int>(i), "pfm");
    const std::string png = dir + "/" + view_name(static_cast<int>(i), "png");
    io::write_pfm(pfm, views[i]);
    io::write_png_gray(png, views[i]);
    manifest.outputs.push_back(pfm);
    manifest.outputs.push_back(png);
  }
}

int run_generate(const scene::SceneSpec& spec, const std::string& out,
                 const std::string& texture) {
  scene::SceneSpec s = spec;
  if (texture == "checker")
    s.texture_kind = scene::TextureKind::kChecker;
  else if (texture == "noise")
    s.texture_kind = scene::TextureKind::kNoise;
  else
    throw ValidationError("unknown texture kind: " + texture);

  Timer timer;
  const auto sc = scene::generate_scene(s);
  const auto views = scene::render_all_views(sc);
  fs::create_directories(out);

  serialize::RunManifest manifest;
  manifest.command = "generate";
  manifest.seed = s.seed;
  manifest.config = {{"views", s.num_views},   {"patches", s.num_patches},
                     {"texture", texture},     {"texture_size", s.texture_size},
                     {"width", s.image_width}, {"height", s.image_height}};
  write_view_images(out, views, manifest);
  serialize::save_json(out + "/scene.json", serialize::scene_to_json(sc));
  manifest.outputs.push_back(out + "/scene.json");
  manifest.wall_seconds = timer.seconds();
  write_manifest(out, manifest);
  return kExitOk;
}

int run_reconstruct(const std::string& scene_dir, const std::string& out,
                    sfm::SfmConfig cfg, uint64_t seed, const std::string& baseline_csv,
                    bool expect_success) {
  Timer timer;
  const auto sc = load_scene(scene_dir);
  const auto views = load_views(scene_dir, sc.num_views());
  cfg.seed = seed;
  if (cfg.intrinsics.empty()) cfg.intrinsics = sc.intrinsics;

  const auto graph = sfm::build_pose_graph(views, cfg);
  auto state = sfm::run_incremental_sfm(graph, cfg);

  if (!baseline_csv.empty()) {
    std::ifstream in(baseline_csv);
    if (!in) throw ValidationError("cannot open baseline CSV: " + baseline_csv);
    std::string header, row;
    std::getline(in, header);
    std::getline(in, row);
    sfm::SfmStats base;
    if (std::sscanf(row.c_str(), "%d,%d,%lf,%ld,%ld,%lf", &base.num_views,
                    &base.registered_views, &base.registered_ratio,
                    &base.triangulated_keypoints, &base.total_points,
                    &base.mean_reprojection_px) != 6)
      throw ValidationError("malformed baseline CSV row: " + row);
    state.stats = sfm::compute_stats(state, graph.num_views, &graph, &cfg, &base);
  }

  fs::create_directories(out);
  serialize::RunManifest manifest;
  manifest.command = "reconstruct";
  manifest.seed = seed;
  manifest.config = {{"scene", scene_dir}, {"baseline", baseline_csv}};
  manifest.input_hashes["scene.json"] = serialize::hex64(io::file_hash(scene_dir + "/scene.json"));

  serialize::save_json(out + "/reconstruction.json",
                       serialize::reconstruction_to_json(state, graph));
  {
    std::ofstream csv(out + "/stats.csv", std::ios::binary);
    csv << serialize::stats_csv_header() << "\n" << serialize::stats_csv_row(state.stats) << "\n";
  }
  serialize::write_text_reconstruction(out + "/text", state, graph, cfg);
  manifest.outputs = {out + "/reconstruction.json", out + "/stats.csv", out + "/text"};
  manifest.wall_seconds = timer.seconds();
  write_manifest(out, manifest);

  const bool collapsed = state.no_valid_initial_pair || state.stats.registered_ratio < 0.5;
  if (collapsed && expect_success) {
    std::cerr << "reconstruction collapsed (registered_ratio="
              << serialize::format_float(state.stats.registered_ratio) << ")\n";
    return kExitCollapse;
  }
  return kExitOk;
}

int run_attack(const std::string& scene_dir, const std::string& out,
               attack::AttackConfig cfg, uint64_t seed) {
  Timer timer;
  const auto sc = load_scene(scene_dir);
  cfg.seed = seed;
  const auto result = attack::pgd_attack(sc, cfg);
  const auto clean = scene::render_all_views(sc);
  const auto poisoned = attack::apply_perturbations(clean, result.perturbations);

  fs::create_directories(out);
  serialize::RunManifest manifest;
  manifest.command = "attack";
  manifest.seed = seed;
  manifest.config = attack_config_json(cfg);
  manifest.input_hashes["scene.json"] = serialize::hex64(io::file_hash(scene_dir + "/scene.json"));

  write_view_images(out, poisoned, manifest);
  for (int k : result.perturbations.poison_set) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "delta_%03d.pfm", k);
    io::write_pfm(out + "/" + buf, result.perturbations.deltas[k]);
    manifest.outputs.push_back(out + "/" + buf);
  }
  serialize::save_json(out + "/scene.json", serialize::scene_to_json(sc));

  ordered_json aj;
  aj["config"] = attack_config_json(cfg);
  aj["poison_set"] = result.perturbations.poison_set;
  aj["reference_set"] = result.perturbations.reference_set;
  aj["loss_trace"] = result.loss_trace;
  aj["final_cvi"] = result.final_cvi;
  serialize::save_json(out + "/attack.json", aj);
  manifest.outputs.push_back(out + "/scene.json");
  manifest.outputs.push_back(out + "/attack.json");
  manifest.wall_seconds = timer.seconds();
  write_manifest(out, manifest);
  return kExitOk;
}

int run_sweep(const std::string& scene_dir, const std::string& out, const std::string& mode,
              std::vector<double> grid, std::vector<uint64_t> seeds,
              const attack::AttackConfig& atk, const sfm::SfmConfig& sfm_cfg, int jobs) {
  if (grid.empty()) throw ValidationError("sweep: empty grid");
  if (seeds.empty()) seeds = {1};
  std::sort(grid.begin(), grid.end());
  Timer timer;
  const auto sc = load_scene(scene_dir);
  fs::create_directories(out);

  serialize::RunManifest manifest;
  manifest.command = "sweep";
  manifest.seed = seeds.front();
  manifest.config = {{"mode", mode}, {"grid", grid}, {"seeds", seeds}, {"jobs", jobs}};
  manifest.input_hashes["scene.json"] = serialize::hex64(io::file_hash(scene_dir + "/scene.json"));

  if (mode == "epsilon") {
    const auto rows = sweep::epsilon_sweep(sc, atk, grid, seeds, sfm_cfg, jobs);
    std::ofstream csv(out + "/sweep.csv", std::ios::binary);
    csv << "epsilon,seed,final_cvi,registered_ratio,total_points,triangulated_keypoints,"
           "collapse_ratio,mean_ssim,mean_psnr\n";
    for (const auto& r : rows)
      csv << serialize::format_float(r.epsilon) << "," << r.seed << ","
          << serialize::format_float(r.final_cvi) << ","
          << serialize::format_float(r.registered_ratio) << "," << r.total_points << ","
          << r.triangulated_keypoints << "," << serialize::format_float(r.collapse_ratio) << ","
          << serialize::format_float(r.mean_ssim) << ","
          << serialize::format_float(r.mean_psnr) << "\n";
    manifest.outputs.push_back(out + "/sweep.csv");
  } else if (mode == "delta") {
    sweep::SweepConfig scfg;
    scfg.sfm = sfm_cfg;
    scfg.attack = atk;
    scfg.seed = seeds.front();
    scfg.jobs = jobs;
    const auto report = sweep::validate_threshold(sc, atk, grid, seeds, scfg);

    ordered_json j;
    j["l_th"] = report.l_th;
    j["band"] = {report.band_lo, report.band_hi};
    j["tau_g"] = report.constants.tau_g;
    j["tau_d"] = report.constants.tau_d;
    j["beta_r"] = report.constants.beta_r;
    j["alpha_tail"] = report.constants.alpha_tail;
    j["steepest_drop_cvi"] = report.steepest_drop_cvi;
    j["crossing_in_band"] = report.crossing_in_band;
    j["spearman_rho"] = report.spearman_rho;
    j["spearman_p"] = report.spearman_p;
    j["inconclusive"] = report.inconclusive;
    serialize::save_json(out + "/threshold_report.json", j);

    std::ofstream csv(out + "/threshold_report.csv", std::ios::binary);
    csv << "delta,seed,measured_cvi,min_critical_eta,registered_ratio,total_points,"
           "predicted_bound,prediction_applicable,edge_failure,sfm_failed\n";
    for (const auto& r : report.rows)
      csv << serialize::format_float(r.delta) << "," << r.seed << ","
          << serialize::format_float(r.measured_cvi) << ","
          << serialize::format_float(r.min_critical_eta) << ","
          << serialize::format_float(r.registered_ratio) << "," << r.total_points << ","
          << serialize::format_float(r.predicted_bound) << "," << (r.prediction_applicable ? 1 : 0)
          << "," << (r.edge_failure ? 1 : 0) << "," << (r.sfm_failed ? 1 : 0) << "\n";
    manifest.outputs.push_back(out + "/threshold_report.json");
    manifest.outputs.push_back(out + "/threshold_report.csv");
  } else {
    throw ValidationError("sweep: mode must be 'epsilon' or 'delta'");
  }
  manifest.wall_seconds = timer.seconds();
  write_manifest(out, manifest);
  return kExitOk;
}

int run_theory(const std::string& scene_dir, const std::string& out, uint64_t seed) {
  Timer timer;
  const auto sc = load_scene(scene_dir);
  theory::TheoryConfig cfg;
  cfg.seed = seed;
  const auto k = theory::estimate_constants(sc, cfg);

  fs::create_directories(out);
  ordered_json j;
  j["tau_g"] = k.tau_g;
  j["tau_d"] = k.tau_d;
  j["l_min"] = k.l_min;
  j["l_max"] = k.l_max;
  j["beta_r"] = k.beta_r;
  j["alpha_tail"] = k.alpha_tail;
  j["tail_fit_r2"] = k.tail_fit_r2;
  j["tail_inconclusive"] = k.tail_inconclusive;
  j["eta_min"] = k.eta_min;
  j["l_th"] = k.breakdown_threshold();
  serialize::save_json(out + "/theory.json", j);

  serialize::RunManifest manifest;
  manifest.command = "theory";
  manifest.seed = seed;
  manifest.config = {{"scene", scene_dir}};
  manifest.input_hashes["scene.json"] = serialize::hex64(io::file_hash(scene_dir + "/scene.json"));
  manifest.outputs = {out + "/theory.json"};
  manifest.wall_seconds = timer.seconds();
  write_manifest(out, manifest);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic multi-view pipeline: generation, reconstruction, "
               "perturbation attacks and threshold analysis"};
  app.require_subcommand(1);

  std::string config_path;
  uint64_t seed = 1;
  app.add_option("--config", config_path, "JSON config merged under explicit flags")
      ->each([](const std::string&) {});

  // generate
  auto* gen = app.add_subcommand("generate", "render a synthetic scene");
  scene::SceneSpec spec;
  std::string texture = "noise";
  std::string gen_out;
  gen->add_option("--views", spec.num_views, "number of views");
  gen->add_option("--patches", spec.num_patches, "number of textured patches");
  gen->add_option("--seed", spec.seed, "scene seed");
  gen->add_option("--texture", texture, "texture kind: noise|checker");
  gen->add_option("--texture-size", spec.texture_size, "texture resolution");
  gen->add_option("--width", spec.image_width, "image width");
  gen->add_option("--height", spec.image_height, "image height");
  gen->add_option("--out", gen_out, "output directory")->required();

  // reconstruct
  auto* rec = app.add_subcommand("reconstruct", "incremental reconstruction");
  std::string rec_scene, rec_out, rec_baseline;
  bool expect_success = false;
  sfm::SfmConfig sfm_cfg;
  rec->add_option("--scene", rec_scene, "scene directory")->required();
  rec->add_option("--out", rec_out, "output directory")->required();
  rec->add_option("--seed", seed, "pipeline seed");
  rec->add_option("--baseline", rec_baseline, "clean stats.csv for collapse scoring");
  rec->add_flag("--expect-success", expect_success, "exit 3 when reconstruction collapses");
  add_sfm_flags(rec, sfm_cfg);

  // attack
  auto* atk_cmd = app.add_subcommand("attack", "projected-gradient poisoning");
  std::string atk_scene, atk_out;
  attack::AttackConfig atk;
  atk_cmd->add_option("--scene", atk_scene, "scene directory")->required();
  atk_cmd->add_option("--out", atk_out, "output directory")->required();
  atk_cmd->add_option("--seed", seed, "attack seed");
  add_attack_flags(atk_cmd, atk);

  // sweep
  auto* swp = app.add_subcommand("sweep", "budget / threshold sweeps");
  std::string swp_scene, swp_out, swp_mode = "epsilon";
  std::vector<double> swp_grid;
  std::vector<uint64_t> swp_seeds;
  int jobs = 1;
  attack::AttackConfig swp_atk;
  sfm::SfmConfig swp_sfm;
  swp->add_option("--scene", swp_scene, "scene directory")->required();
  swp->add_option("--out", swp_out, "output directory")->required();
  swp->add_option("--mode", swp_mode, "epsilon | delta");
  swp->add_option("--grid", swp_grid, "grid values");
  swp->add_option("--seeds", swp_seeds, "seed list");
  swp->add_option("--jobs", jobs, "worker cap for sweep cells");
  add_attack_flags(swp, swp_atk);
  add_sfm_flags(swp, swp_sfm);

  // theory
  auto* thr = app.add_subcommand("theory", "estimate model constants");
  std::string thr_scene, thr_out;
  thr->add_option("--scene", thr_scene, "scene directory")->required();
  thr->add_option("--out", thr_out, "output directory")->required();
  thr->add_option("--seed", seed, "estimation seed");

  CLI11_PARSE(app, argc, argv);

  try {
    for (auto* cmd : {gen, rec, atk_cmd, swp, thr})
      if (cmd->parsed()) merge_config(cmd, config_path);

    if (gen->parsed()) {
      if (spec.num_views < 2) throw ValidationError("generate: need at least 2 views");
      return run_generate(spec, gen_out, texture);
    }
    if (rec->parsed())
      return run_reconstruct(rec_scene, rec_out, sfm_cfg, seed, rec_baseline, expect_success);
    if (atk_cmd->parsed()) return run_attack(atk_scene, atk_out, atk, seed);
    if (swp->parsed())
      return run_sweep(swp_scene, swp_out, swp_mode, swp_grid, swp_seeds, swp_atk, swp_sfm,
                       jobs);
    if (thr->parsed()) return run_theory(thr_scene, thr_out, seed);
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitInternal;
}
