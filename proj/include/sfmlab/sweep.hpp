#pragma once

#include <map>
#include <thread>
#include <vector>

#include "sfmlab/attack.hpp"
#include "sfmlab/core.hpp"
#include "sfmlab/matching.hpp"
#include "sfmlab/scene.hpp"
#include "sfmlab/sfm.hpp"
#include "sfmlab/stats.hpp"
#include "sfmlab/theory.hpp"

namespace sfmlab::sweep {

using attack::PerturbationSet;
using scene::MultiViewScene;

struct CurveConfig {
  imaging::DetectConfig detect;
  matching::MatchConfig match;
  int max_keypoints = 400;
  int patch_radius = 8;
  int corr_samples_per_patch = 24;
  uint64_t seed = 0;
};

struct CurvePoint {
  double delta_scale = 0;
  double l_cvi = 0;   // measured patch-restricted gradient inconsistency
  double eta = 0;     // RANSAC inlier ratio on the probe pair
  bool accepted = false;
};

namespace detail {

// Probe pair for the curve: the first poisoned view against its best
// reference view (most shared patches). Falls back to the adjacent view.
inline std::pair<int, int> pick_probe_pair(const MultiViewScene& sc,
                                           const PerturbationSet& pset) {
  if (pset.poison_set.empty() || pset.reference_set.empty())
    throw ValidationError("pick_probe_pair: need both poisoned and reference views");
  const int pj = pset.poison_set.front();
  attack::AttackConfig probe;
  const auto refs = attack::detail::pick_reference_views(sc, pj, pset.reference_set, 1);
  if (!refs.empty()) return {refs.front(), pj};
  return {pset.reference_set.front(), pj};
}

inline double measure_cvi(const std::vector<ImageBuffer>& views,
                          const std::vector<scene::GroundTruthCorrespondence>& corrs,
                          int patch_radius) {
  if (corrs.empty()) return 0;
  return attack::cvi_loss(views, corrs, patch_radius, false).loss;
}

}  // namespace detail

// Scaled-perturbation probe: for each delta scale in [0,1], render the
// poisoned views at that fraction of the budget and run
// detect -> describe -> match -> verify on one fixed reference/poisoned pair.
// Matching failures become eta = 0 points (collapse data, not errors).
inline std::vector<CurvePoint> inlier_ratio_curve(const MultiViewScene& sc,
                                                  const PerturbationSet& pset,
                                                  const std::vector<double>& deltas,
                                                  const CurveConfig& cfg = {}) {
  if (sc.num_views() < 2) throw ValidationError("inlier_ratio_curve: need >= 2 views");
  if (deltas.empty()) throw ValidationError("inlier_ratio_curve: empty delta grid");
  for (size_t i = 1; i < deltas.size(); ++i)
    if (deltas[i] < deltas[i - 1])
      throw ValidationError("inlier_ratio_curve: deltas must be sorted ascending");

  const auto clean = scene::render_all_views(sc);
  const auto [ref, poi] = detail::pick_probe_pair(sc, pset);
  const double margin = cfg.patch_radius + 2.0;
  const auto corrs = scene::ground_truth_correspondences(
      sc, ref, poi, cfg.corr_samples_per_patch, margin, hash_combine(cfg.seed, 0xc0bbu));

  std::vector<CurvePoint> out;
  for (double scale : deltas) {
    const auto views = attack::apply_perturbations(clean, pset, scale);
    CurvePoint pt;
    pt.delta_scale = scale;
    pt.l_cvi = detail::measure_cvi(views, corrs, cfg.patch_radius);

    auto kps_a = imaging::detect_keypoints(views[ref], cfg.max_keypoints, cfg.detect);
    auto kps_b = imaging::detect_keypoints(views[poi], cfg.max_keypoints, cfg.detect);
    const auto ga = imaging::feature_gradients(views[ref], cfg.detect);
    const auto gb = imaging::feature_gradients(views[poi], cfg.detect);
    std::vector<imaging::Descriptor> da, db;
    for (const auto& kp : kps_a) da.push_back(imaging::extract_descriptor(ga, kp));
    for (const auto& kp : kps_b) db.push_back(imaging::extract_descriptor(gb, kp));
    const auto candidates = matching::match_descriptors(da, db, cfg.match.ratio_threshold);
    const auto edge = matching::verify_ransac(candidates, kps_a, kps_b, cfg.match,
                                              hash_combine(cfg.seed, 0xe7a0u));
    pt.eta = edge.eta;
    pt.accepted = edge.accepted;
    out.push_back(pt);
  }
  return out;
}

struct SweepConfig {
  sfm::SfmConfig sfm;
  attack::AttackConfig attack;
  theory::TheoryConfig theory;
  uint64_t seed = 0;
  int jobs = 1;
};

struct SweepRow {
  double delta = 0;          // perturbation scale on the grid
  uint64_t seed = 0;
  double measured_cvi = 0;   // mean patch-restricted L_CVI on attack pairs
  double min_critical_eta = 0;
  double registered_ratio = 0;
  long total_points = 0;
  double predicted_bound = 0;
  bool prediction_applicable = false;
  bool edge_failure = false;  // any critical clean-run pair rejected this run
  bool sfm_failed = false;    // registered_ratio < 0.5 or no initial pair
};

struct ThresholdReport {
  theory::TheoryConstants constants;
  double l_th = 0;
  double band_lo = 0;   // stated band around l_th
  double band_hi = 0;
  std::vector<SweepRow> rows;
  double steepest_drop_cvi = 0;  // midpoint L_CVI of the steepest ratio drop
  bool crossing_in_band = false;
  double spearman_rho = 0;       // rho(measured L_CVI, registered_ratio)
  double spearman_p = 1;
  bool inconclusive = false;
};

namespace detail {

inline double eta_of_pair(const sfm::PoseGraph& graph, int a, int b) {
  for (const auto& e : graph.edges)
    if ((e.view_a == a && e.view_b == b) || (e.view_a == b && e.view_b == a)) return e.eta;
  return 0;
}

inline bool pair_accepted(const sfm::PoseGraph& graph, int a, int b) {
  for (const auto& e : graph.edges)
    if ((e.view_a == a && e.view_b == b) || (e.view_a == b && e.view_b == a))
      return e.accepted;
  return false;
}

// Deterministic work split: worker i owns cells i, i+jobs, i+2*jobs, ...
// Results land at fixed indices, so ordering never depends on scheduling.
template <typename Fn>
inline void parallel_cells(int count, int jobs, Fn&& fn) {
  jobs = std::clamp(jobs, 1, std::max(1, count));
  if (jobs == 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> workers;
  for (int w = 0; w < jobs; ++w)
    workers.emplace_back([&, w] {
      for (int i = w; i < count; i += jobs) fn(i);
    });
  for (auto& t : workers) t.join();
}

}  // namespace detail

// Full-pipeline validation: one PGD attack per seed, then SfM runs at each
// scaling of the optimized perturbation, compared against the closed-form
// breakdown threshold estimated on the clean scene.
inline ThresholdReport validate_threshold(const MultiViewScene& sc,
                                          const attack::AttackConfig& atk_cfg,
                                          const std::vector<double>& delta_grid,
                                          const std::vector<uint64_t>& seeds,
                                          const SweepConfig& cfg = {}) {
  if (delta_grid.empty() || seeds.empty())
    throw ValidationError("validate_threshold: empty grid or seed list");

  ThresholdReport report;
  theory::TheoryConfig tcfg = cfg.theory;
  tcfg.seed = cfg.seed;
  report.constants = theory::estimate_constants(sc, tcfg);
  report.l_th = report.constants.breakdown_threshold();
  report.band_lo = 0.5 * report.l_th;
  report.band_hi = 2.0 * report.l_th;

  const auto clean = scene::render_all_views(sc);
  sfm::SfmConfig sfm_cfg = cfg.sfm;
  if (sfm_cfg.intrinsics.empty()) sfm_cfg.intrinsics = sc.intrinsics;
  const auto clean_graph = sfm::build_pose_graph(clean, sfm_cfg);
  const auto clean_state = sfm::run_incremental_sfm(clean_graph, sfm_cfg);
  const auto& clean_stats = clean_state.stats;
  const int m = static_cast<int>(clean_state.critical_edges.size());
  int mean_kps = 0;
  for (const auto& f : clean_graph.features)
    mean_kps += static_cast<int>(f.keypoints.size());
  mean_kps = std::max(1, mean_kps / std::max(1, clean_graph.num_views));

  report.rows.assign(seeds.size() * delta_grid.size(), SweepRow{});
  detail::parallel_cells(static_cast<int>(seeds.size()), cfg.jobs, [&](int si) {
    const uint64_t seed = seeds[si];
    attack::AttackConfig run_cfg = atk_cfg;
    run_cfg.seed = seed;
    const auto result = attack::pgd_attack(sc, run_cfg);
    const auto& corrs = result.final_correspondences;

    for (size_t di = 0; di < delta_grid.size(); ++di) {
      const double scale = delta_grid[di];
      const auto views = attack::apply_perturbations(clean, result.perturbations, scale);
      SweepRow row;
      row.delta = scale;
      row.seed = seed;
      row.measured_cvi = detail::measure_cvi(views, corrs, run_cfg.patch_radius);

      const auto graph = sfm::build_pose_graph(views, sfm_cfg);
      const auto state = sfm::run_incremental_sfm(graph, sfm_cfg);
      row.registered_ratio = state.stats.registered_ratio;
      row.total_points = state.stats.total_points;
      row.sfm_failed = state.no_valid_initial_pair || row.registered_ratio < 0.5;

      row.min_critical_eta = 1.0;
      for (const auto& [a, b] : clean_state.critical_edges) {
        row.min_critical_eta = std::min(row.min_critical_eta, detail::eta_of_pair(graph, a, b));
        if (!detail::pair_accepted(graph, a, b)) row.edge_failure = true;
      }
      if (clean_state.critical_edges.empty()) row.min_critical_eta = 0;

      const double excess = std::max(0.0, row.measured_cvi - report.constants.tau_g);
      const auto pred = theory::predict_breakdown(report.constants, std::max(1, m), mean_kps,
                                                  {excess});
      row.predicted_bound = pred.front().fail_lower_bound;
      row.prediction_applicable = pred.front().applicable;
      report.rows[si * delta_grid.size() + di] = row;
    }
  });

  // Aggregate per grid point (mean over seeds), ordered by measured L_CVI.
  std::map<double, std::pair<std::vector<double>, std::vector<double>>> agg;  // delta -> (cvi, reg)
  for (const auto& r : report.rows) {
    agg[r.delta].first.push_back(r.measured_cvi);
    agg[r.delta].second.push_back(r.registered_ratio);
  }
  std::vector<std::pair<double, double>> curve;  // (mean cvi, mean reg ratio)
  for (const auto& [delta, vals] : agg)
    curve.push_back({stats::mean(vals.first), stats::mean(vals.second)});
  std::sort(curve.begin(), curve.end());

  double steepest = 0;
  for (size_t i = 1; i < curve.size(); ++i) {
    const double drop = curve[i - 1].second - curve[i].second;
    if (drop > steepest) {
      steepest = drop;
      report.steepest_drop_cvi = 0.5 * (curve[i - 1].first + curve[i].first);
    }
  }
  report.inconclusive = steepest <= 0 || curve.size() < 2;
  report.crossing_in_band = !report.inconclusive &&
                            report.steepest_drop_cvi >= report.band_lo &&
                            report.steepest_drop_cvi <= report.band_hi;

  std::vector<double> xs, ys;
  for (const auto& r : report.rows) {
    xs.push_back(r.measured_cvi);
    ys.push_back(r.registered_ratio);
  }
  if (xs.size() >= 4) {
    report.spearman_rho = stats::spearman_rho(xs, ys);
    report.spearman_p = stats::spearman_pvalue_negative(report.spearman_rho, xs.size());
  }
  return report;
}

struct EpsilonRow {
  double epsilon = 0;
  uint64_t seed = 0;
  double final_cvi = 0;
  double registered_ratio = 0;
  long total_points = 0;
  long triangulated_keypoints = 0;
  double collapse_ratio = 0;
  double mean_ssim = 0;   // stealth vs. clean, averaged over poisoned views
  double mean_psnr = 0;
};

// Budget ablation: one full attack + reconstruction per (epsilon, seed),
// statted against the clean baseline.
inline std::vector<EpsilonRow> epsilon_sweep(const MultiViewScene& sc,
                                             const attack::AttackConfig& base_cfg,
                                             const std::vector<double>& epsilons,
                                             const std::vector<uint64_t>& seeds,
                                             const sfm::SfmConfig& sfm_base, int jobs = 1) {
  if (epsilons.empty() || seeds.empty())
    throw ValidationError("epsilon_sweep: empty grid or seed list");
  const auto clean = scene::render_all_views(sc);
  sfm::SfmConfig sfm_cfg = sfm_base;
  if (sfm_cfg.intrinsics.empty()) sfm_cfg.intrinsics = sc.intrinsics;
  const auto clean_state = sfm::run_incremental_sfm(sfm::build_pose_graph(clean, sfm_cfg),
                                                    sfm_cfg);
  std::vector<EpsilonRow> rows(epsilons.size() * seeds.size());
  detail::parallel_cells(static_cast<int>(rows.size()), jobs, [&](int cell) {
    {
      const double eps = epsilons[cell / seeds.size()];
      const uint64_t seed = seeds[cell % seeds.size()];
      attack::AttackConfig cfg = base_cfg;
      cfg.epsilon = eps;
      cfg.alpha = std::min(cfg.alpha, eps > 0 ? eps : cfg.alpha);
      cfg.seed = seed;
      const auto result = attack::pgd_attack(sc, cfg);
      const auto views = attack::apply_perturbations(clean, result.perturbations);

      EpsilonRow row;
      row.epsilon = eps;
      row.seed = seed;
      row.final_cvi = result.final_cvi;
      const auto graph = sfm::build_pose_graph(views, sfm_cfg);
      auto state = sfm::run_incremental_sfm(graph, sfm_cfg);
      state.stats = sfm::compute_stats(state, graph.num_views, &graph, &sfm_cfg,
                                       &clean_state.stats);
      row.registered_ratio = state.stats.registered_ratio;
      row.total_points = state.stats.total_points;
      row.triangulated_keypoints = state.stats.triangulated_keypoints;
      row.collapse_ratio = state.stats.collapse_ratio;
      if (!result.perturbations.poison_set.empty()) {
        for (int k : result.perturbations.poison_set) {
          row.mean_ssim += imaging::ssim(clean[k], views[k]);
          row.mean_psnr += imaging::psnr(clean[k], views[k]);
        }
        row.mean_ssim /= result.perturbations.poison_set.size();
        row.mean_psnr /= result.perturbations.poison_set.size();
      } else {
        row.mean_ssim = 1.0;
        row.mean_psnr = 99.0;
      }
      rows[cell] = row;
    }
  });
  return rows;
}

}  // namespace sfmlab::sweep
