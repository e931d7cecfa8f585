#pragma once

#include <map>
#include <optional>
#include <vector>

#include "sfmlab/core.hpp"
#include "sfmlab/imaging.hpp"
#include "sfmlab/matching.hpp"
#include "sfmlab/scene.hpp"
#include "sfmlab/stats.hpp"

namespace sfmlab::theory {

using scene::MultiViewScene;

// Empirical constants of the correspondence-collapse model. alpha_tail is the
// sub-exponential tail rate (renamed so it cannot collide with the PGD step
// size alpha).
struct TheoryConstants {
  double tau_g = 0;      // gradient-consistency bound (patch L1, 95th pct)
  double tau_d = 0;      // descriptor acceptance radius (L2, 95th pct)
  double l_min = 0;      // empirical Lipschitz band, 5th pct of the ratio
  double l_max = 0;      // 95th pct
  double beta_r = 0;     // = l_min
  double alpha_tail = 0; // fitted tail rate
  double tail_fit_r2 = 0;
  bool tail_inconclusive = false;
  double eta_min = 0.25;
  int patch_radius = 8;

  double breakdown_threshold() const { return tau_g + tau_d / beta_r; }
};

struct TheoryConfig {
  int patch_radius = 8;
  int min_tau_g_samples = 1000;
  int min_lipschitz_pairs = 500;
  int min_tau_d_matches = 50;
  double true_match_px = 2.0;  // label radius for "same 3D point"
  std::vector<double> noise_amplitudes = {2.0 / 255, 4.0 / 255, 8.0 / 255, 16.0 / 255,
                                          32.0 / 255};
  matching::MatchConfig match;
  imaging::DetectConfig detect;
  int max_keypoints = 400;
  uint64_t seed = 0;
};

namespace detail {

struct ViewData {
  ImageBuffer image;
  imaging::GradientField grad;   // raw Sobel: the consistency statistic
  imaging::GradientField fgrad;  // smoothed: what descriptors see
};

inline std::vector<ViewData> prepare_views(const std::vector<ImageBuffer>& views,
                                           const imaging::DetectConfig& detect) {
  std::vector<ViewData> out;
  out.reserve(views.size());
  for (const auto& v : views)
    out.push_back({v, imaging::sobel_gradients(v), imaging::feature_gradients(v, detect)});
  return out;
}

inline std::vector<scene::GroundTruthCorrespondence> sample_pairs(
    const MultiViewScene& sc, int min_samples, double margin, uint64_t salt) {
  std::vector<scene::GroundTruthCorrespondence> all;
  const int n = sc.num_views();
  // Adjacent pairs first, widening until the sample budget is met.
  for (int gap = 1; gap < n && static_cast<int>(all.size()) < min_samples; ++gap) {
    for (int a = 0; a + gap < n && static_cast<int>(all.size()) < min_samples; ++a) {
      const int per_patch = std::max(4, min_samples / std::max(1, (n - 1) * 4));
      auto c = scene::ground_truth_correspondences(sc, a, a + gap, per_patch, margin,
                                                   hash_combine(salt, gap));
      all.insert(all.end(), c.begin(), c.end());
    }
  }
  return all;
}

}  // namespace detail

// 95th percentile of patch-restricted gradient L1 distances over clean
// ground-truth correspondences.
inline double estimate_tau_g(const MultiViewScene& sc, const TheoryConfig& cfg = {}) {
  if (sc.num_views() < 2) throw ValidationError("estimate_tau_g: need >= 2 views");
  const auto views = detail::prepare_views(scene::render_all_views(sc), cfg.detect);
  const double margin = cfg.patch_radius + 2.0;
  const auto corrs = detail::sample_pairs(sc, cfg.min_tau_g_samples, margin,
                                          hash_combine(cfg.seed, 0x7a96u));
  if (static_cast<int>(corrs.size()) < std::min(cfg.min_tau_g_samples, 100))
    throw ValidationError("estimate_tau_g: insufficient correspondences");
  std::vector<double> dists;
  dists.reserve(corrs.size());
  for (const auto& c : corrs)
    dists.push_back(imaging::patch_gradient_l1(
        views[c.view_a].grad, static_cast<int>(std::lround(c.pixel_a.x())),
        static_cast<int>(std::lround(c.pixel_a.y())), views[c.view_b].grad,
        static_cast<int>(std::lround(c.pixel_b.x())),
        static_cast<int>(std::lround(c.pixel_b.y())), cfg.patch_radius));
  return stats::percentile(dists, 95.0);
}

// Ratio ||phi1 - phi2||_2 / ||G1 - G2||_1 over clean-clean and clean-perturbed
// patch pairs; returns (5th, 95th) percentiles.
inline std::pair<double, double> estimate_lipschitz_band(const MultiViewScene& sc,
                                                         int num_pairs,
                                                         const TheoryConfig& cfg = {}) {
  if (num_pairs < 500)
    throw ValidationError("estimate_lipschitz_band: need at least 500 pairs");
  const auto clean = scene::render_all_views(sc);
  const auto views = detail::prepare_views(clean, cfg.detect);
  const double margin = cfg.patch_radius + 2.0;
  const auto corrs = detail::sample_pairs(sc, num_pairs, margin,
                                          hash_combine(cfg.seed, 0x11b5u));
  const int r = cfg.patch_radius;

  // Perturbed copies of every view at each amplitude.
  std::vector<std::vector<detail::ViewData>> noisy;  // [amplitude][view]
  for (size_t a = 0; a < cfg.noise_amplitudes.size(); ++a) {
    std::vector<ImageBuffer> imgs = clean;
    for (size_t v = 0; v < imgs.size(); ++v) {
      Rng rng(hash_combine(cfg.seed, hash_combine(0xba5eu + a, v)));
      for (double& px : imgs[v].data)
        px = std::clamp(px + rng_uniform(rng, -cfg.noise_amplitudes[a], cfg.noise_amplitudes[a]),
                        0.0, 1.0);
    }
    noisy.push_back(detail::prepare_views(imgs, cfg.detect));
  }

  std::vector<double> ratios;
  auto add_ratio = [&](const detail::ViewData& va, const geometry::Vec2& pa,
                       const detail::ViewData& vb, const geometry::Vec2& pb) {
    const int ax = static_cast<int>(std::lround(pa.x())), ay = static_cast<int>(std::lround(pa.y()));
    const int bx = static_cast<int>(std::lround(pb.x())), by = static_cast<int>(std::lround(pb.y()));
    const double denom = imaging::patch_gradient_l1(va.grad, ax, ay, vb.grad, bx, by, r);
    if (denom <= 1e-6) return;  // identical patches carry no ratio information
    const auto da = imaging::extract_descriptor(va.fgrad, {static_cast<double>(ax),
                                                           static_cast<double>(ay), 0, r});
    const auto db = imaging::extract_descriptor(vb.fgrad, {static_cast<double>(bx),
                                                           static_cast<double>(by), 0, r});
    ratios.push_back(da.distance(db) / denom);
  };

  size_t used = 0;
  for (const auto& c : corrs) {
    if (static_cast<int>(ratios.size()) >= num_pairs) break;
    add_ratio(views[c.view_a], c.pixel_a, views[c.view_b], c.pixel_b);
    const size_t amp = used++ % cfg.noise_amplitudes.size();
    add_ratio(views[c.view_a], c.pixel_a, noisy[amp][c.view_b], c.pixel_b);
  }
  if (ratios.size() < 50)
    throw ValidationError("estimate_lipschitz_band: degenerate sampling, all denominators ~0");
  return {stats::percentile(ratios, 5.0), stats::percentile(ratios, 95.0)};
}

struct TauDEstimate {
  double tau_d = 0;
  int accepted_true_matches = 0;
  double median_rejected_distance = 0;
};

// Empirical acceptance radius: 95th percentile descriptor distance among true
// correspondences accepted by the full matcher (ratio + mutual + RANSAC).
inline TauDEstimate estimate_tau_d(const MultiViewScene& sc, const TheoryConfig& cfg = {}) {
  const auto clean = scene::render_all_views(sc);
  std::vector<std::vector<imaging::Keypoint>> kps(clean.size());
  std::vector<std::vector<imaging::Descriptor>> descs(clean.size());
  for (size_t v = 0; v < clean.size(); ++v) {
    kps[v] = imaging::detect_keypoints(clean[v], cfg.max_keypoints, cfg.detect);
    const auto grad = imaging::feature_gradients(clean[v], cfg.detect);
    for (const auto& kp : kps[v]) descs[v].push_back(imaging::extract_descriptor(grad, kp));
  }

  // A match is "true" when the ray-cast hit of kp_a reprojects onto kp_b.
  auto is_true_match = [&](int va, const imaging::Keypoint& ka, int vb,
                           const imaging::Keypoint& kb) {
    const auto hit = scene::trace_pixel(sc, va, ka.x, ka.y);
    if (hit.patch_index < 0) return false;
    const geometry::Vec3 X = sc.patches[hit.patch_index].point(hit.u, hit.v);
    try {
      const auto proj = geometry::project(sc.intrinsics[vb], sc.poses[vb], X);
      return (proj - geometry::Vec2(kb.x, kb.y)).norm() <= cfg.true_match_px;
    } catch (const geometry::GeometryError&) {
      return false;
    }
  };

  std::vector<double> accepted_true, rejected;
  for (int a = 0; a + 1 < sc.num_views(); ++a) {
    const int b = a + 1;
    auto candidates = matching::match_descriptors(descs[a], descs[b],
                                                  cfg.match.ratio_threshold);
    auto edge = matching::verify_ransac(candidates, kps[a], kps[b], cfg.match,
                                        hash_combine(cfg.seed, 0xd15cu + a));
    std::vector<bool> inlier(candidates.size(), false);
    if (edge.accepted) {
      for (const auto& m : edge.inliers)
        for (size_t ci = 0; ci < candidates.size(); ++ci)
          if (candidates[ci].kp_a == m.kp_a && candidates[ci].kp_b == m.kp_b)
            inlier[ci] = true;
    }
    for (size_t ci = 0; ci < candidates.size(); ++ci) {
      const auto& m = candidates[ci];
      const bool truth = is_true_match(a, kps[a][m.kp_a], b, kps[b][m.kp_b]);
      if (inlier[ci] && truth)
        accepted_true.push_back(m.descriptor_distance);
      else if (!inlier[ci])
        rejected.push_back(m.descriptor_distance);
    }
  }
  if (static_cast<int>(accepted_true.size()) < cfg.min_tau_d_matches)
    throw ValidationError("estimate_tau_d: insufficient accepted true matches");
  TauDEstimate est;
  est.tau_d = stats::percentile(accepted_true, 95.0);
  est.accepted_true_matches = static_cast<int>(accepted_true.size());
  est.median_rejected_distance = rejected.empty() ? 0 : stats::percentile(rejected, 50.0);
  return est;
}

struct TailFit {
  double alpha_tail = 0;
  double r_squared = 0;
  bool inconclusive = false;
};

// Least-squares fit of log Pr[distance < tau_d] against beta_r * delta.
// Samples are (delta, descriptor distance) pairs grouped by delta level.
inline TailFit fit_tail_rate(const std::vector<std::pair<double, double>>& samples,
                             double tau_d, double beta_r) {
  if (samples.size() < 200)
    throw ValidationError("fit_tail_rate: need at least 200 samples");
  std::map<double, std::pair<int, int>> buckets;  // delta -> (below tau_d, total)
  for (const auto& [delta, dist] : samples) {
    auto& b = buckets[delta];
    b.first += dist < tau_d ? 1 : 0;
    b.second += 1;
  }
  std::vector<double> xs, ys;
  for (const auto& [delta, counts] : buckets) {
    const double p = static_cast<double>(counts.first) / counts.second;
    if (p <= 0 || p >= 1) continue;  // non-identifiable in log space
    xs.push_back(beta_r * delta);
    ys.push_back(std::log(p));
  }
  TailFit fit;
  if (xs.size() < 2) {
    fit.inconclusive = true;
    return fit;
  }
  const auto line = stats::fit_line(xs, ys);
  fit.alpha_tail = -line.slope;
  fit.r_squared = line.r_squared;
  return fit;
}

// Full estimation pass on a clean scene: tau_g, Lipschitz band, tau_d, and the
// tail rate measured from noise-perturbed descriptor deviations.
inline TheoryConstants estimate_constants(const MultiViewScene& sc, const TheoryConfig& cfg = {}) {
  TheoryConstants k;
  k.patch_radius = cfg.patch_radius;
  k.eta_min = cfg.match.eta_min;
  k.tau_g = estimate_tau_g(sc, cfg);
  std::tie(k.l_min, k.l_max) = estimate_lipschitz_band(sc, cfg.min_lipschitz_pairs, cfg);
  k.beta_r = k.l_min;
  k.tau_d = estimate_tau_d(sc, cfg).tau_d;

  // Tail-rate samples: descriptor deviation vs. measured gradient excess at
  // several noise amplitudes.
  const auto clean = scene::render_all_views(sc);
  const auto views = detail::prepare_views(clean, cfg.detect);
  const double margin = cfg.patch_radius + 2.0;
  const auto corrs = detail::sample_pairs(sc, 400, margin, hash_combine(cfg.seed, 0x7a11u));
  std::vector<std::pair<double, double>> samples;
  for (size_t a = 0; a < cfg.noise_amplitudes.size(); ++a) {
    std::vector<ImageBuffer> imgs = clean;
    for (size_t v = 0; v < imgs.size(); ++v) {
      Rng rng(hash_combine(cfg.seed, hash_combine(0x7a11f00dull + a, v)));
      for (double& px : imgs[v].data)
        px = std::clamp(px + rng_uniform(rng, -cfg.noise_amplitudes[a], cfg.noise_amplitudes[a]),
                        0.0, 1.0);
    }
    const auto noisy = detail::prepare_views(imgs, cfg.detect);
    // One delta level per amplitude: the bucket's mean gradient excess.
    std::vector<double> excess;
    std::vector<double> dists;
    for (const auto& c : corrs) {
      const int ax = static_cast<int>(std::lround(c.pixel_a.x()));
      const int ay = static_cast<int>(std::lround(c.pixel_a.y()));
      const int bx = static_cast<int>(std::lround(c.pixel_b.x()));
      const int by = static_cast<int>(std::lround(c.pixel_b.y()));
      const double lcvi = imaging::patch_gradient_l1(views[c.view_a].grad, ax, ay,
                                                     noisy[c.view_b].grad, bx, by,
                                                     cfg.patch_radius);
      excess.push_back(std::max(0.0, lcvi - k.tau_g));
      const auto da = imaging::extract_descriptor(
          views[c.view_a].fgrad, {static_cast<double>(ax), static_cast<double>(ay), 0,
                                  cfg.patch_radius});
      const auto db = imaging::extract_descriptor(
          noisy[c.view_b].fgrad, {static_cast<double>(bx), static_cast<double>(by), 0,
                                  cfg.patch_radius});
      dists.push_back(da.distance(db));
    }
    const double delta_level = stats::mean(excess);
    for (double d : dists) samples.push_back({delta_level, d});
  }
  const auto fit = fit_tail_rate(samples, k.tau_d, k.beta_r);
  k.alpha_tail = fit.alpha_tail;
  k.tail_fit_r2 = fit.r_squared;
  k.tail_inconclusive = fit.inconclusive;
  return k;
}

struct BreakdownPrediction {
  double delta = 0;
  double p_match = 0;
  double epsilon_c = 0;
  double fail_lower_bound = 0;
  bool applicable = false;  // false: p_match >= eta_min, no failure pressure
};

// Closed-form breakdown bound on a delta grid. The concentration margin is
// chosen as epsilon_c = 1 - 0.99 * p_match / eta_min, the smallest value that
// satisfies the side condition (1 - epsilon_c) * p_match < eta_min with a 1%
// margin; points with p_match >= eta_min are marked inapplicable.
inline std::vector<BreakdownPrediction> predict_breakdown(const TheoryConstants& k, int m,
                                                          int keypoints_per_view,
                                                          const std::vector<double>& delta_grid) {
  if (m < 1 || keypoints_per_view < 1)
    throw ValidationError("predict_breakdown: need m >= 1 and N >= 1");
  std::vector<BreakdownPrediction> out;
  for (double delta : delta_grid) {
    BreakdownPrediction p;
    p.delta = delta;
    p.p_match = std::exp(-k.alpha_tail * k.beta_r * delta);
    if (p.p_match >= k.eta_min) {
      out.push_back(p);
      continue;
    }
    p.applicable = true;
    p.epsilon_c = std::clamp(1.0 - 0.99 * p.p_match / k.eta_min, 0.0, 1.0);
    const double exponent = -0.5 * p.epsilon_c * p.epsilon_c * keypoints_per_view * p.p_match;
    p.fail_lower_bound = std::clamp(1.0 - m * std::exp(exponent), 0.0, 1.0);
    out.push_back(p);
  }
  return out;
}

}  // namespace sfmlab::theory
