#pragma once

#include <algorithm>
#include <vector>

#include "sfmlab/core.hpp"
#include "sfmlab/geometry.hpp"
#include "sfmlab/imaging.hpp"

namespace sfmlab::matching {

using geometry::FundamentalMatrix;
using geometry::Vec2;
using imaging::Descriptor;
using imaging::Keypoint;

struct MatchCandidate {
  int kp_a = -1;
  int kp_b = -1;
  double descriptor_distance = 0;
  double ratio = 1;
};

struct MatchConfig {
  double ratio_threshold = 0.8;
  double sampson_threshold_px = 2.0;
  int ransac_max_iters = 2000;
  double ransac_confidence = 0.99;
  double eta_min = 0.25;  // minimum inlier ratio for accepting an edge
};

// Nearest neighbor with Lowe's ratio test and mutual check; exhaustive L2
// search, ties broken by lower index. Empty when either side has < 2
// descriptors (ratio undefined).
inline std::vector<MatchCandidate> match_descriptors(const std::vector<Descriptor>& desc_a,
                                                     const std::vector<Descriptor>& desc_b,
                                                     double ratio_threshold = 0.8) {
  if (ratio_threshold <= 0 || ratio_threshold >= 1)
    throw ValidationError("match_descriptors: ratio threshold must be in (0,1)");
  std::vector<MatchCandidate> out;
  if (desc_a.size() < 2 || desc_b.size() < 2) return out;

  // Precompute b's nearest neighbor in a for the mutual check.
  std::vector<int> b_nn(desc_b.size(), -1);
  for (size_t j = 0; j < desc_b.size(); ++j) {
    double best = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < desc_a.size(); ++i) {
      const double d = desc_b[j].distance(desc_a[i]);
      if (d < best) {
        best = d;
        b_nn[j] = static_cast<int>(i);
      }
    }
  }

  for (size_t i = 0; i < desc_a.size(); ++i) {
    int nn1 = -1;
    double d1 = std::numeric_limits<double>::infinity(), d2 = d1;
    for (size_t j = 0; j < desc_b.size(); ++j) {
      const double d = desc_a[i].distance(desc_b[j]);
      if (d < d1) {
        d2 = d1;
        d1 = d;
        nn1 = static_cast<int>(j);
      } else if (d < d2) {
        d2 = d;
      }
    }
    const double ratio = d2 > 0 ? d1 / d2 : 1.0;
    if (ratio >= ratio_threshold) continue;
    if (b_nn[nn1] != static_cast<int>(i)) continue;
    out.push_back({static_cast<int>(i), nn1, d1, ratio});
  }
  return out;
}

struct VerifiedEdge {
  int view_a = -1;
  int view_b = -1;
  std::vector<MatchCandidate> inliers;
  FundamentalMatrix F;
  double eta = 0;           // |inliers| / candidate_count
  int candidate_count = 0;
  bool accepted = false;    // false: the edge-failure event
  std::string failure;      // human-readable reason when not accepted
};

// RANSAC over the eight-point solver with Sampson residuals, adaptive
// iteration count at the configured confidence, final refit on all inliers.
// Deterministic under a fixed seed.
inline VerifiedEdge verify_ransac(const std::vector<MatchCandidate>& candidates,
                                  const std::vector<Keypoint>& kps_a,
                                  const std::vector<Keypoint>& kps_b,
                                  const MatchConfig& cfg, uint64_t seed) {
  VerifiedEdge edge;
  edge.candidate_count = static_cast<int>(candidates.size());
  if (candidates.size() < 8) {
    edge.failure = "insufficient candidates";
    return edge;
  }
  Rng rng(seed);
  const int n = static_cast<int>(candidates.size());
  auto pix = [&](const MatchCandidate& m) {
    return geometry::PixelPair{Vec2(kps_a[m.kp_a].x, kps_a[m.kp_a].y),
                               Vec2(kps_b[m.kp_b].x, kps_b[m.kp_b].y)};
  };
  const double thresh_sq = cfg.sampson_threshold_px * cfg.sampson_threshold_px;

  auto count_inliers = [&](const FundamentalMatrix& F, std::vector<int>* idx) {
    int count = 0;
    for (int i = 0; i < n; ++i) {
      const auto p = pix(candidates[i]);
      if (geometry::sampson_distance(F, p.a, p.b) <= thresh_sq) {
        ++count;
        if (idx) idx->push_back(i);
      }
    }
    return count;
  };

  int best_count = -1;
  FundamentalMatrix best_F;
  int max_iters = cfg.ransac_max_iters;
  for (int iter = 0; iter < max_iters; ++iter) {
    // Sample 8 distinct candidates.
    std::array<int, 8> sample{};
    for (int k = 0; k < 8; ++k) {
      bool fresh;
      do {
        sample[k] = static_cast<int>(rng_index(rng, n));
        fresh = true;
        for (int j = 0; j < k; ++j)
          if (sample[j] == sample[k]) fresh = false;
      } while (!fresh);
    }
    std::vector<geometry::PixelPair> pts;
    pts.reserve(8);
    for (int s : sample) pts.push_back(pix(candidates[s]));
    FundamentalMatrix F;
    try {
      F = geometry::estimate_fundamental_8pt(pts);
    } catch (const geometry::GeometryError&) {
      continue;
    }
    const int count = count_inliers(F, nullptr);
    if (count > best_count) {
      best_count = count;
      best_F = F;
      // Adaptive cap: stop once the no-outlier-sample probability is low.
      const double w = static_cast<double>(count) / n;
      const double p_good = std::pow(w, 8);
      if (p_good > 1e-12) {
        const int needed = static_cast<int>(
            std::ceil(std::log(1 - cfg.ransac_confidence) / std::log(1 - p_good)));
        max_iters = std::min(max_iters, std::max(iter + 1, needed));
      }
    }
  }

  if (best_count < 8) {
    edge.failure = "no model with 8 inliers";
    return edge;
  }
  // Refit on all inliers of the best model, then recount.
  std::vector<int> idx;
  count_inliers(best_F, &idx);
  std::vector<geometry::PixelPair> inlier_pts;
  inlier_pts.reserve(idx.size());
  for (int i : idx) inlier_pts.push_back(pix(candidates[i]));
  try {
    const FundamentalMatrix refit = geometry::estimate_fundamental_8pt(inlier_pts);
    std::vector<int> idx2;
    const int count2 = count_inliers(refit, &idx2);
    if (count2 >= best_count) {
      best_F = refit;
      idx = std::move(idx2);
      best_count = count2;
    }
  } catch (const geometry::GeometryError&) {
    // keep the sampled model
  }

  edge.F = best_F;
  for (int i : idx) edge.inliers.push_back(candidates[i]);
  edge.eta = static_cast<double>(best_count) / n;
  if (edge.eta < cfg.eta_min) {
    edge.failure = "inlier ratio below eta_min";
    return edge;
  }
  edge.accepted = true;
  return edge;
}

}  // namespace sfmlab::matching
