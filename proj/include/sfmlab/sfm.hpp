#pragma once

#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <vector>

#include "sfmlab/core.hpp"
#include "sfmlab/geometry.hpp"
#include "sfmlab/imaging.hpp"
#include "sfmlab/matching.hpp"

namespace sfmlab::sfm {

using geometry::CameraIntrinsics;
using geometry::CameraPose;
using geometry::Mat3;
using geometry::Vec2;
using geometry::Vec3;

struct SfmConfig {
  imaging::DetectConfig detect;
  matching::MatchConfig match;
  int max_keypoints = 400;
  int pair_window = 30;            // all pairs when N <= window, else banded
  double point_accept_px = 4.0;    // track acceptance reprojection threshold
  double min_triangulation_deg = 1.0;
  double huber_delta_px = 2.0;
  int ba_max_iters = 50;
  double ba_rel_tol = 1e-8;
  int ba_every = 3;                // bundle adjust every k registrations
  int min_pnp_correspondences = 6;
  uint64_t seed = 0;
  std::vector<CameraIntrinsics> intrinsics;  // known per-view intrinsics
};

struct ViewFeatures {
  std::vector<imaging::Keypoint> keypoints;
  std::vector<imaging::Descriptor> descriptors;
};

struct PoseGraph {
  int num_views = 0;
  std::vector<ViewFeatures> features;
  std::vector<matching::VerifiedEdge> edges;  // all attempted pairs, accepted or failed

  int accepted_edge_count() const {
    int n = 0;
    for (const auto& e : edges) n += e.accepted ? 1 : 0;
    return n;
  }
};

struct TrackPoint {
  Vec3 X = Vec3::Zero();
  std::vector<std::pair<int, int>> observations;  // (view, keypoint index)
  bool valid = true;  // invalidated points keep their slot until compaction
};

struct SfmStats {
  double registered_ratio = 0;
  long triangulated_keypoints = 0;  // observations attached to 3D points
  long total_points = 0;
  double mean_reprojection_px = 0;
  double collapse_ratio = 0;
  int num_views = 0;
  int registered_views = 0;
};

struct ReconstructionState {
  std::map<int, CameraPose> registered;
  std::vector<TrackPoint> points;
  SfmStats stats;
  std::vector<std::pair<int, int>> critical_edges;  // spanning tree of registration order
  bool no_valid_initial_pair = false;
  bool ba_diverged = false;
};

// Detect, describe, match and verify all view pairs (banded for large N).
// Failed verifications stay in the edge list as edge-failure events.
inline PoseGraph build_pose_graph(const std::vector<ImageBuffer>& views, const SfmConfig& cfg) {
  if (views.size() < 2) throw ValidationError("build_pose_graph: need at least 2 views");
  PoseGraph graph;
  graph.num_views = static_cast<int>(views.size());
  graph.features.resize(views.size());
  for (size_t v = 0; v < views.size(); ++v) {
    auto& feat = graph.features[v];
    feat.keypoints = imaging::detect_keypoints(views[v], cfg.max_keypoints, cfg.detect);
    const auto grad = imaging::feature_gradients(views[v], cfg.detect);
    feat.descriptors.reserve(feat.keypoints.size());
    for (const auto& kp : feat.keypoints)
      feat.descriptors.push_back(imaging::extract_descriptor(grad, kp));
  }
  const int n = graph.num_views;
  for (int a = 0; a < n; ++a) {
    for (int b = a + 1; b < n; ++b) {
      if (n > cfg.pair_window && b - a > cfg.pair_window) continue;
      auto candidates = matching::match_descriptors(graph.features[a].descriptors,
                                                    graph.features[b].descriptors,
                                                    cfg.match.ratio_threshold);
      const uint64_t pair_seed = hash_combine(
          cfg.seed, hash_combine(static_cast<uint64_t>(a) + 1, static_cast<uint64_t>(b) + 1));
      auto edge = matching::verify_ransac(candidates, graph.features[a].keypoints,
                                          graph.features[b].keypoints, cfg.match, pair_seed);
      edge.view_a = a;
      edge.view_b = b;
      graph.edges.push_back(std::move(edge));
    }
  }
  return graph;
}

namespace detail {

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(int a, int b) { parent[find(a)] = find(b); }
};

// Feature tracks from edge inliers; tracks observing one view twice are
// dropped as inconsistent.
inline std::vector<std::vector<std::pair<int, int>>> build_tracks(const PoseGraph& graph) {
  std::vector<int> offset(graph.num_views + 1, 0);
  for (int v = 0; v < graph.num_views; ++v)
    offset[v + 1] = offset[v] + static_cast<int>(graph.features[v].keypoints.size());
  UnionFind uf(offset.back());
  for (const auto& e : graph.edges) {
    if (!e.accepted) continue;
    for (const auto& m : e.inliers)
      uf.unite(offset[e.view_a] + m.kp_a, offset[e.view_b] + m.kp_b);
  }
  std::map<int, std::vector<std::pair<int, int>>> by_root;
  for (int v = 0; v < graph.num_views; ++v)
    for (size_t k = 0; k < graph.features[v].keypoints.size(); ++k)
      by_root[uf.find(offset[v] + static_cast<int>(k))].push_back({v, static_cast<int>(k)});
  std::vector<std::vector<std::pair<int, int>>> tracks;
  for (auto& [root, obs] : by_root) {
    if (obs.size() < 2) continue;
    std::set<int> views;
    bool consistent = true;
    for (const auto& [v, k] : obs)
      if (!views.insert(v).second) {
        consistent = false;
        break;
      }
    if (consistent) tracks.push_back(std::move(obs));
  }
  return tracks;
}

inline Vec2 kp_pixel(const PoseGraph& graph, int view, int kp) {
  const auto& p = graph.features[view].keypoints[kp];
  return {p.x, p.y};
}

// DLT camera resection from >= 6 2D-3D correspondences with known intrinsics,
// followed by LM refinement of the 6-dof pose.
inline std::optional<CameraPose> pnp_dlt(const CameraIntrinsics& K,
                                         const std::vector<Vec3>& X,
                                         const std::vector<Vec2>& px) {
  const int n = static_cast<int>(X.size());
  if (n < 6) return std::nullopt;
  Eigen::MatrixXd A(2 * n, 12);
  for (int i = 0; i < n; ++i) {
    const Vec2 x = K.normalize(px[i]);
    const Vec3& P = X[i];
    A.row(2 * i) << P.x(), P.y(), P.z(), 1, 0, 0, 0, 0, -x.x() * P.x(), -x.x() * P.y(),
        -x.x() * P.z(), -x.x();
    A.row(2 * i + 1) << 0, 0, 0, 0, P.x(), P.y(), P.z(), 1, -x.y() * P.x(), -x.y() * P.y(),
        -x.y() * P.z(), -x.y();
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeThinV);
  Eigen::VectorXd p = svd.matrixV().col(11);
  Eigen::Matrix<double, 3, 4> P;
  P << p(0), p(1), p(2), p(3), p(4), p(5), p(6), p(7), p(8), p(9), p(10), p(11);
  Mat3 M = P.leftCols<3>();
  // Orthogonalize and resolve the sign so depths come out positive.
  Eigen::JacobiSVD<Mat3> msvd(M, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 R = msvd.matrixU() * msvd.matrixV().transpose();
  double scale = msvd.singularValues().mean();
  if (R.determinant() < 0) {
    R = -R;
    scale = -scale;
  }
  if (std::abs(scale) < 1e-15) return std::nullopt;
  Vec3 t = P.col(3) / scale;
  CameraPose pose{R, t};
  int pos = 0;
  for (const Vec3& Xi : X) pos += pose.to_camera(Xi).z() > 0 ? 1 : 0;
  if (pos < n - pos) {
    pose.R = -pose.R;  // not a rotation; re-orthogonalize via the flipped scale
    pose.t = -pose.t;
    Eigen::JacobiSVD<Mat3> s2(pose.R, Eigen::ComputeFullU | Eigen::ComputeFullV);
    pose.R = s2.matrixU() * s2.matrixV().transpose();
    if (pose.R.determinant() < 0) return std::nullopt;
  }
  return pose;
}

// LM over (axis-angle increment, translation) for a single camera.
inline void refine_pose(const CameraIntrinsics& K, CameraPose& pose,
                        const std::vector<Vec3>& X, const std::vector<Vec2>& px,
                        int iters = 20) {
  const int n = static_cast<int>(X.size());
  double lambda = 1e-3;
  auto cost_of = [&](const CameraPose& p) {
    double c = 0;
    for (int i = 0; i < n; ++i) {
      const Vec3 Xc = p.to_camera(X[i]);
      if (Xc.z() <= 1e-9) return std::numeric_limits<double>::infinity();
      const Vec2 proj(K.fx * Xc.x() / Xc.z() + K.cx, K.fy * Xc.y() / Xc.z() + K.cy);
      c += (proj - px[i]).squaredNorm();
    }
    return c;
  };
  double cost = cost_of(pose);
  for (int it = 0; it < iters; ++it) {
    Eigen::Matrix<double, 6, 6> H = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> b = Eigen::Matrix<double, 6, 1>::Zero();
    for (int i = 0; i < n; ++i) {
      const Vec3 Xc = pose.to_camera(X[i]);
      if (Xc.z() <= 1e-9) continue;
      const double iz = 1.0 / Xc.z();
      const Vec2 proj(K.fx * Xc.x() * iz + K.cx, K.fy * Xc.y() * iz + K.cy);
      const Vec2 r = proj - px[i];
      Eigen::Matrix<double, 2, 3> dpix;
      dpix << K.fx * iz, 0, -K.fx * Xc.x() * iz * iz, 0, K.fy * iz, -K.fy * Xc.y() * iz * iz;
      Eigen::Matrix<double, 2, 6> J;
      J.leftCols<3>() = -dpix * geometry::cross_matrix(Xc);  // rotation increment
      J.rightCols<3>() = dpix;                               // translation
      H += J.transpose() * J;
      b -= J.transpose() * r;
    }
    Eigen::Matrix<double, 6, 6> Hd = H;
    Hd.diagonal() *= (1 + lambda);
    Hd.diagonal().array() += 1e-12;
    const Eigen::Matrix<double, 6, 1> delta = Hd.ldlt().solve(b);
    CameraPose trial{geometry::rotation_from_axis_angle(delta.head<3>()) * pose.R,
                     pose.t + delta.tail<3>()};
    const double trial_cost = cost_of(trial);
    if (trial_cost < cost) {
      pose = trial;
      if (cost - trial_cost < 1e-12 * (1 + cost)) break;
      cost = trial_cost;
      lambda = std::max(lambda / 3, 1e-9);
    } else {
      lambda *= 10;
      if (lambda > 1e6) break;
    }
  }
}

}  // namespace detail

// Robust bundle adjustment: LM with Huber-weighted reprojection residuals,
// axis-angle increments, first registered camera held fixed, Schur complement
// over the point blocks.
inline void bundle_adjust(ReconstructionState& state, const PoseGraph& graph,
                          const SfmConfig& cfg) {
  if (state.registered.size() < 2 || state.points.size() < 8) return;

  std::vector<int> cam_views;
  for (const auto& [v, pose] : state.registered) cam_views.push_back(v);
  std::map<int, int> cam_index;
  for (size_t i = 0; i < cam_views.size(); ++i) cam_index[cam_views[i]] = static_cast<int>(i);
  const int C = static_cast<int>(cam_views.size());
  const int P = static_cast<int>(state.points.size());
  const int cam_params = (C - 1) * 6;  // first camera fixed (gauge)

  const double delta = cfg.huber_delta_px;
  auto rho = [&](double s) {  // s = squared residual norm
    return s <= delta * delta ? s : 2 * delta * std::sqrt(s) - delta * delta;
  };

  auto total_cost = [&](const std::vector<CameraPose>& poses,
                        const std::vector<Vec3>& pts) {
    double c = 0;
    for (int j = 0; j < P; ++j) {
      if (!state.points[j].valid) continue;
      for (const auto& [v, k] : state.points[j].observations) {
        auto it = cam_index.find(v);
        if (it == cam_index.end()) continue;
        const CameraPose& pose = poses[it->second];
        const CameraIntrinsics& K = cfg.intrinsics[v];
        const Vec3 Xc = pose.to_camera(pts[j]);
        if (Xc.z() <= 1e-9) {
          c += 1e6;
          continue;
        }
        const Vec2 proj(K.fx * Xc.x() / Xc.z() + K.cx, K.fy * Xc.y() / Xc.z() + K.cy);
        c += rho((proj - detail::kp_pixel(graph, v, k)).squaredNorm());
      }
    }
    return c;
  };

  std::vector<CameraPose> poses;
  for (int v : cam_views) poses.push_back(state.registered[v]);
  std::vector<Vec3> pts;
  for (const auto& tp : state.points) pts.push_back(tp.X);

  double cost = total_cost(poses, pts);
  double lambda = 1e-4;
  int bad_streak = 0;

  for (int iter = 0; iter < cfg.ba_max_iters; ++iter) {
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(cam_params, cam_params);
    Eigen::VectorXd bc = Eigen::VectorXd::Zero(cam_params);
    std::vector<Mat3> D(P, Mat3::Zero());
    std::vector<Vec3> bp(P, Vec3::Zero());
    // Per point: list of (camera slot, 6x3 cross term W = Jc^T Jp).
    std::vector<std::vector<std::pair<int, Eigen::Matrix<double, 6, 3>>>> cross(P);

    for (int j = 0; j < P; ++j) {
      if (!state.points[j].valid) continue;
      for (const auto& [v, k] : state.points[j].observations) {
        auto it = cam_index.find(v);
        if (it == cam_index.end()) continue;
        const int ci = it->second;
        const CameraPose& pose = poses[ci];
        const CameraIntrinsics& K = cfg.intrinsics[v];
        const Vec3 Xc = pose.to_camera(pts[j]);
        if (Xc.z() <= 1e-9) continue;
        const double iz = 1.0 / Xc.z();
        const Vec2 proj(K.fx * Xc.x() * iz + K.cx, K.fy * Xc.y() * iz + K.cy);
        Vec2 r = proj - detail::kp_pixel(graph, v, k);
        // Huber IRLS weight, applied as sqrt(w) scaling of residual/Jacobian.
        const double rn = r.norm();
        const double w = rn <= delta ? 1.0 : delta / rn;
        const double sw = std::sqrt(w);
        Eigen::Matrix<double, 2, 3> dpix;
        dpix << K.fx * iz, 0, -K.fx * Xc.x() * iz * iz, 0, K.fy * iz, -K.fy * Xc.y() * iz * iz;
        Eigen::Matrix<double, 2, 3> Jp = sw * dpix * pose.R;
        r *= sw;
        D[j] += Jp.transpose() * Jp;
        bp[j] -= Jp.transpose() * r;
        if (ci > 0) {
          Eigen::Matrix<double, 2, 6> Jc;
          Jc.leftCols<3>() = -sw * dpix * geometry::cross_matrix(Xc);
          Jc.rightCols<3>() = sw * dpix;
          const int base = (ci - 1) * 6;
          A.block<6, 6>(base, base) += Jc.transpose() * Jc;
          bc.segment<6>(base) -= Jc.transpose() * r;
          cross[j].push_back({ci, Jc.transpose() * Jp});
        }
      }
    }

    // Damp and invert point blocks, form the reduced camera system.
    Eigen::MatrixXd S = A;
    Eigen::VectorXd rhs = bc;
    for (int i = 0; i < cam_params; ++i) S(i, i) *= (1 + lambda);
    S.diagonal().array() += 1e-12;
    std::vector<Mat3> Dinv(P, Mat3::Zero());
    for (int j = 0; j < P; ++j) {
      if (!state.points[j].valid) continue;
      Mat3 Dj = D[j];
      Dj.diagonal() *= (1 + lambda);
      Dj.diagonal().array() += 1e-12;
      Dinv[j] = Dj.inverse();
      for (const auto& [ci, W] : cross[j]) {
        rhs.segment<6>((ci - 1) * 6) -= W * Dinv[j] * bp[j];
        for (const auto& [ck, Wk] : cross[j])
          S.block<6, 6>((ci - 1) * 6, (ck - 1) * 6) -= W * Dinv[j] * Wk.transpose();
      }
    }
    const Eigen::VectorXd dc = S.ldlt().solve(rhs);

    std::vector<CameraPose> trial_poses = poses;
    for (int ci = 1; ci < C; ++ci) {
      const auto d = dc.segment<6>((ci - 1) * 6);
      trial_poses[ci].R = geometry::rotation_from_axis_angle(d.head<3>()) * poses[ci].R;
      trial_poses[ci].t = poses[ci].t + d.tail<3>();
    }
    std::vector<Vec3> trial_pts = pts;
    for (int j = 0; j < P; ++j) {
      if (!state.points[j].valid) continue;
      Vec3 back = bp[j];
      for (const auto& [ci, W] : cross[j]) back -= W.transpose() * dc.segment<6>((ci - 1) * 6);
      trial_pts[j] = pts[j] + Dinv[j] * back;
    }

    const double trial_cost = total_cost(trial_poses, trial_pts);
    if (trial_cost < cost) {
      const double rel = (cost - trial_cost) / std::max(cost, 1e-30);
      poses = std::move(trial_poses);
      pts = std::move(trial_pts);
      cost = trial_cost;
      lambda = std::max(lambda / 3, 1e-10);
      bad_streak = 0;
      if (rel < cfg.ba_rel_tol) break;
    } else {
      lambda *= 10;
      if (++bad_streak >= 5) {
        state.ba_diverged = true;
        break;
      }
    }
  }

  for (int i = 0; i < C; ++i) state.registered[cam_views[i]] = poses[i];
  for (int j = 0; j < P; ++j) state.points[j].X = pts[j];
}

inline double mean_reprojection(const ReconstructionState& state, const PoseGraph& graph,
                                const SfmConfig& cfg) {
  double sum = 0;
  long count = 0;
  for (const auto& tp : state.points) {
    if (!tp.valid) continue;
    for (const auto& [v, k] : tp.observations) {
      auto it = state.registered.find(v);
      if (it == state.registered.end()) continue;
      try {
        const Vec2 proj = geometry::project(cfg.intrinsics[v], it->second, tp.X);
        sum += (proj - detail::kp_pixel(graph, v, k)).norm();
        ++count;
      } catch (const geometry::GeometryError&) {
        sum += 1e3;
        ++count;
      }
    }
  }
  return count > 0 ? sum / count : 0.0;
}

// Drop observations (and points) that no longer reproject within the
// acceptance threshold in registered views.
inline void filter_points(ReconstructionState& state, const PoseGraph& graph,
                          const SfmConfig& cfg) {
  for (auto& tp : state.points) {
    if (!tp.valid) continue;
    bool ok = true;
    int reg_obs = 0;
    for (const auto& [v, k] : tp.observations) {
      auto it = state.registered.find(v);
      if (it == state.registered.end()) continue;
      ++reg_obs;
      try {
        const Vec2 proj = geometry::project(cfg.intrinsics[v], it->second, tp.X);
        if ((proj - detail::kp_pixel(graph, v, k)).norm() > cfg.point_accept_px) ok = false;
      } catch (const geometry::GeometryError&) {
        ok = false;
      }
      if (!ok) break;
    }
    if (!ok || reg_obs < 2) tp.valid = false;
  }
}

inline SfmStats compute_stats(const ReconstructionState& state, int num_views,
                              const PoseGraph* graph = nullptr, const SfmConfig* cfg = nullptr,
                              const SfmStats* clean_baseline = nullptr) {
  SfmStats s;
  s.num_views = num_views;
  s.registered_views = static_cast<int>(state.registered.size());
  s.registered_ratio = num_views > 0 ? static_cast<double>(s.registered_views) / num_views : 0;
  s.total_points = 0;
  for (const auto& tp : state.points) {
    if (!tp.valid) continue;
    ++s.total_points;
    for (const auto& [v, k] : tp.observations)
      if (state.registered.count(v)) ++s.triangulated_keypoints;
  }
  if (graph && cfg) s.mean_reprojection_px = mean_reprojection(state, *graph, *cfg);
  if (clean_baseline) {
    auto ratio = [](double poisoned, double clean) {
      if (clean <= 0) return 1.0;
      return std::clamp(poisoned / clean, 0.0, 1.0);
    };
    const double r1 = ratio(s.registered_ratio, clean_baseline->registered_ratio);
    const double r2 = ratio(static_cast<double>(s.triangulated_keypoints),
                            static_cast<double>(clean_baseline->triangulated_keypoints));
    const double r3 = ratio(static_cast<double>(s.total_points),
                            static_cast<double>(clean_baseline->total_points));
    s.collapse_ratio = 1.0 - (r1 + r2 + r3) / 3.0;
  }
  return s;
}

// Incremental reconstruction: best verified pair seeds the map, remaining
// views are resected by DLT-PnP with most-2D-3D-first ordering, periodic and
// final bundle adjustment.
inline ReconstructionState run_incremental_sfm(const PoseGraph& graph, const SfmConfig& cfg) {
  ReconstructionState state;
  const auto tracks = detail::build_tracks(graph);

  // Initial pair: maximize inlier count x median triangulation angle.
  int best_edge = -1;
  double best_score = 0;
  CameraPose best_rel;
  for (size_t ei = 0; ei < graph.edges.size(); ++ei) {
    const auto& e = graph.edges[ei];
    if (!e.accepted || e.inliers.size() < 8) continue;
    const auto& Ka = cfg.intrinsics[e.view_a];
    const auto& Kb = cfg.intrinsics[e.view_b];
    CameraPose rel;
    std::vector<geometry::PixelPair> norm_pairs;
    for (const auto& m : e.inliers)
      norm_pairs.push_back({Ka.normalize(detail::kp_pixel(graph, e.view_a, m.kp_a)),
                            Kb.normalize(detail::kp_pixel(graph, e.view_b, m.kp_b))});
    try {
      const auto E = geometry::essential_from_fundamental(e.F, Ka, Kb);
      rel = geometry::decompose_essential(E, norm_pairs);
    } catch (const geometry::GeometryError&) {
      continue;
    }
    std::vector<double> angles;
    const CameraPose identity{};
    for (const auto& p : norm_pairs) {
      const Vec3 X = geometry::detail::triangulate_normalized(identity, p.a, rel, p.b);
      if (!X.allFinite() || X.z() <= 1e-9 || rel.to_camera(X).z() <= 1e-9) continue;
      const Vec3 ra = X.normalized();
      const Vec3 rb = (X - rel.center()).normalized();
      angles.push_back(std::acos(std::clamp(ra.dot(rb), -1.0, 1.0)));
    }
    if (angles.size() < 8) continue;
    std::nth_element(angles.begin(), angles.begin() + angles.size() / 2, angles.end());
    const double median_angle = angles[angles.size() / 2];
    if (median_angle < cfg.min_triangulation_deg * M_PI / 180.0) continue;
    const double score = static_cast<double>(e.inliers.size()) * median_angle;
    if (score > best_score) {
      best_score = score;
      best_edge = static_cast<int>(ei);
      best_rel = rel;
    }
  }
  if (best_edge < 0) {
    state.no_valid_initial_pair = true;
    state.stats = compute_stats(state, graph.num_views);
    return state;
  }

  const auto& init = graph.edges[best_edge];
  state.registered[init.view_a] = CameraPose{};
  state.registered[init.view_b] = best_rel;
  state.critical_edges.push_back({init.view_a, init.view_b});

  // Track bookkeeping: which track a (view, kp) pair belongs to, and which
  // tracks already have points.
  std::map<std::pair<int, int>, int> track_of;
  for (size_t t = 0; t < tracks.size(); ++t)
    for (const auto& obs : tracks[t]) track_of[obs] = static_cast<int>(t);
  std::vector<int> point_of_track(tracks.size(), -1);

  auto try_triangulate_tracks = [&]() {
    for (size_t t = 0; t < tracks.size(); ++t) {
      if (point_of_track[t] >= 0) continue;
      std::vector<std::pair<int, int>> reg_obs;
      for (const auto& [v, k] : tracks[t])
        if (state.registered.count(v)) reg_obs.push_back({v, k});
      if (reg_obs.size() < 2) continue;
      // Pick the registered observation pair with the widest baseline.
      double best_base = -1;
      std::pair<int, int> oa, ob;
      for (size_t i = 0; i < reg_obs.size(); ++i)
        for (size_t j = i + 1; j < reg_obs.size(); ++j) {
          const double base = (state.registered[reg_obs[i].first].center() -
                               state.registered[reg_obs[j].first].center())
                                  .norm();
          if (base > best_base) {
            best_base = base;
            oa = reg_obs[i];
            ob = reg_obs[j];
          }
        }
      Vec3 X;
      try {
        X = geometry::triangulate(cfg.intrinsics[oa.first], state.registered[oa.first],
                                  detail::kp_pixel(graph, oa.first, oa.second),
                                  cfg.intrinsics[ob.first], state.registered[ob.first],
                                  detail::kp_pixel(graph, ob.first, ob.second),
                                  cfg.min_triangulation_deg);
      } catch (const geometry::GeometryError&) {
        continue;
      }
      // Accept only if every registered observation reprojects tightly.
      bool ok = true;
      for (const auto& [v, k] : reg_obs) {
        try {
          const Vec2 proj = geometry::project(cfg.intrinsics[v], state.registered[v], X);
          if ((proj - detail::kp_pixel(graph, v, k)).norm() > cfg.point_accept_px) ok = false;
        } catch (const geometry::GeometryError&) {
          ok = false;
        }
        if (!ok) break;
      }
      if (!ok) continue;
      TrackPoint tp;
      tp.X = X;
      tp.observations = tracks[t];
      point_of_track[t] = static_cast<int>(state.points.size());
      state.points.push_back(std::move(tp));
    }
  };

  try_triangulate_tracks();
  bundle_adjust(state, graph, cfg);
  filter_points(state, graph, cfg);

  int since_ba = 0;
  std::set<int> hopeless;
  while (true) {
    // Candidate view with the most 2D-3D correspondences.
    int best_view = -1, best_count = 0, support_view = -1;
    for (int v = 0; v < graph.num_views; ++v) {
      if (state.registered.count(v) || hopeless.count(v)) continue;
      int count = 0;
      std::map<int, int> support;
      for (size_t k = 0; k < graph.features[v].keypoints.size(); ++k) {
        auto it = track_of.find({v, static_cast<int>(k)});
        if (it == track_of.end()) continue;
        if (point_of_track[it->second] >= 0 &&
            state.points[point_of_track[it->second]].valid) {
          ++count;
          for (const auto& [ov, ok_] : tracks[it->second])
            if (state.registered.count(ov)) support[ov]++;
        }
      }
      if (count > best_count) {
        best_count = count;
        best_view = v;
        int smax = 0;
        for (const auto& [ov, c] : support)
          if (c > smax) {
            smax = c;
            support_view = ov;
          }
      }
    }
    if (best_view < 0 || best_count < cfg.min_pnp_correspondences) break;

    std::vector<Vec3> X;
    std::vector<Vec2> px;
    for (size_t k = 0; k < graph.features[best_view].keypoints.size(); ++k) {
      auto it = track_of.find({best_view, static_cast<int>(k)});
      if (it == track_of.end() || point_of_track[it->second] < 0 ||
          !state.points[point_of_track[it->second]].valid)
        continue;
      X.push_back(state.points[point_of_track[it->second]].X);
      px.push_back(detail::kp_pixel(graph, best_view, static_cast<int>(k)));
    }
    auto pose = detail::pnp_dlt(cfg.intrinsics[best_view], X, px);
    bool registered_ok = false;
    if (pose) {
      detail::refine_pose(cfg.intrinsics[best_view], *pose, X, px);
      // Inlier refinement: keep correspondences that reproject, refit.
      std::vector<Vec3> Xi;
      std::vector<Vec2> pxi;
      for (size_t i = 0; i < X.size(); ++i) {
        try {
          const Vec2 proj = geometry::project(cfg.intrinsics[best_view], *pose, X[i]);
          if ((proj - px[i]).norm() <= cfg.point_accept_px) {
            Xi.push_back(X[i]);
            pxi.push_back(px[i]);
          }
        } catch (const geometry::GeometryError&) {
        }
      }
      if (static_cast<int>(Xi.size()) >= cfg.min_pnp_correspondences) {
        detail::refine_pose(cfg.intrinsics[best_view], *pose, Xi, pxi);
        state.registered[best_view] = *pose;
        if (support_view >= 0) state.critical_edges.push_back({support_view, best_view});
        registered_ok = true;
      }
    }
    if (!registered_ok) {
      hopeless.insert(best_view);
      continue;
    }

    try_triangulate_tracks();
    if (++since_ba >= cfg.ba_every) {
      bundle_adjust(state, graph, cfg);
      filter_points(state, graph, cfg);
      since_ba = 0;
    }
  }

  bundle_adjust(state, graph, cfg);
  filter_points(state, graph, cfg);
  std::erase_if(state.points, [](const TrackPoint& tp) { return !tp.valid; });
  state.stats = compute_stats(state, graph.num_views, &graph, &cfg);
  return state;
}

}  // namespace sfmlab::sfm
