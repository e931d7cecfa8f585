#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <vector>

#include "sfmlab/core.hpp"

namespace sfmlab::geometry {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct GeometryError : Error {
  using Error::Error;
};

struct CameraIntrinsics {
  double fx = 1, fy = 1, cx = 0, cy = 0;

  Mat3 matrix() const {
    Mat3 K;
    K << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    return K;
  }

  Vec2 normalize(const Vec2& px) const {
    return {(px.x() - cx) / fx, (px.y() - cy) / fy};
  }
};

// World-to-camera rigid transform: x_cam = R * x_world + t.
struct CameraPose {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  Vec3 to_camera(const Vec3& X) const { return R * X + t; }
  Vec3 center() const { return -R.transpose() * t; }

  CameraPose inverse() const { return {R.transpose(), -R.transpose() * t}; }
};

inline Mat3 cross_matrix(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

// Rodrigues axis-angle to rotation.
inline Mat3 rotation_from_axis_angle(const Vec3& w) {
  const double theta = w.norm();
  if (theta < 1e-12) return Mat3::Identity() + cross_matrix(w);
  const Vec3 axis = w / theta;
  const Mat3 K = cross_matrix(axis);
  return Mat3::Identity() + std::sin(theta) * K + (1 - std::cos(theta)) * K * K;
}

inline double rotation_angle(const Mat3& R) {
  const double c = std::clamp((R.trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c);
}

struct FundamentalMatrix {
  Mat3 F = Mat3::Zero();  // rank 2, unit Frobenius norm
};

struct EssentialMatrix {
  Mat3 E = Mat3::Zero();  // singular values (s, s, 0)
};

// Pinhole projection to pixel coordinates.
inline Vec2 project(const CameraIntrinsics& K, const CameraPose& pose, const Vec3& X) {
  const Vec3 Xc = pose.to_camera(X);
  if (Xc.z() <= 1e-9) throw GeometryError("project: point behind camera");
  return {K.fx * Xc.x() / Xc.z() + K.cx, K.fy * Xc.y() / Xc.z() + K.cy};
}

// Relative pose of j with respect to i: x_j = R_ij x_i + t_ij.
inline CameraPose relative_pose(const CameraPose& pose_i, const CameraPose& pose_j) {
  const Mat3 R_ij = pose_j.R * pose_i.R.transpose();
  return {R_ij, pose_j.t - R_ij * pose_i.t};
}

inline EssentialMatrix essential_from_relative(const CameraPose& rel) {
  return {cross_matrix(rel.t) * rel.R};
}

inline FundamentalMatrix enforce_fundamental(Mat3 F) {
  Eigen::JacobiSVD<Mat3> svd(F, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Vec3 s = svd.singularValues();
  s.z() = 0;
  F = svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
  const double n = F.norm();
  if (n < 1e-15) throw GeometryError("fundamental matrix vanished after rank enforcement");
  F /= n;
  return {F};
}

// F = K_j^-T [t_ij]x R_ij K_i^-1, rank-2, unit Frobenius norm.
inline FundamentalMatrix fundamental_from_poses(const CameraIntrinsics& K_i,
                                                const CameraPose& pose_i,
                                                const CameraIntrinsics& K_j,
                                                const CameraPose& pose_j) {
  const CameraPose rel = relative_pose(pose_i, pose_j);
  if (rel.t.norm() < 1e-9) throw GeometryError("fundamental_from_poses: degenerate baseline");
  const Mat3 E = cross_matrix(rel.t) * rel.R;
  const Mat3 F = K_j.matrix().transpose().inverse() * E * K_i.matrix().inverse();
  return enforce_fundamental(F);
}

inline double epipolar_residual(const FundamentalMatrix& F, const Vec2& pa, const Vec2& pb) {
  const Vec3 a(pa.x(), pa.y(), 1), b(pb.x(), pb.y(), 1);
  return b.dot(F.F * a);
}

// First-order geometric epipolar residual (pixels squared).
inline double sampson_distance(const FundamentalMatrix& F, const Vec2& pa, const Vec2& pb) {
  const Vec3 a(pa.x(), pa.y(), 1), b(pb.x(), pb.y(), 1);
  const Vec3 Fa = F.F * a;
  const Vec3 Ftb = F.F.transpose() * b;
  const double num = b.dot(Fa);
  const double denom = Fa.x() * Fa.x() + Fa.y() * Fa.y() + Ftb.x() * Ftb.x() + Ftb.y() * Ftb.y();
  if (denom < 1e-18) return std::numeric_limits<double>::infinity();
  return num * num / denom;
}

struct PixelPair {
  Vec2 a;
  Vec2 b;
};

// Normalized eight-point algorithm with rank-2 enforcement.
inline FundamentalMatrix estimate_fundamental_8pt(const std::vector<PixelPair>& matches) {
  const int n = static_cast<int>(matches.size());
  if (n < 8) throw GeometryError("estimate_fundamental_8pt: need at least 8 pairs");

  // Hartley normalization: centroid to origin, mean distance sqrt(2).
  auto normalize = [&](bool side_b) {
    Vec2 mean = Vec2::Zero();
    for (const auto& m : matches) mean += side_b ? m.b : m.a;
    mean /= n;
    double dist = 0;
    for (const auto& m : matches) dist += ((side_b ? m.b : m.a) - mean).norm();
    dist /= n;
    const double s = dist > 1e-12 ? std::sqrt(2.0) / dist : 1.0;
    Mat3 T;
    T << s, 0, -s * mean.x(), 0, s, -s * mean.y(), 0, 0, 1;
    return T;
  };
  const Mat3 Ta = normalize(false);
  const Mat3 Tb = normalize(true);

  Eigen::MatrixXd A(n, 9);
  for (int i = 0; i < n; ++i) {
    const Vec3 a = Ta * Vec3(matches[i].a.x(), matches[i].a.y(), 1);
    const Vec3 b = Tb * Vec3(matches[i].b.x(), matches[i].b.y(), 1);
    A.row(i) << b.x() * a.x(), b.x() * a.y(), b.x(), b.y() * a.x(), b.y() * a.y(), b.y(),
        a.x(), a.y(), 1;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  if (sv(std::min<int>(7, sv.size() - 1)) < 1e-10 * sv(0))
    throw GeometryError("estimate_fundamental_8pt: degenerate configuration");
  const Eigen::VectorXd f = svd.matrixV().col(8);
  Mat3 Fn;
  Fn << f(0), f(1), f(2), f(3), f(4), f(5), f(6), f(7), f(8);
  return enforce_fundamental(Tb.transpose() * Fn * Ta);
}

inline EssentialMatrix essential_from_fundamental(const FundamentalMatrix& F,
                                                  const CameraIntrinsics& K_i,
                                                  const CameraIntrinsics& K_j) {
  Mat3 E = K_j.matrix().transpose() * F.F * K_i.matrix();
  Eigen::JacobiSVD<Mat3> svd(E, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 s = svd.singularValues();
  const double avg = (s.x() + s.y()) / 2;
  Vec3 proj(avg, avg, 0);
  return {svd.matrixU() * proj.asDiagonal() * svd.matrixV().transpose()};
}

// Depth of the midpoint-free linear triangulation in camera a, used for
// cheirality tests in essential decomposition (normalized coordinates).
namespace detail {
inline Vec3 triangulate_normalized(const CameraPose& pose_a, const Vec2& xa,
                                   const CameraPose& pose_b, const Vec2& xb) {
  Eigen::Matrix<double, 4, 4> A;
  Eigen::Matrix<double, 3, 4> Pa, Pb;
  Pa << pose_a.R, pose_a.t;
  Pb << pose_b.R, pose_b.t;
  A.row(0) = xa.x() * Pa.row(2) - Pa.row(0);
  A.row(1) = xa.y() * Pa.row(2) - Pa.row(1);
  A.row(2) = xb.x() * Pb.row(2) - Pb.row(0);
  A.row(3) = xb.y() * Pb.row(2) - Pb.row(1);
  Eigen::JacobiSVD<Eigen::Matrix<double, 4, 4>> svd(A, Eigen::ComputeFullV);
  Eigen::Vector4d Xh = svd.matrixV().col(3);
  if (std::abs(Xh(3)) < 1e-15) return Vec3::Constant(std::numeric_limits<double>::quiet_NaN());
  return Xh.head<3>() / Xh(3);
}
}  // namespace detail

// Four-candidate decomposition; picks the candidate with the most points of
// positive depth in both cameras. Matches are in normalized coordinates.
inline CameraPose decompose_essential(const EssentialMatrix& E,
                                      const std::vector<PixelPair>& matches_normalized) {
  if (matches_normalized.empty())
    throw GeometryError("decompose_essential: need at least one match");
  Eigen::JacobiSVD<Mat3> svd(E.E, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 U = svd.matrixU(), V = svd.matrixV();
  if (U.determinant() < 0) U.col(2) *= -1;
  if (V.determinant() < 0) V.col(2) *= -1;
  Mat3 W;
  W << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  const Mat3 R1 = U * W * V.transpose();
  const Mat3 R2 = U * W.transpose() * V.transpose();
  const Vec3 u3 = U.col(2);

  const CameraPose identity{};
  int best = -1, best_count = -1;
  bool tie = false;
  std::array<CameraPose, 4> cand = {CameraPose{R1, u3}, CameraPose{R1, -u3},
                                    CameraPose{R2, u3}, CameraPose{R2, -u3}};
  for (int c = 0; c < 4; ++c) {
    int count = 0;
    for (const auto& m : matches_normalized) {
      const Vec3 X = detail::triangulate_normalized(identity, m.a, cand[c], m.b);
      if (!X.allFinite()) continue;
      if (X.z() > 1e-9 && cand[c].to_camera(X).z() > 1e-9) ++count;
    }
    if (count > best_count) {
      best_count = count;
      best = c;
      tie = false;
    } else if (count == best_count) {
      tie = true;
    }
  }
  if (best_count <= 0 || tie)
    throw GeometryError("decompose_essential: cheirality tie, no candidate wins");
  CameraPose pose = cand[best];
  pose.t.normalize();
  return pose;
}

// DLT triangulation plus one Gauss-Newton refinement of reprojection error.
inline Vec3 triangulate(const CameraIntrinsics& K_a, const CameraPose& pose_a,
                        const Vec2& pixel_a, const CameraIntrinsics& K_b,
                        const CameraPose& pose_b, const Vec2& pixel_b,
                        double min_angle_deg = 0.5) {
  const Vec2 xa = K_a.normalize(pixel_a);
  const Vec2 xb = K_b.normalize(pixel_b);

  // Parallax check on the viewing rays.
  const Vec3 ray_a = (pose_a.R.transpose() * Vec3(xa.x(), xa.y(), 1)).normalized();
  const Vec3 ray_b = (pose_b.R.transpose() * Vec3(xb.x(), xb.y(), 1)).normalized();
  const double cos_angle = std::clamp(ray_a.dot(ray_b), -1.0, 1.0);
  if (std::acos(cos_angle) < min_angle_deg * M_PI / 180.0)
    throw GeometryError("triangulate: insufficient parallax");

  Vec3 X = detail::triangulate_normalized(pose_a, xa, pose_b, xb);
  if (!X.allFinite()) throw GeometryError("triangulate: degenerate linear system");

  // One GN step on pixel reprojection residuals (4 residuals, 3 unknowns).
  auto residual_and_jacobian = [&](const Vec3& P, Eigen::Vector4d& r,
                                   Eigen::Matrix<double, 4, 3>& J) -> bool {
    int row = 0;
    for (const auto& [K, pose, pix] :
         {std::tie(K_a, pose_a, pixel_a), std::tie(K_b, pose_b, pixel_b)}) {
      const Vec3 Xc = pose.to_camera(P);
      if (Xc.z() <= 1e-9) return false;
      const double iz = 1.0 / Xc.z();
      r(row) = K.fx * Xc.x() * iz + K.cx - pix.x();
      r(row + 1) = K.fy * Xc.y() * iz + K.cy - pix.y();
      Eigen::Matrix<double, 2, 3> dpix_dXc;
      dpix_dXc << K.fx * iz, 0, -K.fx * Xc.x() * iz * iz, 0, K.fy * iz,
          -K.fy * Xc.y() * iz * iz;
      J.block<2, 3>(row, 0) = dpix_dXc * pose.R;
      row += 2;
    }
    return true;
  };
  Eigen::Vector4d r;
  Eigen::Matrix<double, 4, 3> J;
  if (residual_and_jacobian(X, r, J)) {
    const Vec3 step = (J.transpose() * J).ldlt().solve(J.transpose() * r);
    const Vec3 X_new = X - step;
    Eigen::Vector4d r2;
    Eigen::Matrix<double, 4, 3> J2;
    if (residual_and_jacobian(X_new, r2, J2) && r2.squaredNorm() <= r.squaredNorm()) X = X_new;
  }

  if (pose_a.to_camera(X).z() <= 1e-9 || pose_b.to_camera(X).z() <= 1e-9)
    throw GeometryError("triangulate: point behind camera");
  return X;
}

}  // namespace sfmlab::geometry
