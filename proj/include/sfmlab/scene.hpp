#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sfmlab/core.hpp"
#include "sfmlab/geometry.hpp"
#include "sfmlab/imaging.hpp"

namespace sfmlab::scene {

using geometry::CameraIntrinsics;
using geometry::CameraPose;
using geometry::Mat3;
using geometry::Vec2;
using geometry::Vec3;

// Planar patch with a grayscale texture over local (u,v) in [0,1]^2.
// Corners are built from a plane frame (origin, edge_u, edge_v) so coplanarity
// is exact by construction.
struct TexturedPatch {
  Vec3 origin;
  Vec3 edge_u;
  Vec3 edge_v;
  ImageBuffer texture;

  Vec3 point(double u, double v) const { return origin + u * edge_u + v * edge_v; }

  std::array<Vec3, 4> corners() const {
    return {point(0, 0), point(1, 0), point(1, 1), point(0, 1)};
  }

  Vec3 normal() const { return edge_u.cross(edge_v).normalized(); }
};

struct MultiViewScene {
  std::vector<TexturedPatch> patches;
  std::vector<CameraIntrinsics> intrinsics;
  std::vector<CameraPose> poses;
  int image_width = 0;
  int image_height = 0;
  uint64_t rng_seed = 0;

  int num_views() const { return static_cast<int>(poses.size()); }
};

struct GroundTruthCorrespondence {
  int view_a = 0;
  int view_b = 0;
  Vec2 pixel_a;
  Vec2 pixel_b;
  Vec3 world_point;
};

enum class TextureKind { kChecker, kNoise, kFile };

struct SceneSpec {
  int num_views = 12;
  int num_patches = 6;
  TextureKind texture_kind = TextureKind::kNoise;
  int texture_size = 64;
  int image_width = 192;
  int image_height = 144;
  uint64_t seed = 0;
  std::string texture_file;  // PFM path when texture_kind == kFile
};

inline ImageBuffer make_checker_texture(int size, int cell = 8, double lo = 0.15,
                                        double hi = 0.85) {
  ImageBuffer tex(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      tex.at(x, y) = (((x / cell) + (y / cell)) % 2 == 0) ? lo : hi;
  return tex;
}

// Band-limited noise: white noise on a coarse lattice, bilinearly upsampled and
// lightly smoothed, then contrast-normalized into [0.1, 0.9]. Rich in Harris
// corners without aliasing under perspective resampling.
inline ImageBuffer make_noise_texture(int size, uint64_t seed, int coarse = 12) {
  Rng rng(seed);
  ImageBuffer base(coarse, coarse);
  for (double& v : base.data) v = rng_uniform(rng);
  ImageBuffer tex(size, size);
  const double scale = static_cast<double>(coarse - 1) / (size - 1);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      tex.at(x, y) = base.sample_bilinear(x * scale, y * scale);
  // One 3x3 binomial smoothing pass.
  ImageBuffer sm(size, size);
  static const double k[3] = {0.25, 0.5, 0.25};
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      double s = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx)
          s += k[dx + 1] * k[dy + 1] * tex.at_clamped(x + dx, y + dy);
      sm.at(x, y) = s;
    }
  double lo = 1e30, hi = -1e30;
  for (double v : sm.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double span = std::max(hi - lo, 1e-9);
  for (double& v : sm.data) v = 0.1 + 0.8 * (v - lo) / span;
  return sm;
}

// Ray-cast hit against the front-most patch, with the bilinear texture-sample
// footprint exposed so rendering is differentiable w.r.t. texel values.
struct RenderSample {
  int patch_index = -1;   // -1: background
  double u = 0, v = 0;    // patch-local coordinates
  double depth = 0;
  std::array<int, 4> texel_index{};     // flat indices into the patch texture
  std::array<double, 4> texel_weight{}; // exact Jacobian d(pixel)/d(texel)
  double value = 0.5;                   // background constant when no hit
};

inline constexpr double kBackground = 0.5;

inline RenderSample trace_pixel(const MultiViewScene& scene, int view_index, double px,
                                double py) {
  const CameraIntrinsics& K = scene.intrinsics[view_index];
  const CameraPose& pose = scene.poses[view_index];
  const Vec3 dir_cam((px - K.cx) / K.fx, (py - K.cy) / K.fy, 1.0);
  const Vec3 origin = pose.center();
  const Vec3 dir = pose.R.transpose() * dir_cam;

  RenderSample best;
  best.depth = std::numeric_limits<double>::infinity();
  for (size_t p = 0; p < scene.patches.size(); ++p) {
    const TexturedPatch& patch = scene.patches[p];
    const Vec3 n = patch.edge_u.cross(patch.edge_v);
    const double denom = dir.dot(n);
    if (std::abs(denom) < 1e-12) continue;
    const double s = (patch.origin - origin).dot(n) / denom;
    if (s <= 1e-9) continue;
    const Vec3 hit = origin + s * dir;
    // Solve hit = origin + u*eu + v*ev in the plane basis.
    const Vec3 d = hit - patch.origin;
    const double uu = patch.edge_u.dot(patch.edge_u), vv = patch.edge_v.dot(patch.edge_v),
                 uv = patch.edge_u.dot(patch.edge_v);
    const double du = d.dot(patch.edge_u), dv = d.dot(patch.edge_v);
    const double det = uu * vv - uv * uv;
    if (std::abs(det) < 1e-18) continue;
    const double u = (du * vv - dv * uv) / det;
    const double v = (dv * uu - du * uv) / det;
    if (u < 0 || u > 1 || v < 0 || v > 1) continue;
    const double depth = pose.to_camera(hit).z();
    if (depth <= 1e-9) continue;
    // Nearest depth wins; ties go to the lower patch index (strict <).
    if (depth < best.depth) {
      best.patch_index = static_cast<int>(p);
      best.u = u;
      best.v = v;
      best.depth = depth;
    }
  }
  if (best.patch_index < 0) {
    best.depth = 0;
    best.value = kBackground;
    return best;
  }
  const ImageBuffer& tex = scene.patches[best.patch_index].texture;
  const double tx = best.u * (tex.width - 1);
  const double ty = best.v * (tex.height - 1);
  const int x0 = std::clamp(static_cast<int>(std::floor(tx)), 0, tex.width - 2);
  const int y0 = std::clamp(static_cast<int>(std::floor(ty)), 0, tex.height - 2);
  const double fx = tx - x0, fy = ty - y0;
  best.texel_index = {y0 * tex.width + x0, y0 * tex.width + x0 + 1,
                      (y0 + 1) * tex.width + x0, (y0 + 1) * tex.width + x0 + 1};
  best.texel_weight = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
  best.value = 0;
  for (int i = 0; i < 4; ++i) best.value += best.texel_weight[i] * tex.data[best.texel_index[i]];
  return best;
}

inline ImageBuffer render_view(const MultiViewScene& scene, int view_index) {
  if (view_index < 0 || view_index >= scene.num_views())
    throw ValidationError("render_view: view index out of range");
  ImageBuffer img(scene.image_width, scene.image_height);
  for (int y = 0; y < scene.image_height; ++y)
    for (int x = 0; x < scene.image_width; ++x)
      img.at(x, y) = trace_pixel(scene, view_index, x, y).value;
  return img;
}

inline std::vector<ImageBuffer> render_all_views(const MultiViewScene& scene) {
  std::vector<ImageBuffer> out;
  out.reserve(scene.num_views());
  for (int i = 0; i < scene.num_views(); ++i) out.push_back(render_view(scene, i));
  return out;
}

// Patch visibility: all four corners project inside the image with positive
// depth and a small margin.
inline bool patch_visible(const MultiViewScene& scene, int view_index, int patch_index,
                          double margin = 1.0) {
  const auto& K = scene.intrinsics[view_index];
  const auto& pose = scene.poses[view_index];
  for (const Vec3& c : scene.patches[patch_index].corners()) {
    if (pose.to_camera(c).z() <= 1e-9) return false;
    Vec2 px;
    try {
      px = geometry::project(K, pose, c);
    } catch (const geometry::GeometryError&) {
      return false;
    }
    if (px.x() < margin || px.y() < margin || px.x() > scene.image_width - 1 - margin ||
        px.y() > scene.image_height - 1 - margin)
      return false;
  }
  return true;
}

inline std::vector<int> shared_patches(const MultiViewScene& scene, int view_a, int view_b) {
  std::vector<int> out;
  for (size_t p = 0; p < scene.patches.size(); ++p)
    if (patch_visible(scene, view_a, static_cast<int>(p)) &&
        patch_visible(scene, view_b, static_cast<int>(p)))
      out.push_back(static_cast<int>(p));
  return out;
}

// Uniform samples on patches visible in both views; both projections must lie
// inside the image with the requested margin.
inline std::vector<GroundTruthCorrespondence> ground_truth_correspondences(
    const MultiViewScene& scene, int view_a, int view_b, int samples_per_patch,
    double margin = 2.0, uint64_t salt = 0) {
  const std::vector<int> shared = shared_patches(scene, view_a, view_b);
  std::vector<GroundTruthCorrespondence> out;
  Rng rng(hash_combine(hash_combine(scene.rng_seed, salt),
                       hash_combine(static_cast<uint64_t>(view_a) + 1,
                                    static_cast<uint64_t>(view_b) + 1)));
  for (int p : shared) {
    for (int s = 0; s < samples_per_patch; ++s) {
      const double u = rng_uniform(rng);
      const double v = rng_uniform(rng);
      const Vec3 X = scene.patches[p].point(u, v);
      Vec2 pa, pb;
      try {
        pa = geometry::project(scene.intrinsics[view_a], scene.poses[view_a], X);
        pb = geometry::project(scene.intrinsics[view_b], scene.poses[view_b], X);
      } catch (const geometry::GeometryError&) {
        continue;
      }
      auto inside = [&](const Vec2& px) {
        return px.x() >= margin && px.y() >= margin &&
               px.x() <= scene.image_width - 1 - margin &&
               px.y() <= scene.image_height - 1 - margin;
      };
      if (!inside(pa) || !inside(pb)) continue;
      // Occlusion check: the sampled patch must be the front-most hit in both.
      if (trace_pixel(scene, view_a, pa.x(), pa.y()).patch_index != p) continue;
      if (trace_pixel(scene, view_b, pb.x(), pb.y()).patch_index != p) continue;
      out.push_back({view_a, view_b, pa, pb, X});
    }
  }
  return out;
}

// Cameras on a horizontal arc looking at the patch cluster near the origin.
// Patches are tilted panels scattered inside a shallow box so every camera
// pair shares most of the patch area.
inline MultiViewScene generate_scene(const SceneSpec& spec) {
  if (spec.num_views < 2) throw ValidationError("generate_scene: need at least 2 views");
  if (spec.num_patches < 1) throw ValidationError("generate_scene: need at least 1 patch");
  if (spec.texture_size < 16)
    throw ValidationError("generate_scene: texture must be at least 16x16");

  MultiViewScene scene;
  scene.image_width = spec.image_width;
  scene.image_height = spec.image_height;
  scene.rng_seed = spec.seed;

  const double focal = 1.1 * spec.image_width;
  for (int i = 0; i < spec.num_views; ++i) {
    CameraIntrinsics K;
    K.fx = K.fy = focal;
    K.cx = (spec.image_width - 1) / 2.0;
    K.cy = (spec.image_height - 1) / 2.0;
    scene.intrinsics.push_back(K);
  }

  // Arc of radius 4 m spanning 50 degrees, slight height variation.
  const double radius = 4.0;
  const double span = 50.0 * M_PI / 180.0;
  for (int i = 0; i < spec.num_views; ++i) {
    const double frac = spec.num_views > 1 ? static_cast<double>(i) / (spec.num_views - 1) : 0.5;
    const double angle = -span / 2 + span * frac;
    Rng vrng(hash_combine(spec.seed, 0x5eedc4a3ULL + i));
    const double height = rng_uniform(vrng, -0.25, 0.25);
    const Vec3 center(radius * std::sin(angle), height, -radius * std::cos(angle));
    // Look-at the origin with world up-vector (0,1,0).
    const Vec3 forward = (Vec3::Zero() - center).normalized();
    const Vec3 right = forward.cross(Vec3(0, 1, 0)).normalized() * -1.0;
    const Vec3 up = forward.cross(right);
    Mat3 R;
    R.row(0) = right.transpose();
    R.row(1) = up.transpose();
    R.row(2) = forward.transpose();
    scene.poses.push_back({R, -R * center});
  }

  // Place patches; retry placement until every patch is visible in >= 2 views.
  Rng prng(hash_combine(spec.seed, 0x9a7c15f1ULL));
  for (int p = 0; p < spec.num_patches; ++p) {
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      TexturedPatch patch;
      const double size = rng_uniform(prng, 0.7, 1.1);
      const Vec3 center(rng_uniform(prng, -0.9, 0.9), rng_uniform(prng, -0.6, 0.6),
                        rng_uniform(prng, -0.35, 0.35));
      // Mild tilt around the frontal plane so foreshortening stays moderate.
      const Vec3 tilt(rng_uniform(prng, -0.3, 0.3), rng_uniform(prng, -0.3, 0.3), 0.0);
      const Mat3 Rt = geometry::rotation_from_axis_angle(tilt);
      const Vec3 eu = Rt * Vec3(size, 0, 0);
      const Vec3 ev = Rt * Vec3(0, size, 0);
      patch.origin = center - 0.5 * eu - 0.5 * ev;
      patch.edge_u = eu;
      patch.edge_v = ev;
      switch (spec.texture_kind) {
        case TextureKind::kChecker:
          patch.texture = make_checker_texture(spec.texture_size);
          break;
        case TextureKind::kNoise:
          patch.texture = make_noise_texture(spec.texture_size,
                                             hash_combine(spec.seed, 0x7e37u + p));
          break;
        case TextureKind::kFile:
          throw ValidationError("generate_scene: file textures are attached by the caller");
      }
      scene.patches.push_back(patch);
      int visible = 0;
      for (int v = 0; v < spec.num_views; ++v)
        if (patch_visible(scene, v, p)) ++visible;
      if (visible >= 2)
        placed = true;
      else
        scene.patches.pop_back();
    }
    if (!placed)
      throw ValidationError("generate_scene: patch not visible in 2 views after 100 retries");
  }
  return scene;
}

}  // namespace sfmlab::scene
