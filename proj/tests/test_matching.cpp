#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sfmlab/core.hpp"
#include "sfmlab/geometry.hpp"
#include "sfmlab/matching.hpp"

using namespace sfmlab;
using namespace sfmlab::matching;
using geometry::Vec2;
using geometry::Vec3;

namespace {

// Descriptor concentrated on one bin with a little mass elsewhere so distances
// are easy to reason about.
imaging::Descriptor unit_descriptor(int hot_bin, double spread = 0.0, uint64_t seed = 0) {
  imaging::Descriptor d;
  d.values.fill(0.0);
  d.values[hot_bin % 128] = 1.0;
  if (spread > 0) {
    Rng rng(seed);
    for (double& v : d.values) v += spread * rng_uniform(rng);
  }
  double n = 0;
  for (double v : d.values) n += v * v;
  n = std::sqrt(n);
  for (double& v : d.values) v /= n;
  return d;
}

// Two-view rig and keypoints lying exactly on ground-truth correspondences.
struct Rig {
  geometry::CameraIntrinsics Ka{500, 480, 320, 240}, Kb{510, 505, 315, 245};
  geometry::CameraPose pa{}, pb;
  geometry::FundamentalMatrix F;

  Rig() {
    pb.R = geometry::rotation_from_axis_angle(Vec3(0, 10.0 * M_PI / 180.0, 0));
    pb.t = Vec3(-0.8, 0.1, 0.05);
    F = geometry::fundamental_from_poses(Ka, pa, Kb, pb);
  }
};

}  // namespace

TEST_CASE("match_descriptors pairs distinct bins and is mutual") {
  // a[i] and b[i] share hot bin i; every pairing is unambiguous.
  std::vector<imaging::Descriptor> a, b;
  for (int i = 0; i < 6; ++i) {
    a.push_back(unit_descriptor(i, 0.02, 10 + i));
    b.push_back(unit_descriptor(i, 0.02, 20 + i));
  }
  const auto m = match_descriptors(a, b, 0.8);
  REQUIRE(m.size() == 6);
  for (const auto& c : m) {
    CHECK(c.kp_a == c.kp_b);
    CHECK(c.ratio < 0.8);
    CHECK(c.descriptor_distance < 0.1);
  }
}

TEST_CASE("ratio test rejects ambiguous matches") {
  // b contains two near-identical copies of a[0]'s descriptor: the first and
  // second neighbor are equally close, so the ratio is ~1 and the match dies.
  std::vector<imaging::Descriptor> a = {unit_descriptor(0, 0.02, 1), unit_descriptor(9, 0.02, 2)};
  std::vector<imaging::Descriptor> b = {unit_descriptor(0, 0.02, 3), unit_descriptor(0, 0.02, 4),
                                        unit_descriptor(9, 0.02, 5)};
  const auto m = match_descriptors(a, b, 0.8);
  REQUIRE(m.size() == 1);
  CHECK(m[0].kp_a == 1);  // only the unambiguous descriptor survives
  CHECK(m[0].kp_b == 2);
}

TEST_CASE("mutual check kills one-sided nearest neighbors") {
  // a[1] is a decoy whose nearest neighbor in b is b[0], but b[0] prefers a[0].
  std::vector<imaging::Descriptor> a = {unit_descriptor(0), unit_descriptor(0, 0.3, 7),
                                        unit_descriptor(40, 0.02, 8)};
  std::vector<imaging::Descriptor> b = {unit_descriptor(0), unit_descriptor(40, 0.02, 9)};
  const auto m = match_descriptors(a, b, 0.95);
  for (const auto& c : m) CHECK(c.kp_a != 1);
}

TEST_CASE("match_descriptors edge cases") {
  CHECK(match_descriptors({}, {}, 0.8).empty());
  CHECK(match_descriptors({unit_descriptor(0)}, {unit_descriptor(0)}, 0.8).empty());
  CHECK_THROWS_AS(match_descriptors({}, {}, 0.0), ValidationError);
  CHECK_THROWS_AS(match_descriptors({}, {}, 1.0), ValidationError);
}

TEST_CASE("ransac on exact ground truth gives eta 1 and the true F") {
  Rig rig;
  Rng rng(17);
  std::vector<imaging::Keypoint> kps_a, kps_b;
  std::vector<MatchCandidate> cands;
  for (int i = 0; i < 40; ++i) {
    const Vec3 X(rng_uniform(rng, -1, 1), rng_uniform(rng, -1, 1), rng_uniform(rng, 4, 8));
    const Vec2 ua = geometry::project(rig.Ka, rig.pa, X);
    const Vec2 ub = geometry::project(rig.Kb, rig.pb, X);
    kps_a.push_back({ua.x(), ua.y(), 1.0, 8});
    kps_b.push_back({ub.x(), ub.y(), 1.0, 8});
    cands.push_back({i, i, 0.1, 0.5});
  }
  const auto edge = verify_ransac(cands, kps_a, kps_b, MatchConfig{}, 123);
  REQUIRE(edge.accepted);
  CHECK(edge.eta == doctest::Approx(1.0));
  CHECK(edge.inliers.size() == 40);
  const double d = std::min((edge.F.F - rig.F.F).norm(), (edge.F.F + rig.F.F).norm());
  CHECK(d < 1e-6);
}

TEST_CASE("ransac recovers the inlier set under 50 percent outliers") {
  Rig rig;
  Rng rng(29);
  std::vector<imaging::Keypoint> kps_a, kps_b;
  std::vector<MatchCandidate> cands;
  std::vector<bool> is_inlier;
  for (int i = 0; i < 80; ++i) {
    const Vec3 X(rng_uniform(rng, -1, 1), rng_uniform(rng, -1, 1), rng_uniform(rng, 4, 8));
    const Vec2 ua = geometry::project(rig.Ka, rig.pa, X);
    Vec2 ub = geometry::project(rig.Kb, rig.pb, X);
    const bool outlier = (i % 2 == 1);
    if (outlier) ub += Vec2(rng_uniform(rng, 15, 60), rng_uniform(rng, 15, 60));
    kps_a.push_back({ua.x(), ua.y(), 1.0, 8});
    kps_b.push_back({ub.x(), ub.y(), 1.0, 8});
    cands.push_back({i, i, 0.1, 0.5});
    is_inlier.push_back(!outlier);
  }
  const auto edge = verify_ransac(cands, kps_a, kps_b, MatchConfig{}, 7);
  REQUIRE(edge.accepted);
  int true_found = 0, false_found = 0;
  for (const auto& m : edge.inliers)
    (is_inlier[m.kp_a] ? true_found : false_found)++;
  // >= 95% of the planted inliers recovered; <= 2% of outliers leak in.
  CHECK(true_found >= 38);
  CHECK(false_found <= 1);
  // Post-condition: every reported inlier is within the Sampson threshold.
  const double t2 = MatchConfig{}.sampson_threshold_px * MatchConfig{}.sampson_threshold_px;
  for (const auto& m : edge.inliers) {
    const Vec2 ua(kps_a[m.kp_a].x, kps_a[m.kp_a].y), ub(kps_b[m.kp_b].x, kps_b[m.kp_b].y);
    CHECK(geometry::sampson_distance(edge.F, ua, ub) <= t2);
  }
}

TEST_CASE("ransac reports the edge-failure event instead of throwing") {
  const auto few = verify_ransac(std::vector<MatchCandidate>(5, {0, 0, 0, 0}),
                                 {{10, 10, 1, 8}}, {{12, 12, 1, 8}}, MatchConfig{}, 1);
  CHECK(!few.accepted);
  CHECK(few.failure == "insufficient candidates");

  // All-outlier geometry: candidates are random unrelated pixel pairs; any
  // 8-point model fits few of them and eta falls below eta_min.
  Rng rng(31);
  std::vector<imaging::Keypoint> kps_a, kps_b;
  std::vector<MatchCandidate> cands;
  for (int i = 0; i < 60; ++i) {
    kps_a.push_back({rng_uniform(rng, 5, 600), rng_uniform(rng, 5, 400), 1.0, 8});
    kps_b.push_back({rng_uniform(rng, 5, 600), rng_uniform(rng, 5, 400), 1.0, 8});
    cands.push_back({i, i, 0.1, 0.5});
  }
  MatchConfig strict;
  strict.eta_min = 0.6;
  const auto bad = verify_ransac(cands, kps_a, kps_b, strict, 3);
  CHECK(!bad.accepted);
  CHECK(!bad.failure.empty());
}

TEST_CASE("ransac is deterministic for a fixed seed") {
  Rig rig;
  Rng rng(41);
  std::vector<imaging::Keypoint> kps_a, kps_b;
  std::vector<MatchCandidate> cands;
  for (int i = 0; i < 60; ++i) {
    const Vec3 X(rng_uniform(rng, -1, 1), rng_uniform(rng, -1, 1), rng_uniform(rng, 4, 8));
    const Vec2 ua = geometry::project(rig.Ka, rig.pa, X);
    Vec2 ub = geometry::project(rig.Kb, rig.pb, X);
    if (i % 3 == 0) ub += Vec2(25, -30);
    kps_a.push_back({ua.x(), ua.y(), 1.0, 8});
    kps_b.push_back({ub.x(), ub.y(), 1.0, 8});
    cands.push_back({i, i, 0.1, 0.5});
  }
  const auto e1 = verify_ransac(cands, kps_a, kps_b, MatchConfig{}, 55);
  const auto e2 = verify_ransac(cands, kps_a, kps_b, MatchConfig{}, 55);
  REQUIRE(e1.accepted == e2.accepted);
  CHECK(e1.eta == e2.eta);
  CHECK((e1.F.F - e2.F.F).norm() == 0.0);
  REQUIRE(e1.inliers.size() == e2.inliers.size());
  for (size_t i = 0; i < e1.inliers.size(); ++i) CHECK(e1.inliers[i].kp_a == e2.inliers[i].kp_a);
}
