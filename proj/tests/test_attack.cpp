#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "sfmlab/attack.hpp"
#include "sfmlab/core.hpp"
#include "sfmlab/scene.hpp"

using namespace sfmlab;
using namespace sfmlab::attack;
using scene::GroundTruthCorrespondence;

namespace {

ImageBuffer random_image(int w, int h, uint64_t seed) {
  ImageBuffer img(w, h);
  Rng rng(seed);
  for (double& v : img.data) v = rng_uniform(rng, 0.2, 0.8);
  return img;
}

// Two unrelated views with correspondences placed away from the borders.
struct TwoViewSetup {
  std::vector<ImageBuffer> views;
  std::vector<GroundTruthCorrespondence> corrs;
};

TwoViewSetup make_setup(int patch_radius) {
  TwoViewSetup s;
  s.views = {random_image(48, 40, 101), random_image(48, 40, 102)};
  const int m = patch_radius + 2;
  Rng rng(7);
  for (int i = 0; i < 6; ++i) {
    GroundTruthCorrespondence c;
    c.view_a = 0;
    c.view_b = 1;
    c.pixel_a = {rng_uniform(rng, m, 48 - 1 - m), rng_uniform(rng, m, 40 - 1 - m)};
    c.pixel_b = {rng_uniform(rng, m, 48 - 1 - m), rng_uniform(rng, m, 40 - 1 - m)};
    s.corrs.push_back(c);
  }
  return s;
}

scene::MultiViewScene attack_scene(uint64_t seed = 1) {
  scene::SceneSpec spec;
  spec.num_views = 6;
  spec.num_patches = 4;
  spec.image_width = 128;
  spec.image_height = 96;
  spec.texture_size = 48;
  spec.seed = seed;
  return scene::generate_scene(spec);
}

AttackConfig quick_config(uint64_t seed = 1) {
  AttackConfig cfg;
  cfg.outer_iters = 4;
  cfg.inner_steps = 5;
  cfg.refresh_period = 2;
  cfg.pairs_per_poison = 1;
  cfg.corr_per_pair = 32;
  cfg.seed = seed;
  return cfg;
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

}  // namespace

TEST_CASE("select_poison_set sizes, partition, and determinism") {
  const auto [A, R] = select_poison_set(12, 0.6, 3);
  CHECK(A.size() == 7);  // round(0.6 * 12)
  CHECK(R.size() == 5);
  std::set<int> all(A.begin(), A.end());
  all.insert(R.begin(), R.end());
  CHECK(all.size() == 12);  // disjoint partition of the views
  CHECK(*all.begin() == 0);
  CHECK(*all.rbegin() == 11);
  CHECK(std::is_sorted(A.begin(), A.end()));

  const auto [A2, R2] = select_poison_set(12, 0.6, 3);
  CHECK(A == A2);
  const auto [A3, R3] = select_poison_set(12, 0.6, 4);
  CHECK(A != A3);

  CHECK_THROWS_AS(select_poison_set(12, 0.0, 1), ValidationError);
  CHECK_THROWS_AS(select_poison_set(12, 1.0, 1), ValidationError);
  CHECK_THROWS_AS(select_poison_set(12, 0.02, 1), ValidationError);  // empty A
  CHECK_THROWS_AS(select_poison_set(12, 0.99, 1), ValidationError);  // empty R
}

TEST_CASE("cvi_loss vanishes when the poisoned view copies the reference patches") {
  // Identical images give identical gradient patches regardless of alignment
  // of the correspondence endpoints -- use matching coordinates.
  auto s = make_setup(4);
  s.views[1] = s.views[0];
  for (auto& c : s.corrs) c.pixel_b = c.pixel_a;
  const auto eval = cvi_loss(s.views, s.corrs, 4, false);
  CHECK(eval.loss == doctest::Approx(0.0));
  for (double t : eval.per_correspondence) CHECK(t == 0.0);

  CHECK_THROWS_AS(cvi_loss(s.views, {}, 4, false), ValidationError);
  GroundTruthCorrespondence border;
  border.view_a = 0;
  border.view_b = 1;
  border.pixel_a = {1, 1};
  border.pixel_b = {20, 20};
  CHECK_THROWS_AS(cvi_loss(s.views, {border}, 4, false), ValidationError);
}

TEST_CASE("cvi_loss analytic gradient matches finite differences") {
  const auto s = make_setup(4);
  const auto eval = cvi_loss(s.views, s.corrs, 4, true);
  REQUIRE(eval.gradients.count(1) == 1);
  const auto& g = eval.gradients.at(1);
  Rng rng(55);
  int checked = 0;
  for (int trial = 0; trial < 200 && checked < 12; ++trial) {
    const int x = static_cast<int>(rng_index(rng, 48));
    const int y = static_cast<int>(rng_index(rng, 40));
    if (std::abs(g.at(x, y)) < 1e-6) continue;  // flat spots are uninformative
    auto views = s.views;
    const double h = 1e-6;
    views[1].at(x, y) += h;
    const double up = cvi_loss(views, s.corrs, 4, false).loss;
    views[1].at(x, y) -= 2 * h;
    const double dn = cvi_loss(views, s.corrs, 4, false).loss;
    const double num = (up - dn) / (2 * h);
    CHECK(rel_err(g.at(x, y), num) < 1e-4);
    ++checked;
  }
  CHECK(checked >= 12);
}

TEST_CASE("surrogate objective gradient matches finite differences") {
  const auto s = make_setup(4);
  auto poisoned = s.views;
  // Perturb the poisoned view so SSIM sits away from its stationary point.
  Rng prng(77);
  for (double& v : poisoned[1].data) v = std::clamp(v + rng_uniform(prng, -0.03, 0.03), 0.0, 1.0);

  AttackConfig cfg;
  cfg.patch_radius = 4;
  const std::vector<int> A = {1};
  const auto obj = surrogate_objective(poisoned, s.views, A, s.corrs, cfg);
  CHECK(obj.value == doctest::Approx(cfg.w_grad * obj.cvi_term - cfg.w_ssim * obj.ssim_term -
                                     cfg.w_tv * obj.tv_term));
  REQUIRE(obj.gradients.count(1) == 1);
  const auto& g = obj.gradients.at(1);

  Rng rng(56);
  int checked = 0;
  for (int trial = 0; trial < 300 && checked < 10; ++trial) {
    const int x = static_cast<int>(rng_index(rng, 48));
    const int y = static_cast<int>(rng_index(rng, 40));
    if (std::abs(g.at(x, y)) < 1e-5) continue;
    auto views = poisoned;
    const double h = 1e-6;
    views[1].at(x, y) += h;
    const auto up = surrogate_objective(views, s.views, A, s.corrs, cfg);
    views[1].at(x, y) -= 2 * h;
    const auto dn = surrogate_objective(views, s.views, A, s.corrs, cfg);
    // The stored gradient is for the full signed objective the PGD ascends.
    const double num = (cfg.w_grad * (up.cvi_term - dn.cvi_term) -
                        cfg.w_ssim * (up.ssim_term - dn.ssim_term) -
                        cfg.w_tv * (up.tv_term - dn.tv_term)) /
                       (2 * h);
    if (rel_err(cfg.w_grad * up.cvi_term - cfg.w_grad * dn.cvi_term, 0) == 0 &&
        std::abs(num) < 1e-8)
      continue;
    CHECK(rel_err(g.at(x, y), num) < 1e-4);
    ++checked;
  }
  CHECK(checked >= 10);
}

TEST_CASE("zero budget returns identically-zero perturbations") {
  const auto sc = attack_scene();
  auto cfg = quick_config();
  cfg.epsilon = 0;
  cfg.alpha = 0;
  const auto result = pgd_attack(sc, cfg);
  const auto clean = scene::render_all_views(sc);
  const auto poisoned = apply_perturbations(clean, result.perturbations);
  for (int v = 0; v < sc.num_views(); ++v) {
    CHECK(poisoned[v].data == clean[v].data);
    for (double d : result.perturbations.deltas[v].data) CHECK(d == 0.0);
  }
  CHECK(result.loss_trace.empty());
}

TEST_CASE("perturbations respect the l-infinity budget exactly") {
  const auto sc = attack_scene();
  const auto cfg = quick_config();
  const auto result = pgd_attack(sc, cfg);
  const auto& pset = result.perturbations;
  REQUIRE(pset.poison_set.size() == 4);  // round(0.6 * 6)
  const auto clean = scene::render_all_views(sc);
  double max_abs = 0;
  for (int v = 0; v < sc.num_views(); ++v) {
    const bool poisoned_view = pset.is_poisoned(v);
    for (size_t i = 0; i < pset.deltas[v].size(); ++i) {
      const double d = pset.deltas[v].data[i];
      if (!poisoned_view) {
        CHECK(d == 0.0);
        continue;
      }
      CHECK(std::abs(d) <= cfg.epsilon + 1e-12);
      max_abs = std::max(max_abs, std::abs(d));
      const double v01 = clean[v].data[i] + d;
      CHECK(v01 >= -1e-12);
      CHECK(v01 <= 1 + 1e-12);
    }
  }
  CHECK(max_abs > 0.9 * cfg.epsilon);  // the budget is actually used

  AttackConfig bad = cfg;
  bad.alpha = 2 * bad.epsilon;
  CHECK_THROWS_AS(pgd_attack(sc, bad), ValidationError);
}

TEST_CASE("pgd attack is deterministic and climbs the objective") {
  const auto sc = attack_scene();
  const auto cfg = quick_config(9);
  const auto r1 = pgd_attack(sc, cfg);
  const auto r2 = pgd_attack(sc, cfg);
  REQUIRE(r1.loss_trace.size() == r2.loss_trace.size());
  for (size_t i = 0; i < r1.loss_trace.size(); ++i) CHECK(r1.loss_trace[i] == r2.loss_trace[i]);
  for (int v : r1.perturbations.poison_set)
    CHECK(r1.perturbations.deltas[v].data == r2.perturbations.deltas[v].data);
  REQUIRE(r1.loss_trace.size() >= 10);
  CHECK(r1.loss_trace.back() > r1.loss_trace.front());
}

TEST_CASE("pgd drives cross-view inconsistency above the uniform-noise baseline") {
  const auto sc = attack_scene(2);
  const auto cfg = quick_config(2);
  const auto result = pgd_attack(sc, cfg);
  REQUIRE(!result.final_correspondences.empty());

  const auto clean = scene::render_all_views(sc);
  const auto pgd_views = apply_perturbations(clean, result.perturbations);

  // Uniform noise at the same budget on the same poison set.
  auto noise_views = clean;
  for (int k : result.perturbations.poison_set) {
    Rng rng(hash_combine(777, static_cast<uint64_t>(k)));
    for (double& v : noise_views[k].data)
      v = std::clamp(v + rng_uniform(rng, -cfg.epsilon, cfg.epsilon), 0.0, 1.0);
  }

  const double cvi_pgd =
      cvi_loss(pgd_views, result.final_correspondences, cfg.patch_radius, false).loss;
  const double cvi_noise =
      cvi_loss(noise_views, result.final_correspondences, cfg.patch_radius, false).loss;
  const double cvi_clean =
      cvi_loss(clean, result.final_correspondences, cfg.patch_radius, false).loss;
  CHECK(result.final_cvi == doctest::Approx(cvi_pgd));
  CHECK(cvi_pgd > cvi_noise);
  CHECK(cvi_noise > cvi_clean);
}
