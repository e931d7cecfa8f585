#pragma once

#include <map>
#include <vector>

#include "sfmlab/core.hpp"
#include "sfmlab/imaging.hpp"
#include "sfmlab/scene.hpp"

namespace sfmlab::attack {

using scene::GroundTruthCorrespondence;
using scene::MultiViewScene;

// Per-view additive perturbations under an l-infinity budget. Reference views
// carry identically-zero deltas.
struct PerturbationSet {
  std::vector<ImageBuffer> deltas;  // one plane per view
  double epsilon = 16.0 / 255.0;
  std::vector<int> poison_set;      // A
  std::vector<int> reference_set;   // R
  double poison_ratio = 0.6;

  bool is_poisoned(int view) const {
    for (int v : poison_set)
      if (v == view) return true;
    return false;
  }
};

struct AttackConfig {
  double epsilon = 16.0 / 255.0;
  double alpha = 2.0 / 255.0;   // PGD step size
  int inner_steps = 15;
  int outer_iters = 100;        // desk-scale default; full-scale runs use 1000
  int refresh_period = 10;      // resample correspondences every K outer iters
  double w_grad = 1.0;
  double w_ssim = 0.5;
  double w_tv = 0.1;
  double poison_ratio = 0.6;
  int patch_radius = 8;
  int pairs_per_poison = 2;     // reference views paired with each poisoned view
  int corr_per_pair = 96;
  uint64_t seed = 0;
};

// Uniform random poison subset of size round(r * N); remainder is the
// reference set. Deterministic per seed.
inline std::pair<std::vector<int>, std::vector<int>> select_poison_set(int num_views,
                                                                       double ratio,
                                                                       uint64_t seed) {
  if (ratio <= 0 || ratio >= 1)
    throw ValidationError("select_poison_set: ratio must be in (0,1)");
  const int size = static_cast<int>(std::lround(ratio * num_views));
  if (size < 1 || size > num_views - 1)
    throw ValidationError("select_poison_set: degenerate ratio leaves no reference view");
  std::vector<int> order(num_views);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(hash_combine(seed, 0xA7735Eu));
  for (int i = num_views - 1; i > 0; --i)
    std::swap(order[i], order[rng_index(rng, i + 1)]);
  std::vector<int> A(order.begin(), order.begin() + size);
  std::vector<int> R(order.begin() + size, order.end());
  std::sort(A.begin(), A.end());
  std::sort(R.begin(), R.end());
  return {A, R};
}

struct CviEvaluation {
  double loss = 0;  // mean of per-correspondence patch L1 terms
  std::vector<double> per_correspondence;
  std::map<int, ImageBuffer> gradients;  // per poisoned view, dL/d(pixels)
};

// Cross-view inconsistency: L1 difference of Sobel gradient patches at
// corresponding locations between a reference view (view_a) and a poisoned
// view (view_b). Analytic gradient via the transposed Sobel convolution with
// sign(0) = 0.
inline CviEvaluation cvi_loss(const std::vector<ImageBuffer>& views,
                              const std::vector<GroundTruthCorrespondence>& correspondences,
                              int patch_radius, bool with_gradients = true) {
  if (correspondences.empty()) throw ValidationError("cvi_loss: empty correspondence set");
  const int r = patch_radius;
  std::map<int, imaging::GradientField> grads;
  auto grad_of = [&](int v) -> const imaging::GradientField& {
    auto it = grads.find(v);
    if (it == grads.end()) it = grads.emplace(v, imaging::sobel_gradients(views[v])).first;
    return it->second;
  };

  CviEvaluation eval;
  const double inv_n = 1.0 / static_cast<double>(correspondences.size());
  std::map<int, std::pair<ImageBuffer, ImageBuffer>> sign_planes;  // per poisoned view
  auto sgn = [](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); };

  for (const auto& c : correspondences) {
    const auto& ga = grad_of(c.view_a);
    const auto& gb = grad_of(c.view_b);
    const int ax = static_cast<int>(std::lround(c.pixel_a.x()));
    const int ay = static_cast<int>(std::lround(c.pixel_a.y()));
    const int bx = static_cast<int>(std::lround(c.pixel_b.x()));
    const int by = static_cast<int>(std::lround(c.pixel_b.y()));
    const auto& img = views[c.view_b];
    if (ax < r || ay < r || ax >= ga.width() - r || ay >= ga.height() - r || bx < r ||
        by < r || bx >= gb.width() - r || by >= gb.height() - r)
      throw ValidationError("cvi_loss: correspondence violates the patch border margin");

    std::pair<ImageBuffer, ImageBuffer>* planes = nullptr;
    if (with_gradients) {
      auto it = sign_planes.find(c.view_b);
      if (it == sign_planes.end())
        it = sign_planes
                 .emplace(c.view_b, std::make_pair(ImageBuffer(img.width, img.height),
                                                   ImageBuffer(img.width, img.height)))
                 .first;
      planes = &it->second;
    }

    double term = 0;
    for (int dy = -r; dy <= r; ++dy)
      for (int dx = -r; dx <= r; ++dx) {
        const double ddx = ga.gx.at(ax + dx, ay + dy) - gb.gx.at(bx + dx, by + dy);
        const double ddy = ga.gy.at(ax + dx, ay + dy) - gb.gy.at(bx + dx, by + dy);
        term += std::abs(ddx) + std::abs(ddy);
        if (planes) {
          planes->first.at(bx + dx, by + dy) += -sgn(ddx) * inv_n;
          planes->second.at(bx + dx, by + dy) += -sgn(ddy) * inv_n;
        }
      }
    eval.per_correspondence.push_back(term);
    eval.loss += term * inv_n;
  }
  if (with_gradients)
    for (auto& [v, planes] : sign_planes)
      eval.gradients[v] = imaging::sobel_adjoint(planes.first, planes.second);
  return eval;
}

struct ObjectiveEvaluation {
  double value = 0;
  double cvi_term = 0;
  double ssim_term = 0;  // mean over A of 1 - SSIM(poisoned, clean)
  double tv_term = 0;    // mean over A of TV(poisoned)
  std::map<int, ImageBuffer> gradients;  // d(objective)/d(poisoned pixels)
};

// Weighted surrogate: w_grad * CVI - w_ssim * (1 - SSIM) - w_tv * TV, the
// regularizers averaged over the poisoned subset.
inline ObjectiveEvaluation surrogate_objective(
    const std::vector<ImageBuffer>& poisoned_views, const std::vector<ImageBuffer>& clean_views,
    const std::vector<int>& poison_set,
    const std::vector<GroundTruthCorrespondence>& correspondences, const AttackConfig& cfg) {
  ObjectiveEvaluation out;
  const double inv_a = poison_set.empty() ? 0.0 : 1.0 / static_cast<double>(poison_set.size());

  CviEvaluation cvi;
  if (cfg.w_grad != 0) {
    cvi = cvi_loss(poisoned_views, correspondences, cfg.patch_radius, true);
    out.cvi_term = cvi.loss;
  }

  for (int k : poison_set) {
    ImageBuffer g(poisoned_views[k].width, poisoned_views[k].height);
    if (cfg.w_grad != 0) {
      auto it = cvi.gradients.find(k);
      if (it != cvi.gradients.end())
        for (size_t i = 0; i < g.size(); ++i) g.data[i] += cfg.w_grad * it->second.data[i];
    }
    ImageBuffer ssim_grad;
    const double s = imaging::ssim(clean_views[k], poisoned_views[k], &ssim_grad);
    out.ssim_term += (1.0 - s) * inv_a;
    ImageBuffer tv_grad;
    const double tv = imaging::total_variation(poisoned_views[k], &tv_grad);
    out.tv_term += tv * inv_a;
    for (size_t i = 0; i < g.size(); ++i)
      g.data[i] += inv_a * (cfg.w_ssim * ssim_grad.data[i] - cfg.w_tv * tv_grad.data[i]);
    out.gradients[k] = std::move(g);
  }
  out.value = cfg.w_grad * out.cvi_term - cfg.w_ssim * out.ssim_term - cfg.w_tv * out.tv_term;
  return out;
}

inline std::vector<ImageBuffer> apply_perturbations(const std::vector<ImageBuffer>& clean,
                                                    const PerturbationSet& pset,
                                                    double scale = 1.0) {
  std::vector<ImageBuffer> out = clean;
  for (int k : pset.poison_set) {
    for (size_t i = 0; i < out[k].size(); ++i)
      out[k].data[i] = std::clamp(clean[k].data[i] + scale * pset.deltas[k].data[i], 0.0, 1.0);
  }
  return out;
}

struct AttackResult {
  PerturbationSet perturbations;
  std::vector<double> loss_trace;             // objective after every inner step
  std::vector<GroundTruthCorrespondence> final_correspondences;
  double final_cvi = 0;
};

namespace detail {

// Reference views paired with a poisoned view: most shared patches first,
// ties to the nearer view index.
inline std::vector<int> pick_reference_views(const MultiViewScene& sc, int poison_view,
                                             const std::vector<int>& reference_set,
                                             int count) {
  std::vector<std::pair<int, int>> scored;  // (-shared, |index gap|) ascending
  std::vector<int> picked;
  std::vector<std::tuple<int, int, int>> rank;
  for (int rv : reference_set) {
    const int shared = static_cast<int>(scene::shared_patches(sc, rv, poison_view).size());
    if (shared == 0) continue;
    rank.push_back({-shared, std::abs(rv - poison_view), rv});
  }
  std::sort(rank.begin(), rank.end());
  for (const auto& [ns, gap, rv] : rank) {
    picked.push_back(rv);
    if (static_cast<int>(picked.size()) >= count) break;
  }
  return picked;
}

inline std::vector<GroundTruthCorrespondence> sample_attack_correspondences(
    const MultiViewScene& sc, const std::vector<int>& poison_set,
    const std::vector<int>& reference_set, const AttackConfig& cfg, uint64_t salt) {
  std::vector<GroundTruthCorrespondence> all;
  const double margin = cfg.patch_radius + 2.0;
  for (int pj : poison_set) {
    for (int ri : pick_reference_views(sc, pj, reference_set, cfg.pairs_per_poison)) {
      const auto shared = scene::shared_patches(sc, ri, pj);
      if (shared.empty()) continue;
      const int per_patch =
          std::max(1, (cfg.corr_per_pair + static_cast<int>(shared.size()) - 1) /
                          static_cast<int>(shared.size()));
      auto corrs = scene::ground_truth_correspondences(sc, ri, pj, per_patch, margin,
                                                       hash_combine(salt, cfg.seed));
      if (static_cast<int>(corrs.size()) > cfg.corr_per_pair)
        corrs.resize(cfg.corr_per_pair);
      all.insert(all.end(), corrs.begin(), corrs.end());
    }
  }
  return all;
}

}  // namespace detail

// Proxy-guided PGD: random init inside the l-infinity ball, sign-gradient
// ascent on the surrogate, hard projection onto the budget and [0,1] after
// every step, correspondence refresh every refresh_period outer iterations.
inline AttackResult pgd_attack(const MultiViewScene& sc, const AttackConfig& cfg) {
  if (cfg.alpha > cfg.epsilon && cfg.epsilon > 0)
    throw ValidationError("pgd_attack: step size exceeds the budget");
  const std::vector<ImageBuffer> clean = scene::render_all_views(sc);
  const int n = sc.num_views();

  AttackResult result;
  auto& pset = result.perturbations;
  auto [A, R] = select_poison_set(n, cfg.poison_ratio, cfg.seed);
  pset.poison_set = A;
  pset.reference_set = R;
  pset.poison_ratio = cfg.poison_ratio;
  pset.epsilon = cfg.epsilon;
  pset.deltas.assign(n, ImageBuffer(sc.image_width, sc.image_height));

  if (cfg.epsilon <= 0) return result;

  std::vector<ImageBuffer> poisoned = clean;
  for (int k : A) {
    Rng rng(hash_combine(cfg.seed, 0x1217u + static_cast<uint64_t>(k)));
    for (size_t i = 0; i < poisoned[k].size(); ++i) {
      const double d = rng_uniform(rng, -cfg.epsilon, cfg.epsilon);
      poisoned[k].data[i] = std::clamp(clean[k].data[i] + d, 0.0, 1.0);
    }
  }

  std::vector<GroundTruthCorrespondence> corrs;
  for (int t = 0; t < cfg.outer_iters; ++t) {
    if (t % cfg.refresh_period == 0)
      corrs = detail::sample_attack_correspondences(sc, A, R, cfg, static_cast<uint64_t>(t));
    if (corrs.empty()) break;
    for (int step = 0; step < cfg.inner_steps; ++step) {
      const auto obj = surrogate_objective(poisoned, clean, A, corrs, cfg);
      result.loss_trace.push_back(obj.value);
      for (int k : A) {
        const auto& g = obj.gradients.at(k);
        for (size_t i = 0; i < poisoned[k].size(); ++i) {
          const double s = g.data[i] > 0 ? 1.0 : (g.data[i] < 0 ? -1.0 : 0.0);
          double v = poisoned[k].data[i] + cfg.alpha * s;
          v = std::clamp(v, clean[k].data[i] - cfg.epsilon, clean[k].data[i] + cfg.epsilon);
          poisoned[k].data[i] = std::clamp(v, 0.0, 1.0);
        }
      }
    }
  }

  // Stored deltas always reflect the effective (clipped) perturbation.
  for (int k : A)
    for (size_t i = 0; i < poisoned[k].size(); ++i)
      pset.deltas[k].data[i] = poisoned[k].data[i] - clean[k].data[i];

  if (!corrs.empty()) {
    result.final_correspondences = corrs;
    result.final_cvi = cvi_loss(poisoned, corrs, cfg.patch_radius, false).loss;
  }
  return result;
}

}  // namespace sfmlab::attack
