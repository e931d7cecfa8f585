#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <tuple>
#include <vector>

#include "sfmlab/core.hpp"

namespace sfmlab::imaging {

// Sobel gradient pair of an image: gx = horizontal derivative, gy = vertical.
struct GradientField {
  ImageBuffer gx;
  ImageBuffer gy;

  int width() const { return gx.width; }
  int height() const { return gx.height; }
};

// 3x3 Sobel kernels, no normalization, replicate border padding.
//   gx kernel: [-1 0 1; -2 0 2; -1 0 1]   gy = transpose.
inline GradientField sobel_gradients(const ImageBuffer& img) {
  if (img.width < 3 || img.height < 3)
    throw ValidationError("sobel_gradients: image must be at least 3x3");
  GradientField g{ImageBuffer(img.width, img.height), ImageBuffer(img.width, img.height)};
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double a = img.at_clamped(x - 1, y - 1), b = img.at_clamped(x, y - 1),
                   c = img.at_clamped(x + 1, y - 1);
      const double d = img.at_clamped(x - 1, y), f = img.at_clamped(x + 1, y);
      const double h = img.at_clamped(x - 1, y + 1), i = img.at_clamped(x, y + 1),
                   j = img.at_clamped(x + 1, y + 1);
      g.gx.at(x, y) = (c + 2 * f + j) - (a + 2 * d + h);
      g.gy.at(x, y) = (h + 2 * i + j) - (a + 2 * b + c);
    }
  }
  return g;
}

// Adjoint of sobel_gradients under the replicate-padded convolution: maps
// (dL/dgx, dL/dgy) to dL/dimage. Exact transpose, so analytic gradients of
// losses built on Sobel fields match finite differences.
inline ImageBuffer sobel_adjoint(const ImageBuffer& dgx, const ImageBuffer& dgy) {
  ImageBuffer out(dgx.width, dgx.height);
  const int w = dgx.width, h = dgx.height;
  auto scatter = [&](int x, int y, double v) {
    out.at(std::clamp(x, 0, w - 1), std::clamp(y, 0, h - 1)) += v;
  };
  static const int off[9][2] = {{-1, -1}, {0, -1}, {1, -1}, {-1, 0}, {0, 0},
                                {1, 0},   {-1, 1}, {0, 1},  {1, 1}};
  static const double kx[9] = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
  static const double ky[9] = {-1, -2, -1, 0, 0, 0, 1, 2, 1};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double vx = dgx.at(x, y), vy = dgy.at(x, y);
      if (vx == 0.0 && vy == 0.0) continue;
      for (int k = 0; k < 9; ++k)
        scatter(x + off[k][0], y + off[k][1], kx[k] * vx + ky[k] * vy);
    }
  return out;
}

inline constexpr int kSsimWindow = 8;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

namespace detail {

// Sliding-window box sums (window kSsimWindow, stride 1, fully-inside windows)
// via an integral image. Result has (w-7)x(h-7) entries.
inline std::vector<double> box_sums(const ImageBuffer& img, int win) {
  const int w = img.width, h = img.height;
  std::vector<double> integral(static_cast<size_t>(w + 1) * (h + 1), 0.0);
  auto I = [&](int x, int y) -> double& {
    return integral[static_cast<size_t>(y) * (w + 1) + x];
  };
  for (int y = 1; y <= h; ++y)
    for (int x = 1; x <= w; ++x)
      I(x, y) = img.at(x - 1, y - 1) + I(x - 1, y) + I(x, y - 1) - I(x - 1, y - 1);
  const int ow = w - win + 1, oh = h - win + 1;
  std::vector<double> out(static_cast<size_t>(ow) * oh);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x)
      out[static_cast<size_t>(y) * ow + x] =
          I(x + win, y + win) - I(x, y + win) - I(x + win, y) + I(x, y);
  return out;
}

inline ImageBuffer product(const ImageBuffer& a, const ImageBuffer& b) {
  ImageBuffer out(a.width, a.height);
  for (size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] * b.data[i];
  return out;
}

// Scatter per-window coefficients back to pixels: out(p) = sum over windows
// containing p of coeff(window). Done by box-summing the coefficient grid.
inline ImageBuffer window_to_pixel(const std::vector<double>& coeff, int w, int h, int win) {
  const int ow = w - win + 1, oh = h - win + 1;
  ImageBuffer out(w, h);
  // Pad coefficients into a (w x h) grid at window origins, then box-sum the
  // reversed window: pixel p belongs to windows with origin in
  // [p-win+1, p] intersected with valid origins.
  std::vector<double> integral(static_cast<size_t>(ow + 1) * (oh + 1), 0.0);
  auto I = [&](int x, int y) -> double& {
    return integral[static_cast<size_t>(y) * (ow + 1) + x];
  };
  for (int y = 1; y <= oh; ++y)
    for (int x = 1; x <= ow; ++x)
      I(x, y) = coeff[static_cast<size_t>(y - 1) * ow + (x - 1)] + I(x - 1, y) +
                I(x, y - 1) - I(x - 1, y - 1);
  for (int y = 0; y < h; ++y) {
    const int y0 = std::clamp(y - win + 1, 0, oh), y1 = std::clamp(y + 1, 0, oh);
    for (int x = 0; x < w; ++x) {
      const int x0 = std::clamp(x - win + 1, 0, ow), x1 = std::clamp(x + 1, 0, ow);
      if (x1 <= x0 || y1 <= y0) continue;
      out.at(x, y) = I(x1, y1) - I(x0, y1) - I(x1, y0) + I(x0, y0);
    }
  }
  return out;
}

}  // namespace detail

// Mean SSIM over 8x8 uniform sliding windows on the [0,1] dynamic range.
// If grad_b is non-null it receives d(mean SSIM)/d(b pixels).
inline double ssim(const ImageBuffer& a, const ImageBuffer& b,
                   ImageBuffer* grad_b = nullptr) {
  if (!a.same_size(b)) throw ValidationError("ssim: dimension mismatch");
  const int win = kSsimWindow;
  if (a.width < win || a.height < win)
    throw ValidationError("ssim: image smaller than the SSIM window");
  const int w = a.width, h = a.height;
  const int ow = w - win + 1, oh = h - win + 1;
  const double n = static_cast<double>(win) * win;

  const auto sa = detail::box_sums(a, win);
  const auto sb = detail::box_sums(b, win);
  const auto saa = detail::box_sums(detail::product(a, a), win);
  const auto sbb = detail::box_sums(detail::product(b, b), win);
  const auto sab = detail::box_sums(detail::product(a, b), win);

  const size_t num_win = static_cast<size_t>(ow) * oh;
  std::vector<double> c_const, c_b, c_a;
  if (grad_b) {
    c_const.assign(num_win, 0.0);
    c_b.assign(num_win, 0.0);
    c_a.assign(num_win, 0.0);
  }

  double total = 0.0;
  for (size_t i = 0; i < num_win; ++i) {
    const double mx = sa[i] / n, my = sb[i] / n;
    const double vx = saa[i] / n - mx * mx;
    const double vy = sbb[i] / n - my * my;
    const double cxy = sab[i] / n - mx * my;
    const double A1 = 2 * mx * my + kSsimC1, A2 = 2 * cxy + kSsimC2;
    const double B1 = mx * mx + my * my + kSsimC1, B2 = vx + vy + kSsimC2;
    const double S = (A1 * A2) / (B1 * B2);
    total += S;
    if (grad_b) {
      const double dS_dmy = 2 * mx * A2 / (B1 * B2) - 2 * my * A1 * A2 / (B1 * B1 * B2);
      const double dS_dvy = -A1 * A2 / (B1 * B2 * B2);
      const double dS_dcxy = 2 * A1 / (B1 * B2);
      // d/dbp of (my, vy, cxy): (1/n, 2(bp-my)/n, (ap-mx)/n)
      c_const[i] = (dS_dmy - dS_dvy * 2 * my - dS_dcxy * mx) / n;
      c_b[i] = dS_dvy * 2 / n;
      c_a[i] = dS_dcxy / n;
    }
  }
  const double mean = total / static_cast<double>(num_win);

  if (grad_b) {
    const double scale = 1.0 / static_cast<double>(num_win);
    ImageBuffer g0 = detail::window_to_pixel(c_const, w, h, win);
    ImageBuffer gb = detail::window_to_pixel(c_b, w, h, win);
    ImageBuffer ga = detail::window_to_pixel(c_a, w, h, win);
    *grad_b = ImageBuffer(w, h);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        grad_b->at(x, y) =
            scale * (g0.at(x, y) + gb.at(x, y) * b.at(x, y) + ga.at(x, y) * a.at(x, y));
  }
  return mean;
}

// Anisotropic total variation, normalized by pixel count.
// If grad is non-null it receives the subgradient (sign at kinks = 0).
inline double total_variation(const ImageBuffer& img, ImageBuffer* grad = nullptr) {
  if (img.width < 2 || img.height < 2)
    throw ValidationError("total_variation: image must be at least 2x2");
  const int w = img.width, h = img.height;
  const double norm = 1.0 / (static_cast<double>(w) * h);
  if (grad) *grad = ImageBuffer(w, h);
  double total = 0.0;
  auto sgn = [](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (x + 1 < w) {
        const double d = img.at(x + 1, y) - img.at(x, y);
        total += std::abs(d);
        if (grad) {
          const double s = sgn(d) * norm;
          grad->at(x + 1, y) += s;
          grad->at(x, y) -= s;
        }
      }
      if (y + 1 < h) {
        const double d = img.at(x, y + 1) - img.at(x, y);
        total += std::abs(d);
        if (grad) {
          const double s = sgn(d) * norm;
          grad->at(x, y + 1) += s;
          grad->at(x, y) -= s;
        }
      }
    }
  return total * norm;
}

// PSNR in dB on the [0,1] range; +inf sentinel for identical inputs.
inline double psnr(const ImageBuffer& a, const ImageBuffer& b) {
  if (!a.same_size(b)) throw ValidationError("psnr: dimension mismatch");
  double mse = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

struct Keypoint {
  double x = 0;
  double y = 0;
  double response = 0;
  int patch_radius = 8;
};

struct DetectConfig {
  double harris_k = 0.04;
  int nms_radius = 2;          // 5x5 non-max suppression
  double rel_threshold = 1e-3; // response floor relative to max response
  double abs_threshold = 1e-9;
  int patch_radius = 8;
  int smooth_passes = 2;       // 3x3 binomial pre-smoothing (scale-space proxy)
};

// Repeated 3x3 binomial smoothing with replicate padding; the detection /
// description scale-space base that suppresses per-pixel noise.
inline ImageBuffer binomial_smooth(const ImageBuffer& img, int passes) {
  ImageBuffer cur = img;
  static const double k[3] = {0.25, 0.5, 0.25};
  for (int p = 0; p < passes; ++p) {
    ImageBuffer next(cur.width, cur.height);
    for (int y = 0; y < cur.height; ++y)
      for (int x = 0; x < cur.width; ++x) {
        double s = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx)
            s += k[dx + 1] * k[dy + 1] * cur.at_clamped(x + dx, y + dy);
        next.at(x, y) = s;
      }
    cur = std::move(next);
  }
  return cur;
}

// Gradient field used by detection and description: Sobel on the smoothed
// image. The attack loss and the consistency statistic stay on raw gradients.
inline GradientField feature_gradients(const ImageBuffer& img, const DetectConfig& cfg = {}) {
  return sobel_gradients(cfg.smooth_passes > 0 ? binomial_smooth(img, cfg.smooth_passes) : img);
}

// Harris corners: 3x3 structure-tensor window over Sobel gradients, 5x5 NMS,
// subpixel refinement by quadratic fit, deterministic order
// (response desc, then y, then x). Empty output on featureless images.
inline std::vector<Keypoint> detect_keypoints(const ImageBuffer& img, int max_count,
                                              const DetectConfig& cfg = {}) {
  const int r = cfg.patch_radius;
  if (img.width < 2 * r + 3 || img.height < 2 * r + 3)
    throw ValidationError("detect_keypoints: image too small for patch radius");
  const GradientField g = feature_gradients(img, cfg);
  const int w = img.width, h = img.height;
  ImageBuffer resp(w, h);
  double max_resp = 0.0;
  for (int y = 1; y + 1 < h; ++y)
    for (int x = 1; x + 1 < w; ++x) {
      double sxx = 0, syy = 0, sxy = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const double gx = g.gx.at(x + dx, y + dy), gy = g.gy.at(x + dx, y + dy);
          sxx += gx * gx;
          syy += gy * gy;
          sxy += gx * gy;
        }
      const double det = sxx * syy - sxy * sxy;
      const double tr = sxx + syy;
      const double R = det - cfg.harris_k * tr * tr;
      resp.at(x, y) = R;
      max_resp = std::max(max_resp, R);
    }
  const double threshold = std::max(cfg.abs_threshold, cfg.rel_threshold * max_resp);

  std::vector<Keypoint> kps;
  const int margin = r + 1;  // descriptor needs bilinear support inside the image
  for (int y = margin; y < h - margin; ++y)
    for (int x = margin; x < w - margin; ++x) {
      const double R = resp.at(x, y);
      if (R <= threshold) continue;
      bool is_max = true;
      for (int dy = -cfg.nms_radius; dy <= cfg.nms_radius && is_max; ++dy)
        for (int dx = -cfg.nms_radius; dx <= cfg.nms_radius; ++dx) {
          if (dx == 0 && dy == 0) continue;
          const int nx = x + dx, ny = y + dy;
          if (nx < 1 || ny < 1 || nx >= w - 1 || ny >= h - 1) continue;
          const double Rn = resp.at(nx, ny);
          // Strict tie-break by scan order keeps NMS deterministic.
          if (Rn > R || (Rn == R && (dy < 0 || (dy == 0 && dx < 0)))) {
            is_max = false;
            break;
          }
        }
      if (!is_max) continue;
      // Subpixel: 1D quadratic fits along x and y on the response.
      double ox = 0, oy = 0;
      const double dxx = resp.at(x + 1, y) - 2 * R + resp.at(x - 1, y);
      const double dyy = resp.at(x, y + 1) - 2 * R + resp.at(x, y - 1);
      if (dxx < 0) ox = std::clamp(-0.5 * (resp.at(x + 1, y) - resp.at(x - 1, y)) / dxx, -0.5, 0.5);
      if (dyy < 0) oy = std::clamp(-0.5 * (resp.at(x, y + 1) - resp.at(x, y - 1)) / dyy, -0.5, 0.5);
      kps.push_back({x + ox, y + oy, R, r});
    }
  std::sort(kps.begin(), kps.end(), [](const Keypoint& a, const Keypoint& b) {
    if (a.response != b.response) return a.response > b.response;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });
  if (max_count >= 0 && static_cast<int>(kps.size()) > max_count) kps.resize(max_count);
  return kps;
}

// Patch-restricted L1 distance between two gradient fields around integer
// centers; the statistic both the consistency bound and the attack loss use.
inline double patch_gradient_l1(const GradientField& ga, int ax, int ay,
                                const GradientField& gb, int bx, int by, int r) {
  if (ax < r || ay < r || ax >= ga.width() - r || ay >= ga.height() - r || bx < r || by < r ||
      bx >= gb.width() - r || by >= gb.height() - r)
    throw ValidationError("patch_gradient_l1: patch violates border margin");
  double sum = 0;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      sum += std::abs(ga.gx.at(ax + dx, ay + dy) - gb.gx.at(bx + dx, by + dy)) +
             std::abs(ga.gy.at(ax + dx, ay + dy) - gb.gy.at(bx + dx, by + dy));
  return sum;
}

inline constexpr int kDescriptorDim = 128;

struct Descriptor {
  std::array<double, kDescriptorDim> values{};

  double distance(const Descriptor& o) const {
    double s = 0;
    for (int i = 0; i < kDescriptorDim; ++i) {
      const double d = values[i] - o.values[i];
      s += d * d;
    }
    return std::sqrt(s);
  }
};

// SIFT-like descriptor on a (2r)x(2r) gradient patch: 4x4 spatial cells x
// 8 orientation bins, magnitude-weighted with bilinear binning across
// orientation only, L2-normalized, clamped at 0.2, renormalized.
// Zero-gradient patches map to the uniform unit vector by convention.
inline Descriptor extract_descriptor(const GradientField& grad, const Keypoint& kp) {
  const int r = kp.patch_radius;
  const int n = 2 * r;  // samples per side
  if (kp.x < r || kp.y < r || kp.x > grad.width() - 1 - r || kp.y > grad.height() - 1 - r)
    throw ValidationError("extract_descriptor: keypoint violates border margin");
  Descriptor desc;
  const double cell = n / 4.0;
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) {
      const double sx = kp.x + (i - r + 0.5);
      const double sy = kp.y + (j - r + 0.5);
      const double gx = grad.gx.sample_bilinear(sx, sy);
      const double gy = grad.gy.sample_bilinear(sx, sy);
      const double mag = std::hypot(gx, gy);
      if (mag <= 0) continue;
      double ori = std::atan2(gy, gx);  // [-pi, pi]
      double bin = (ori + M_PI) / (2 * M_PI) * 8.0;  // [0, 8]
      const int cx = std::min(static_cast<int>(i / cell), 3);
      const int cy = std::min(static_cast<int>(j / cell), 3);
      const int b0 = static_cast<int>(std::floor(bin - 0.5));  // bin centers at k+0.5
      const double f = bin - 0.5 - b0;
      const int base = (cy * 4 + cx) * 8;
      desc.values[base + ((b0 % 8) + 8) % 8] += mag * (1 - f);
      desc.values[base + (((b0 + 1) % 8) + 8) % 8] += mag * f;
    }
  }
  double norm = 0;
  for (double v : desc.values) norm += v * v;
  norm = std::sqrt(norm);
  if (norm < 1e-12) {
    const double u = 1.0 / std::sqrt(static_cast<double>(kDescriptorDim));
    desc.values.fill(u);
    return desc;
  }
  for (double& v : desc.values) v = std::min(v / norm, 0.2);
  norm = 0;
  for (double v : desc.values) norm += v * v;
  norm = std::sqrt(norm);
  for (double& v : desc.values) v /= norm;
  return desc;
}

}  // namespace sfmlab::imaging
