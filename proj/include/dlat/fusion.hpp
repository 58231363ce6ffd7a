#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "dlat/datamodel.hpp"
#include "dlat/imgnet.hpp"
#include "dlat/lmknet.hpp"
#include "dlat/mapper.hpp"

// DLAT+ composition: estimate the landmark-to-landmark transform produced
// by the geometry network and warp the appearance network's output by it.

namespace dlat {

// Least-squares 2x3 affine A minimizing sum ||A [x,y,1]^T - d||^2 over the
// 81 correspondences. Coordinates are (x, y) = (column, row).
inline Tensor estimate_warp(const LandmarkSet& l_src, const LandmarkSet& l_dst) {
  l_src.check();
  l_dst.check();
  EMatrix X(kLandmarkCount, 3), D(kLandmarkCount, 2);
  for (int i = 0; i < kLandmarkCount; ++i) {
    X(i, 0) = l_src.points[2 * i];
    X(i, 1) = l_src.points[2 * i + 1];
    X(i, 2) = 1.0;
    D(i, 0) = l_dst.points[2 * i];
    D(i, 1) = l_dst.points[2 * i + 1];
  }
  EMatrix G = X.transpose() * X;
  Eigen::FullPivLU<EMatrix> lu(G);
  lu.setThreshold(1e-10);
  if (lu.rank() < 3)
    throw NumericalError("estimate_warp: source landmarks are collinear (rank-deficient)");
  EMatrix B = lu.solve(X.transpose() * D);  // [3, 2]
  Tensor a({2, 3});
  a.mat(2, 3) = B.transpose();
  return a;
}

namespace detail {

inline double sample_clamped(const Tensor& pixels, int64_t c, double y, double x) {
  const int64_t h = pixels.dim(1), w = pixels.dim(2);
  const double xc = std::min(std::max(x, 0.0), static_cast<double>(w - 1));
  const double yc = std::min(std::max(y, 0.0), static_cast<double>(h - 1));
  const int64_t x0 = static_cast<int64_t>(std::floor(xc));
  const int64_t y0 = static_cast<int64_t>(std::floor(yc));
  const int64_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  const double fx = xc - static_cast<double>(x0), fy = yc - static_cast<double>(y0);
  auto at = [&](int64_t yy, int64_t xx) { return pixels[(c * h + yy) * w + xx]; };
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
         fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
}

}  // namespace detail

// Warps the image so that a point at p in the source appears at A*p in the
// output: inverse-mapped bilinear resampling with edge-clamp padding.
inline FaceImage apply_warp(const FaceImage& img, const Tensor& a) {
  img.check();
  if (a.shape != std::vector<int64_t>{2, 3}) throw DomainError("warp matrix must be 2x3");
  for (double v : a.data)
    if (!std::isfinite(v)) throw NumericalError("apply_warp: non-finite warp matrix");
  const double det = a[0] * a[4] - a[1] * a[3];
  if (std::abs(det) < 1e-8) throw NumericalError("apply_warp: warp is not invertible");
  // Inverse of [L | t]: p_src = L^-1 (p_dst - t).
  const double i00 = a[4] / det, i01 = -a[1] / det, i10 = -a[3] / det, i11 = a[0] / det;
  const int64_t s = img.side();
  FaceImage out{Tensor({3, s, s})};
  out.group = img.group;
  out.gender = img.gender;
  for (int64_t y = 0; y < s; ++y)
    for (int64_t x = 0; x < s; ++x) {
      const double dx = static_cast<double>(x) - a[2];
      const double dy = static_cast<double>(y) - a[5];
      const double sx = i00 * dx + i01 * dy;
      const double sy = i10 * dx + i11 * dy;
      for (int64_t c = 0; c < 3; ++c)
        out.pixels[(c * s + y) * s + x] = detail::sample_clamped(img.pixels, c, sy, sx);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Optional thin-plate-spline extension (off by default; the estimated
// transform per the method is the global affine above).

struct TpsWarp {
  Tensor control;  // [81, 2] control points in the *output* frame
  Tensor wx, wy;   // [84] kernel + affine weights mapping output -> input
};

// Fits a TPS mapping 'from' points to 'to' points (used with from = l_dst,
// to = l_src so application can inverse-map output pixels to the source).
inline TpsWarp fit_tps(const LandmarkSet& from, const LandmarkSet& to, double reg = 1e-6) {
  from.check();
  to.check();
  const int n = kLandmarkCount;
  auto kernel = [](double r2) { return r2 > 0 ? 0.5 * r2 * std::log(r2) : 0.0; };
  EMatrix A = EMatrix::Zero(n + 3, n + 3);
  Eigen::VectorXd bx = Eigen::VectorXd::Zero(n + 3), by = Eigen::VectorXd::Zero(n + 3);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double ddx = from.points[2 * i] - from.points[2 * j];
      const double ddy = from.points[2 * i + 1] - from.points[2 * j + 1];
      A(i, j) = kernel(ddx * ddx + ddy * ddy);
    }
    A(i, i) += reg;
    A(i, n) = 1.0;
    A(i, n + 1) = from.points[2 * i];
    A(i, n + 2) = from.points[2 * i + 1];
    A(n, i) = 1.0;
    A(n + 1, i) = from.points[2 * i];
    A(n + 2, i) = from.points[2 * i + 1];
    bx[i] = to.points[2 * i];
    by[i] = to.points[2 * i + 1];
  }
  Eigen::FullPivLU<EMatrix> lu(A);
  if (!lu.isInvertible()) throw NumericalError("fit_tps: singular TPS system");
  TpsWarp w;
  w.control = from.points;
  w.wx = Tensor({n + 3});
  w.wy = Tensor({n + 3});
  w.wx.vec() = lu.solve(bx);
  w.wy.vec() = lu.solve(by);
  return w;
}

inline FaceImage apply_warp_tps(const FaceImage& img, const TpsWarp& w) {
  img.check();
  const int n = kLandmarkCount;
  const int64_t s = img.side();
  auto kernel = [](double r2) { return r2 > 0 ? 0.5 * r2 * std::log(r2) : 0.0; };
  FaceImage out{Tensor({3, s, s})};
  out.group = img.group;
  out.gender = img.gender;
  for (int64_t y = 0; y < s; ++y)
    for (int64_t x = 0; x < s; ++x) {
      double sx = w.wx[n] + w.wx[n + 1] * x + w.wx[n + 2] * y;
      double sy = w.wy[n] + w.wy[n + 1] * x + w.wy[n + 2] * y;
      for (int i = 0; i < n; ++i) {
        const double ddx = x - w.control[2 * i];
        const double ddy = y - w.control[2 * i + 1];
        const double k = kernel(ddx * ddx + ddy * ddy);
        sx += w.wx[i] * k;
        sy += w.wy[i] * k;
      }
      for (int64_t c = 0; c < 3; ++c)
        out.pixels[(c * s + y) * s + x] = detail::sample_clamped(img.pixels, c, sy, sx);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Full DLAT+ inference for one (source, noise, target group) triple.

struct FusionResult {
  FaceImage image;        // warped appearance output
  FaceImage raw_image;    // appearance output before warping
  LandmarkSet landmarks;  // geometry network output
  Tensor warp;            // [2,3] estimated affine
};

inline FusionResult dlat_plus_infer(const FaceImage& x, const LandmarkSet& l_x,
                                    const Tensor& noise, int k_index,
                                    const DiverseAgeMapper& m_img, const ImageGenerator& g_img,
                                    const DiverseAgeMapper& m_lmk,
                                    const LandmarkGenerator& g_lmk, const PcaBasis& basis,
                                    bool use_tps = false) {
  x.check();
  l_x.check();
  if (m_img.modality() != Modality::image || m_lmk.modality() != Modality::landmark)
    throw DomainError("dlat_plus_infer: mappers wired to the wrong modalities");
  if (k_index < 0 || k_index >= m_img.k() || k_index >= m_lmk.k())
    throw DomainError("dlat_plus_infer: group index out of range");
  const AgeLatentCode u_img = m_img.map_noise(noise)[static_cast<size_t>(k_index)];
  const AgeLatentCode u_lmk = m_lmk.map_noise(noise)[static_cast<size_t>(k_index)];
  FusionResult r{FaceImage{}, g_img.generate(x, u_img), g_lmk.generate(l_x, u_lmk, basis),
                 Tensor({2, 3})};
  r.warp = estimate_warp(l_x, r.landmarks);
  r.image = use_tps ? apply_warp_tps(r.raw_image, fit_tps(r.landmarks, l_x))
                    : apply_warp(r.raw_image, r.warp);
  return r;
}

}  // namespace dlat
