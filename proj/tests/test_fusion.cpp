#include <catch2/catch_amalgamated.hpp>
#include <Eigen/Dense>
#include <cmath>

#include "dlat/fusion.hpp"
#include "dlat/mapper.hpp"
#include "dlat/oracles.hpp"
#include "dlat/train.hpp"

using namespace dlat;

namespace {
Rng rng(31);

LandmarkSet random_landmarks(Rng& r, double lo = 8.0, double hi = 56.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  LandmarkSet l{Tensor({kLandmarkCount, 2}), std::nullopt};
  for (auto& v : l.points.data) v = u(r);
  return l;
}

LandmarkSet apply_affine(const LandmarkSet& l, const Tensor& a) {
  LandmarkSet out = l;
  for (int i = 0; i < kLandmarkCount; ++i) {
    const double x = l.points[i * 2], y = l.points[i * 2 + 1];
    out.points[i * 2] = a[0] * x + a[1] * y + a[2];
    out.points[i * 2 + 1] = a[3] * x + a[4] * y + a[5];
  }
  return out;
}

double interior_psnr(const FaceImage& a, const FaceImage& b, int margin) {
  const int s = a.side();
  double mse = 0.0;
  int64_t n = 0;
  for (int c = 0; c < 3; ++c)
    for (int y = margin; y < s - margin; ++y)
      for (int x = margin; x < s - margin; ++x) {
        const double d =
            a.pixels[(c * s + y) * s + x] - b.pixels[(c * s + y) * s + x];
        mse += d * d;
        ++n;
      }
  mse /= static_cast<double>(n);
  return 10.0 * std::log10(4.0 / mse);  // peak-to-peak 2 for [-1,1]
}

FaceImage smooth_image(int side, Rng& r) {
  std::uniform_real_distribution<double> u(0.5, 3.0);
  FaceImage img{Tensor({3, side, side}), std::nullopt, std::nullopt};
  for (int c = 0; c < 3; ++c) {
    const double fx = u(r), fy = u(r), ph = u(r);
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x)
        img.pixels[(c * side + y) * side + x] =
            0.9 * std::sin(2 * M_PI * (fx * x + fy * y) / side + ph);
  }
  return img;
}
}  // namespace

TEST_CASE("estimate_warp recovers identity and pure translation") {
  LandmarkSet l = random_landmarks(rng);
  Tensor a = estimate_warp(l, l);
  const double ident[6] = {1, 0, 0, 0, 1, 0};
  for (int i = 0; i < 6; ++i) CHECK(a[i] == Catch::Approx(ident[i]).margin(1e-9));
  LandmarkSet shifted = l;
  for (int i = 0; i < kLandmarkCount; ++i) {
    shifted.points[i * 2] += 5.0;
    shifted.points[i * 2 + 1] -= 3.0;
  }
  Tensor t = estimate_warp(l, shifted);
  const double expect[6] = {1, 0, 5, 0, 1, -3};
  for (int i = 0; i < 6; ++i) CHECK(t[i] == Catch::Approx(expect[i]).margin(1e-9));
}

TEST_CASE("estimate_warp recovers random exact affines against a normal-equations oracle") {
  std::uniform_real_distribution<double> u(-0.4, 0.4);
  for (int trial = 0; trial < 25; ++trial) {
    Tensor a0({2, 3}, {1.0 + u(rng), u(rng), 10 * u(rng), u(rng), 1.0 + u(rng), 10 * u(rng)});
    LandmarkSet src = random_landmarks(rng);
    LandmarkSet dst = apply_affine(src, a0);
    Tensor rec = estimate_warp(src, dst);
    for (int i = 0; i < 6; ++i) CHECK(rec[i] == Catch::Approx(a0[i]).margin(1e-8));

    // Independent oracle: dense normal equations via Eigen least squares.
    Eigen::MatrixXd X(kLandmarkCount, 3), D(kLandmarkCount, 2);
    for (int i = 0; i < kLandmarkCount; ++i) {
      X(i, 0) = src.points[i * 2];
      X(i, 1) = src.points[i * 2 + 1];
      X(i, 2) = 1.0;
      D(i, 0) = dst.points[i * 2];
      D(i, 1) = dst.points[i * 2 + 1];
    }
    Eigen::MatrixXd B = X.colPivHouseholderQr().solve(D);
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 3; ++c) CHECK(rec[r * 3 + c] == Catch::Approx(B(c, r)).margin(1e-8));
  }
}

TEST_CASE("degenerate (collinear) source landmarks raise a conditioning error") {
  LandmarkSet src{Tensor({kLandmarkCount, 2}), std::nullopt};
  for (int i = 0; i < kLandmarkCount; ++i) {
    src.points[i * 2] = i;
    src.points[i * 2 + 1] = 2.0 * i + 1.0;
  }
  CHECK_THROWS_AS(estimate_warp(src, random_landmarks(rng)), NumericalError);
}

TEST_CASE("identity warp reproduces pixels exactly, integer shift moves columns") {
  FaceImage img = smooth_image(32, rng);
  Tensor ident({2, 3}, {1, 0, 0, 0, 1, 0});
  FaceImage out = apply_warp(img, ident);
  for (int64_t i = 0; i < img.pixels.numel(); ++i) CHECK(out.pixels[i] == img.pixels[i]);

  Tensor shift({2, 3}, {1, 0, 1, 0, 1, 0});  // x_dst = x_src + 1
  FaceImage moved = apply_warp(img, shift);
  const int s = 32;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < s; ++y)
      for (int x = 1; x < s; ++x)
        CHECK(moved.pixels[(c * s + y) * s + x] ==
              Catch::Approx(img.pixels[(c * s + y) * s + x - 1]).margin(1e-12));
}

TEST_CASE("affine round-trip keeps interior PSNR above 35 dB") {
  FaceImage img = smooth_image(64, rng);
  Tensor a({2, 3}, {1.05, 0.08, 2.0, -0.06, 0.97, -1.5});
  const double det = a[0] * a[4] - a[1] * a[3];
  Tensor inv({2, 3});
  inv[0] = a[4] / det;
  inv[1] = -a[1] / det;
  inv[3] = -a[3] / det;
  inv[4] = a[0] / det;
  inv[2] = -(inv[0] * a[2] + inv[1] * a[5]);
  inv[5] = -(inv[3] * a[2] + inv[4] * a[5]);
  FaceImage rt = apply_warp(apply_warp(img, a), inv);
  CHECK(interior_psnr(img, rt, 8) >= 35.0);
}

TEST_CASE("TPS fitted on an affine correspondence matches the affine warp") {
  LandmarkSet src = random_landmarks(rng);
  Tensor a({2, 3}, {1.02, 0.05, 1.0, -0.04, 0.98, -2.0});
  LandmarkSet dst = apply_affine(src, a);
  TpsWarp w = fit_tps(dst, src);  // inverse mapping: dst -> src
  FaceImage img = smooth_image(64, rng);
  FaceImage via_affine = apply_warp(img, a);
  FaceImage via_tps = apply_warp_tps(img, w);
  CHECK(interior_psnr(via_affine, via_tps, 8) >= 35.0);
}

TEST_CASE("fusion degenerates to the raw generator output when offsets vanish") {
  Rng r(5);
  ImgTrainState img_st;
  img_st.model = std::make_unique<ImgModel>(64, 3, r);
  LmkModel lmk(3, r);
  for (auto& p : lmk.gen.params().all())
    if (p.name.find("out.") != std::string::npos) p.value.get()->val.vec().setZero();

  // PCA basis fitted on samples that include the probe landmark set, made
  // exactly rank-32 so projection round-trips exactly.
  std::vector<LandmarkSet> sets;
  Rng dr(6);
  Tensor base = random_landmarks(dr).flat();
  std::vector<Tensor> dirs;
  for (int d = 0; d < 32; ++d) dirs.push_back(random_normal({kLandmarkVecDim}, dr));
  std::normal_distribution<double> coef(0.0, 1.0);
  for (int i = 0; i < 50; ++i) {
    Tensor v = base;
    for (auto& dvec : dirs) {
      const double c = coef(dr);
      for (int64_t j = 0; j < v.numel(); ++j) v[j] += 0.05 * c * dvec[j];
    }
    sets.push_back(LandmarkSet::from_flat(v));
  }
  lmk.basis = fit_pca(sets);

  FaceImage x = smooth_image(64, dr);
  const LandmarkSet& l_x = sets[0];
  Tensor noise = sample_noise(dr);
  FusionResult res = dlat_plus_infer(x, l_x, noise, 1, img_st.model->mapper, img_st.model->gen,
                                     lmk.mapper, lmk.gen, lmk.basis);
  // Offsets are zero and l_x is PCA-exact, so the warp is the identity and
  // the fused output matches G_img(x, u).
  CHECK(interior_psnr(res.image, res.raw_image, 4) >= 40.0);
  CHECK(res.warp[0] == Catch::Approx(1.0).margin(1e-6));
  CHECK(res.warp[4] == Catch::Approx(1.0).margin(1e-6));
  CHECK(res.warp[2] == Catch::Approx(0.0).margin(1e-5));

  // Shape and range contract.
  CHECK(res.image.pixels.shape == x.pixels.shape);
  for (double v : res.image.pixels.data) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("different noises give different pixels and warps") {
  Rng r(7);
  ImgModel img(64, 3, r);
  LmkModel lmk(3, r);
  std::vector<LandmarkSet> sets;
  Rng dr(8);
  for (int i = 0; i < 40; ++i) sets.push_back(random_landmarks(dr));
  lmk.basis = fit_pca(sets);
  FaceImage x = smooth_image(64, dr);
  Tensor n1 = sample_noise(dr), n2 = sample_noise(dr);
  FusionResult r1 = dlat_plus_infer(x, sets[0], n1, 0, img.mapper, img.gen, lmk.mapper, lmk.gen,
                                    lmk.basis);
  FusionResult r2 = dlat_plus_infer(x, sets[0], n2, 0, img.mapper, img.gen, lmk.mapper, lmk.gen,
                                    lmk.basis);
  CHECK((r1.raw_image.pixels.vec() - r2.raw_image.pixels.vec()).cwiseAbs().sum() > 0.0);
  CHECK((r1.warp.vec() - r2.warp.vec()).cwiseAbs().sum() > 0.0);
}
