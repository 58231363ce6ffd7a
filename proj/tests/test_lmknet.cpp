#include <catch2/catch_amalgamated.hpp>
#include <Eigen/Dense>

#include "dlat/lmknet.hpp"
#include "dlat/mapper.hpp"
#include "gradcheck.hpp"

using namespace dlat;
namespace ad = dlat::ad;

namespace {
std::vector<LandmarkSet> synthetic_sets(int n, int rank, Rng& r) {
  // mean + combinations of `rank` fixed directions (+ optional noise added
  // by callers) so the intrinsic dimension is controlled.
  Tensor mean = random_normal({kLandmarkVecDim}, r);
  std::vector<Tensor> dirs;
  for (int d = 0; d < rank; ++d) dirs.push_back(random_normal({kLandmarkVecDim}, r));
  std::vector<LandmarkSet> sets;
  std::normal_distribution<double> coef(0.0, 2.0);
  for (int i = 0; i < n; ++i) {
    Tensor v = mean;
    for (int d = 0; d < rank; ++d) {
      const double c = coef(r);
      for (int64_t j = 0; j < v.numel(); ++j) v[j] += c * dirs[static_cast<size_t>(d)][j];
    }
    sets.push_back(LandmarkSet::from_flat(v));
  }
  return sets;
}
}  // namespace

TEST_CASE("PCA reconstructs exactly when data lie in a 32-dim affine subspace") {
  Rng r(1);
  auto sets = synthetic_sets(60, 32, r);
  PcaBasis b = fit_pca(sets);
  for (const auto& s : sets) {
    LandmarkSet rec = pca_reconstruct(pca_project(s, b), b);
    for (int64_t i = 0; i < rec.points.numel(); ++i)
      CHECK(rec.points[i] == Catch::Approx(s.points[i]).margin(1e-9));
  }
}

TEST_CASE("rank-1 data aligns the leading component with the direction") {
  Rng r(2);
  Tensor mean = random_normal({kLandmarkVecDim}, r);
  Tensor dir = random_normal({kLandmarkVecDim}, r);
  dir.vec() /= dir.vec().norm();
  std::vector<LandmarkSet> sets;
  for (int i = 0; i < 40; ++i) {
    Tensor v = mean;
    const double c = (i - 20) * 0.37;
    for (int64_t j = 0; j < v.numel(); ++j) v[j] += c * dir[j];
    sets.push_back(LandmarkSet::from_flat(v));
  }
  PcaBasis b = fit_pca(sets);
  double cos = 0.0;
  for (int64_t j = 0; j < kLandmarkVecDim; ++j) cos += b.components[j] * dir[j];
  CHECK(std::abs(cos) >= 1.0 - 1e-9);
}

TEST_CASE("PCA residual equals the discarded eigenvalue mass (eigensolver oracle)") {
  Rng r(3);
  std::vector<LandmarkSet> sets;
  for (int i = 0; i < 200; ++i)
    sets.push_back(LandmarkSet::from_flat(random_normal({kLandmarkVecDim}, r)));
  PcaBasis b = fit_pca(sets);

  // Independent oracle: population covariance, full eigendecomposition.
  const int n = 200, d = kLandmarkVecDim;
  Eigen::MatrixXd X(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) X(i, j) = sets[static_cast<size_t>(i)].flat()[j];
  Eigen::RowVectorXd mu = X.colwise().mean();
  Eigen::MatrixXd C = (X.rowwise() - mu).transpose() * (X.rowwise() - mu) / double(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C);
  double discarded = 0.0;
  for (int j = 0; j < d - 32; ++j) discarded += es.eigenvalues()(j);

  // Orthonormality.
  Eigen::MatrixXd P(32, d);
  for (int i = 0; i < 32; ++i)
    for (int j = 0; j < d; ++j) P(i, j) = b.components[i * d + j];
  CHECK((P * P.transpose() - Eigen::MatrixXd::Identity(32, 32)).cwiseAbs().maxCoeff() < 1e-8);

  // Mean squared reconstruction error over the sample = discarded mass.
  double err = 0.0;
  for (const auto& s : sets) {
    LandmarkSet rec = pca_reconstruct(pca_project(s, b), b);
    err += (rec.points.vec() - s.points.vec()).squaredNorm();
  }
  err /= double(n);
  CHECK(err == Catch::Approx(discarded).margin(1e-8));
}

TEST_CASE("projection of the mean is zero and zero coefficients reconstruct the mean") {
  Rng r(4);
  auto sets = synthetic_sets(50, 10, r);
  PcaBasis b = fit_pca(sets);
  LandmarkSet mean = LandmarkSet::from_flat(b.mean);
  PcaCoeffs c = pca_project(mean, b);
  for (int64_t i = 0; i < c.values.numel(); ++i) CHECK(c.values[i] == Catch::Approx(0.0).margin(1e-9));
  PcaCoeffs zero{Tensor({32})};
  LandmarkSet rec = pca_reconstruct(zero, b);
  for (int64_t i = 0; i < rec.points.numel(); ++i)
    CHECK(rec.points[i] == Catch::Approx(b.mean[i]).margin(1e-12));
}

TEST_CASE("landmark generator with zeroed final layer is a PCA round-trip") {
  Rng r(5);
  LandmarkGenerator g(r);
  for (auto& p : g.params().all())
    if (p.name.find("out.") != std::string::npos) p.value.get()->val.vec().setZero();
  auto sets = synthetic_sets(40, 8, r);
  PcaBasis b = fit_pca(sets);
  AgeLatentCode u{random_normal({code_dim(Modality::landmark)}, r), Modality::landmark,
                  trainable_groups()[0]};
  LandmarkSet out = g.generate(sets[0], u, b);
  LandmarkSet rt = pca_reconstruct(pca_project(sets[0], b), b);
  for (int64_t i = 0; i < out.points.numel(); ++i)
    CHECK(out.points[i] == Catch::Approx(rt.points[i]).margin(1e-9));
}

TEST_CASE("landmark generator output has 81 points and varies with the code") {
  Rng r(6);
  LandmarkGenerator g(r);
  auto sets = synthetic_sets(40, 8, r);
  PcaBasis b = fit_pca(sets);
  AgeLatentCode u1{random_normal({64}, r), Modality::landmark, trainable_groups()[0]};
  AgeLatentCode u2{random_normal({64}, r), Modality::landmark, trainable_groups()[0]};
  LandmarkSet y1 = g.generate(sets[0], u1, b), y2 = g.generate(sets[0], u2, b);
  y1.check();
  double diff = (y1.points.vec() - y2.points.vec()).cwiseAbs().sum();
  CHECK(diff > 0.0);
}

TEST_CASE("landmark predictor heads emit length-64 codes; discriminator scores lie in (0,1)") {
  Rng r(7);
  LandmarkPredictor p(6, r);
  LandmarkDiscriminator d(6, r);
  Tensor coeffs = random_normal({1, kPcaDim}, r);
  for (int k = 0; k < 6; ++k) {
    Tensor c = p.predict(ad::constant(coeffs), k).val();
    CHECK(c.numel() == 64);
  }
  Tensor scores = d.forward(ad::constant(coeffs)).val();
  REQUIRE(scores.shape == std::vector<int64_t>{1, 6});
  for (double v : scores.data) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  Tensor again = d.forward(ad::constant(coeffs)).val();
  for (int64_t i = 0; i < 6; ++i) CHECK(scores[i] == again[i]);
}

TEST_CASE("pose recovery is exact on noiseless weak-perspective projections") {
  ReferencePoints3D ref = make_reference_points();
  ref.check(0.3);
  Rng r(8);
  std::uniform_real_distribution<double> ang(-3.0, 3.0), sc(0.5, 2.0), tr(-20.0, 20.0);
  for (int trial = 0; trial < 100; ++trial) {
    const double a = ang(r), s = sc(r), tx = tr(r), ty = tr(r);
    // Random 3D rotation composed of three axis rotations; the projection
    // keeps its top 2x3 block.
    Eigen::Matrix3d R =
        (Eigen::AngleAxisd(ang(r), Eigen::Vector3d::UnitX()) *
         Eigen::AngleAxisd(a, Eigen::Vector3d::UnitY()) *
         Eigen::AngleAxisd(ang(r), Eigen::Vector3d::UnitZ()))
            .toRotationMatrix();
    const auto& subset = pose_landmark_subset();
    Tensor flat({1, kLandmarkVecDim});
    for (size_t i = 0; i < subset.size(); ++i) {
      Eigen::Vector3d p;
      for (int j = 0; j < 3; ++j) p(j) = ref.points[static_cast<int64_t>(i) * 3 + j];
      Eigen::Vector2d q = s * (R * p).head<2>() + Eigen::Vector2d(tx, ty);
      flat[subset[i] * 2 + 0] = q(0);
      flat[subset[i] * 2 + 1] = q(1);
    }
    PoseEstimate est = estimate_pose(LandmarkSet::from_flat(Tensor({kLandmarkVecDim}, flat.data)),
                                     ref, subset);
    CHECK(est.scale == Catch::Approx(s).margin(1e-6));
    CHECK(est.t[0] == Catch::Approx(tx).margin(1e-6));
    CHECK(est.t[1] == Catch::Approx(ty).margin(1e-6));
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 3; ++j)
        CHECK(est.sr[i * 3 + j] == Catch::Approx(s * R(i, j)).margin(1e-6));
  }
}

TEST_CASE("pose translation equivariance is exact") {
  ReferencePoints3D ref = make_reference_points();
  Rng r(9);
  Tensor flat = random_normal({kLandmarkVecDim}, r);
  const auto& subset = pose_landmark_subset();
  PoseEstimate base = estimate_pose(LandmarkSet::from_flat(flat), ref, subset);
  Tensor shifted = flat;
  for (int i = 0; i < kLandmarkCount; ++i) shifted[i * 2] += 5.0;
  PoseEstimate moved = estimate_pose(LandmarkSet::from_flat(shifted), ref, subset);
  CHECK(moved.t[0] == Catch::Approx(base.t[0] + 5.0).margin(1e-9));
  CHECK(moved.t[1] == Catch::Approx(base.t[1]).margin(1e-9));
  CHECK(moved.scale == Catch::Approx(base.scale).margin(1e-9));
  for (int64_t i = 0; i < 6; ++i) CHECK(moved.sr[i] == Catch::Approx(base.sr[i]).margin(1e-9));
}

TEST_CASE("identity projection gives the identity/zero pose") {
  ReferencePoints3D ref = make_reference_points();
  const auto& subset = pose_landmark_subset();
  Tensor flat({kLandmarkVecDim});
  for (size_t i = 0; i < subset.size(); ++i) {
    flat[subset[i] * 2 + 0] = ref.points[static_cast<int64_t>(i) * 3 + 0];
    flat[subset[i] * 2 + 1] = ref.points[static_cast<int64_t>(i) * 3 + 1];
  }
  PoseEstimate est = estimate_pose(LandmarkSet::from_flat(flat), ref, subset);
  CHECK(est.scale == Catch::Approx(1.0).margin(1e-9));
  CHECK(est.t[0] == Catch::Approx(0.0).margin(1e-9));
  CHECK(est.t[1] == Catch::Approx(0.0).margin(1e-9));
  const double ident[6] = {1, 0, 0, 0, 1, 0};
  for (int64_t i = 0; i < 6; ++i) CHECK(est.sr[i] == Catch::Approx(ident[i]).margin(1e-9));
}

TEST_CASE("pose parameters are differentiable (generic landmarks)") {
  // Noiseless projections sit exactly where the SVD adjoint is singular
  // (equal singular values), so the gradient check uses generic points.
  ReferencePoints3D ref = make_reference_points();
  const auto& subset = pose_landmark_subset();
  Rng r(10);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor flat = random_normal({1, kLandmarkVecDim}, r);
    auto f = [&](std::vector<ad::Value>& v) {
      ad::Value p = pose_params_v(select_pose_rows(v[0], subset), ref);
      return ad::sum_all(ad::mul(p, p));
    };
    CHECK(testutil::gradcheck(f, {flat}, 0, 1e-6) < 1e-4);
  }
}

TEST_CASE("PCA projection round-trip is differentiable in batch form") {
  Rng r(11);
  auto sets = synthetic_sets(50, 16, r);
  PcaBasis b = fit_pca(sets);
  Tensor flat = random_normal({2, kLandmarkVecDim}, r);
  auto f = [&](std::vector<ad::Value>& v) {
    return ad::mean_all(pca_reconstruct_v(pca_project_v(v[0], b), b));
  };
  CHECK(testutil::gradcheck(f, {flat}, 0, 1e-6) < 1e-4);
}
