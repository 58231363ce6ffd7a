#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "dlat/datamodel.hpp"
#include "dlat/nn.hpp"

namespace dlat {

// ---------------------------------------------------------------------------
// PCA shape model: 162-dim flattened landmarks -> 32 coefficients.

struct PcaBasis {
  Tensor mean;        // [162]
  Tensor components;  // [32, 162], rows orthonormal, sorted by variance desc
  Tensor variances;   // [32], nonnegative, descending

  void check() const {
    if (mean.numel() != kLandmarkVecDim || components.shape != std::vector<int64_t>{kPcaDim, kLandmarkVecDim} ||
        variances.numel() != kPcaDim)
      throw DomainError("malformed PCA basis");
  }
};

struct PcaCoeffs {
  Tensor values;  // [32]
};

// Eigendecomposition of the (population) covariance of the flattened
// landmark vectors; deterministic sign convention: the largest-magnitude
// entry of each component is positive.
inline PcaBasis fit_pca(const std::vector<LandmarkSet>& landmarks) {
  const int64_t n = static_cast<int64_t>(landmarks.size());
  if (n < kPcaDim + 1)
    throw DomainError("fit_pca needs at least " + std::to_string(kPcaDim + 1) + " samples, got " +
                      std::to_string(n));
  EMatrix X(n, kLandmarkVecDim);
  for (int64_t i = 0; i < n; ++i) {
    landmarks[static_cast<size_t>(i)].check();
    X.row(i) = landmarks[static_cast<size_t>(i)].points.vec().transpose();
  }
  Eigen::RowVectorXd mu = X.colwise().mean();
  EMatrix Xc = X.rowwise() - mu;
  EMatrix cov = (Xc.transpose() * Xc) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<EMatrix> es(cov);
  if (es.info() != Eigen::Success) throw NumericalError("PCA eigendecomposition failed");
  // Eigen sorts ascending; take the top kPcaDim in descending order.
  PcaBasis b;
  b.mean = Tensor({kLandmarkVecDim});
  b.mean.vec() = mu.transpose();
  b.components = Tensor({kPcaDim, kLandmarkVecDim});
  b.variances = Tensor({kPcaDim});
  auto comp = b.components.mat(kPcaDim, kLandmarkVecDim);
  for (int64_t i = 0; i < kPcaDim; ++i) {
    const int64_t src = kLandmarkVecDim - 1 - i;
    Eigen::VectorXd v = es.eigenvectors().col(src);
    int maxj = 0;
    v.cwiseAbs().maxCoeff(&maxj);
    if (v[maxj] < 0) v = -v;
    comp.row(i) = v.transpose();
    b.variances[i] = std::max(0.0, es.eigenvalues()[src]);
  }
  return b;
}

inline PcaCoeffs pca_project(const LandmarkSet& l, const PcaBasis& b) {
  l.check();
  b.check();
  PcaCoeffs c{Tensor({kPcaDim})};
  c.values.vec() =
      b.components.mat(kPcaDim, kLandmarkVecDim) * (l.points.vec() - b.mean.vec());
  return c;
}

inline LandmarkSet pca_reconstruct(const PcaCoeffs& c, const PcaBasis& b) {
  b.check();
  if (c.values.numel() != kPcaDim) throw DomainError("PCA coefficients must have length 32");
  LandmarkSet l{Tensor({kLandmarkCount, 2})};
  l.points.vec() =
      b.mean.vec() + b.components.mat(kPcaDim, kLandmarkVecDim).transpose() * c.values.vec();
  return l;
}

// Differentiable batch versions over flattened landmark rows [N, 162].
inline nn::Value pca_project_v(const nn::Value& flat, const PcaBasis& b) {
  const int64_t n = flat.shape()[0];
  Tensor mean_rows({n, kLandmarkVecDim});
  for (int64_t i = 0; i < n; ++i)
    std::copy(b.mean.data.begin(), b.mean.data.end(),
              mean_rows.data.begin() + i * kLandmarkVecDim);
  nn::Value centered = ad::sub(flat, ad::constant(std::move(mean_rows)));
  return ad::matmul(centered, ad::transpose(ad::constant(b.components)));
}

inline nn::Value pca_reconstruct_v(const nn::Value& coeffs, const PcaBasis& b) {
  const int64_t n = coeffs.shape()[0];
  Tensor mean_rows({n, kLandmarkVecDim});
  for (int64_t i = 0; i < n; ++i)
    std::copy(b.mean.data.begin(), b.mean.data.end(),
              mean_rows.data.begin() + i * kLandmarkVecDim);
  return ad::add(ad::matmul(coeffs, ad::constant(b.components)),
                 ad::constant(std::move(mean_rows)));
}

// ---------------------------------------------------------------------------
// G_lmk: eight FiLM layers conditioned on the length-64 age code predict a
// coefficient-space offset, added before inverse PCA.

class LandmarkGenerator {
 public:
  explicit LandmarkGenerator(Rng& rng) {
    int64_t in = kPcaDim;
    for (int i = 0; i < 8; ++i) {
      film_.emplace_back(params_, "film" + std::to_string(i), in, 256, kLandmarkCodeDim, rng);
      in = 256;
    }
    out_ = nn::Linear(params_, "out", 256, kPcaDim, rng);
  }

  // coeffs: [N, 32], code: [N, 64] -> offsets [N, 32].
  nn::Value offsets(const nn::Value& coeffs, const nn::Value& code) const {
    if (code.shape().back() != kLandmarkCodeDim)
      throw DomainError("landmark age code must have length 64");
    nn::Value h = coeffs;
    for (const auto& f : film_) h = f.forward(h, code);
    return out_.forward(h);
  }

  // Value path used by training: flattened source landmarks -> flattened
  // generated landmarks.
  nn::Value forward_flat(const nn::Value& flat, const nn::Value& code, const PcaBasis& b) const {
    nn::Value c = pca_project_v(flat, b);
    return pca_reconstruct_v(ad::add(c, offsets(c, code)), b);
  }

  LandmarkSet generate(const LandmarkSet& l_src, const AgeLatentCode& u, const PcaBasis& b) const {
    if (u.modality != Modality::landmark)
      throw DomainError("landmark generator needs a landmark-modality code");
    u.check();
    Tensor flat({1, kLandmarkVecDim}, l_src.points.data);
    Tensor code({1, kLandmarkCodeDim}, u.values.data);
    Tensor y = forward_flat(ad::constant(std::move(flat)), ad::constant(std::move(code)), b).val();
    LandmarkSet out{Tensor({kLandmarkCount, 2}, std::move(y.data))};
    out.group = u.group;
    return out;
  }

  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

 private:
  nn::ParamStore params_;
  std::vector<nn::FilmLayer> film_;
  nn::Linear out_;
};

// P_lmk: ten shared 512-wide leaky-ReLU layers on the 32-dim coefficients,
// then K unshared linear heads of width 64.
class LandmarkPredictor {
 public:
  LandmarkPredictor(int k, Rng& rng) : k_(k) {
    int64_t in = kPcaDim;
    for (int i = 0; i < 10; ++i) {
      shared_.emplace_back(params_, "shared" + std::to_string(i), in, 512, rng);
      in = 512;
    }
    for (int b = 0; b < k; ++b)
      heads_.emplace_back(params_, "head" + std::to_string(b), 512, kLandmarkCodeDim, rng);
  }

  nn::Value trunk(const nn::Value& coeffs) const {
    nn::Value h = coeffs;
    for (const auto& l : shared_) h = ad::lrelu(l.forward(h));
    return h;
  }

  nn::Value predict(const nn::Value& coeffs, int k) const {
    if (k < 0 || k >= k_) throw DomainError("landmark predictor head index out of range");
    return heads_[static_cast<size_t>(k)].forward(trunk(coeffs));
  }

  AgeLatentCode predict_code(const PcaCoeffs& c, int k) const {
    Tensor cb({1, kPcaDim}, c.values.data);
    Tensor out = predict(ad::constant(std::move(cb)), k).val();
    return AgeLatentCode{Tensor({kLandmarkCodeDim}, std::move(out.data)), Modality::landmark,
                         trainable_groups()[static_cast<size_t>(k)]};
  }

  const nn::Linear& head(int k) const { return heads_[static_cast<size_t>(k)]; }
  int k() const { return k_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

 private:
  int k_;
  nn::ParamStore params_;
  std::vector<nn::Linear> shared_;
  std::vector<nn::Linear> heads_;
};

// D_lmk: four shared 256-wide leaky-ReLU layers, then K unshared branches
// (256, 256, 128, sigmoid 1). Outputs live in the open interval (0,1).
class LandmarkDiscriminator {
 public:
  LandmarkDiscriminator(int k, Rng& rng) : k_(k) {
    int64_t in = kPcaDim;
    for (int i = 0; i < 4; ++i) {
      shared_.emplace_back(params_, "shared" + std::to_string(i), in, 256, rng);
      in = 256;
    }
    branches_.resize(static_cast<size_t>(k));
    const int64_t widths[4] = {256, 256, 128, 1};
    for (int b = 0; b < k; ++b) {
      int64_t w = 256;
      for (int i = 0; i < 4; ++i) {
        branches_[static_cast<size_t>(b)].emplace_back(
            params_, "branch" + std::to_string(b) + ".l" + std::to_string(i), w, widths[i], rng);
        w = widths[i];
      }
    }
  }

  // coeffs: [N, 32] -> [N, K] sigmoid scores.
  nn::Value forward(const nn::Value& coeffs) const {
    nn::Value h = coeffs;
    for (const auto& l : shared_) h = ad::lrelu(l.forward(h));
    std::vector<nn::Value> cols;
    for (const auto& branch : branches_) {
      nn::Value b = h;
      for (size_t i = 0; i + 1 < branch.size(); ++i) b = ad::lrelu(branch[i].forward(b));
      cols.push_back(ad::transpose(ad::sigmoid_v(branch.back().forward(b))));  // [1, N]
    }
    return ad::transpose(cols.size() == 1 ? cols[0] : ad::concat_axis0(cols));  // [N, K]
  }

  Tensor discriminate(const PcaCoeffs& c) const {
    Tensor cb({1, kPcaDim}, c.values.data);
    Tensor out = forward(ad::constant(std::move(cb))).val();
    return Tensor({static_cast<int64_t>(k_)}, std::move(out.data));
  }

  int k() const { return k_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

 private:
  int k_;
  nn::ParamStore params_;
  std::vector<nn::Linear> shared_;
  std::vector<std::vector<nn::Linear>> branches_;
};

// ---------------------------------------------------------------------------
// Weak-perspective pose from fixed 3D reference points.

// Eight stable landmark indices used for pose (outer eye corners, nose tip,
// mouth corners, chin, brow midpoints of the bundled template).
inline const std::vector<int>& pose_landmark_subset() {
  static const std::vector<int> idx = {0, 10, 20, 30, 40, 54, 68, 80};
  return idx;
}

struct ReferencePoints3D {
  Tensor points;  // [P, 3]

  int64_t count() const { return points.dim(0); }

  void check(double min_separation = 0.5) const {
    const int64_t p = count();
    if (points.rank() != 2 || points.dim(1) != 3 || p < 4)
      throw DomainError("reference points must be [P,3] with P >= 4");
    auto m = points.mat(p, 3);
    for (int64_t i = 0; i < p; ++i)
      for (int64_t j = i + 1; j < p; ++j)
        if ((m.row(i) - m.row(j)).norm() < min_separation - 1e-12)
          throw DomainError("reference points closer than the configured separation");
    EMatrix centered = m.rowwise() - m.colwise().mean();
    Eigen::JacobiSVD<EMatrix> svd(centered);
    if (svd.singularValues()[2] < 1e-6)
      throw NumericalError("reference points are rank-deficient after centering");
  }
};

// P points drawn from the unit sphere with minimum pairwise separation,
// deterministic in the seed; frozen at construction and serialized with
// the model.
inline ReferencePoints3D make_reference_points(int p = 8, double min_separation = 0.5,
                                               uint64_t seed = 0xd1a7) {
  Rng rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  ReferencePoints3D ref{Tensor({p, 3})};
  auto m = ref.points.mat(p, 3);
  for (int i = 0; i < p;) {
    Eigen::RowVector3d v(nd(rng), nd(rng), nd(rng));
    if (v.norm() < 1e-6) continue;
    v /= v.norm();
    bool ok = true;
    for (int j = 0; j < i && ok; ++j) ok = (m.row(j) - v).norm() >= min_separation;
    if (!ok) continue;
    m.row(i++) = v;
  }
  ref.check(min_separation);
  return ref;
}

struct PoseEstimate {
  Tensor sr;  // [2,3] scale * projected rotation
  Tensor t;   // [2] translation, pixel units
  double scale = 0.0;

  // Flattened (sr, t) parameter vector used by the pose-consistency loss.
  Tensor params() const {
    Tensor p({8});
    for (int i = 0; i < 6; ++i) p[i] = sr[i];
    p[6] = t[0];
    p[7] = t[1];
    return p;
  }
};

namespace detail {

struct PoseContext {
  EMatrix Lc, Rc, Minv;    // [P,2], [P,3], [3,3]
  Eigen::Matrix2d U;
  Eigen::Matrix<double, 3, 2> V;
  Eigen::Vector2d sigma;
  Eigen::Matrix<double, 2, 3> R;
  Eigen::RowVector2d lmean;
  Eigen::RowVector3d rmean;
  double s = 0.0;
  int64_t p = 0;
};

// Closed-form weak-perspective fit: solve the unconstrained 2x3 affine map
// by least squares, then project onto scale x row-orthonormal via SVD.
// Exact on noiseless projections (the affine solution is already s*R).
inline PoseContext pose_forward(const Tensor& l_sel, const Tensor& ref) {
  PoseContext c;
  c.p = l_sel.dim(0);
  if (ref.dim(0) != c.p) throw DomainError("pose: landmark subset and reference sizes differ");
  ECMap L = l_sel.mat(c.p, 2);
  ECMap Rf = ref.mat(c.p, 3);
  c.lmean = L.colwise().mean();
  c.rmean = Rf.colwise().mean();
  c.Lc = L.rowwise() - c.lmean;
  c.Rc = Rf.rowwise() - c.rmean;
  EMatrix M = c.Rc.transpose() * c.Rc;
  Eigen::FullPivLU<EMatrix> lu(M);
  if (!lu.isInvertible()) throw NumericalError("pose: degenerate reference configuration");
  c.Minv = lu.inverse();
  EMatrix A = c.Lc.transpose() * c.Rc * c.Minv;  // [2,3]
  Eigen::JacobiSVD<EMatrix> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
  c.sigma = svd.singularValues();
  if (c.sigma[1] < 1e-9 * std::max(1.0, c.sigma[0]))
    throw NumericalError("pose: selected landmarks are degenerate (collinear)");
  c.U = svd.matrixU();
  c.V = svd.matrixV();
  c.R = c.U * c.V.transpose();
  c.s = 0.5 * (c.sigma[0] + c.sigma[1]);
  return c;
}

// Reverse-mode derivative of the 8 pose parameters w.r.t. the selected
// landmarks, via the standard SVD adjoint (full U, thin V, m < n).
inline Tensor pose_backward(const PoseContext& c, const Tensor& g8) {
  Eigen::Matrix<double, 2, 3> g_sr;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j) g_sr(i, j) = g8[i * 3 + j];
  Eigen::Vector2d g_t(g8[6], g8[7]);

  // t = lmean - sr * rmean.
  Eigen::RowVector2d g_lmean = g_t.transpose();
  Eigen::Matrix<double, 2, 3> G = g_sr - g_t * c.rmean;
  // sr = s * R.
  const double g_s = (G.array() * c.R.array()).sum();
  Eigen::Matrix<double, 2, 3> gR = c.s * G;

  // SVD adjoint for A = U diag(sigma) V^T with gU = gR V, gV = gR^T U,
  // gSigma = (g_s/2) I.
  Eigen::Matrix2d gU = gR * c.V;
  Eigen::Matrix<double, 3, 2> gV = gR.transpose() * c.U;
  const double s1 = c.sigma[0], s2 = c.sigma[1];
  const double denom = s2 * s2 - s1 * s1;
  if (std::abs(denom) < 1e-12 * std::max(1.0, s1 * s1))
    throw NumericalError("pose: gradient ill-conditioned (near-equal singular values)");
  Eigen::Matrix2d F = Eigen::Matrix2d::Zero();
  F(0, 1) = 1.0 / denom;
  F(1, 0) = -1.0 / denom;
  Eigen::Matrix2d S = c.sigma.asDiagonal();
  Eigen::Matrix2d KU = F.cwiseProduct(c.U.transpose() * gU - gU.transpose() * c.U);
  Eigen::Matrix2d KV = F.cwiseProduct(c.V.transpose() * gV - gV.transpose() * c.V);
  Eigen::Matrix2d inner = KU * S + S * KV + Eigen::Matrix2d::Identity() * (0.5 * g_s);
  Eigen::Matrix3d projV = Eigen::Matrix3d::Identity() - c.V * c.V.transpose();
  Eigen::Matrix<double, 2, 3> gA =
      c.U * inner * c.V.transpose() + c.U * S.inverse() * gV.transpose() * projV;

  // A = Lc^T Rc Minv.
  EMatrix gLc = c.Rc * c.Minv * gA.transpose();              // [P,2]
  Eigen::RowVector2d colsum = gLc.colwise().sum();
  Tensor gl({c.p, 2});
  auto out = gl.mat(c.p, 2);
  out = gLc;
  out.rowwise() -= colsum / static_cast<double>(c.p);
  out.rowwise() += g_lmean / static_cast<double>(c.p);
  return gl;
}

}  // namespace detail

inline PoseEstimate estimate_pose(const LandmarkSet& l, const ReferencePoints3D& ref,
                                  const std::vector<int>& subset = pose_landmark_subset()) {
  l.check();
  if (static_cast<int64_t>(subset.size()) != ref.count())
    throw DomainError("pose subset size must match the reference point count");
  Tensor sel({static_cast<int64_t>(subset.size()), 2});
  for (size_t i = 0; i < subset.size(); ++i) {
    const int j = subset[i];
    if (j < 0 || j >= kLandmarkCount) throw DomainError("pose subset index out of range");
    sel[2 * static_cast<int64_t>(i)] = l.points[2 * j];
    sel[2 * static_cast<int64_t>(i) + 1] = l.points[2 * j + 1];
  }
  auto c = detail::pose_forward(sel, ref.points);
  PoseEstimate pe;
  pe.sr = Tensor({2, 3});
  pe.sr.mat(2, 3) = c.s * c.R;
  pe.t = Tensor({2});
  pe.t.vec() = (c.lmean - (c.s * c.R * c.rmean.transpose()).transpose()).transpose();
  pe.scale = c.s;
  return pe;
}

// Differentiable pose parameters [sr(6), t(2)] of one selected-landmark
// block [P, 2]. First-order only (the adjoint is computed numerically).
inline nn::Value pose_params_v(const nn::Value& l_sel, const ReferencePoints3D& ref) {
  auto c = detail::pose_forward(l_sel.val(), ref.points);
  Tensor out({8});
  Eigen::Matrix<double, 2, 3> sr = c.s * c.R;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j) out[i * 3 + j] = sr(i, j);
  Eigen::Vector2d t = (c.lmean - (sr * c.rmean.transpose()).transpose()).transpose();
  out[6] = t[0];
  out[7] = t[1];
  return ad::make(std::move(out), {l_sel}, [c](const ad::Value& g) {
    return std::vector<ad::Value>{ad::constant(detail::pose_backward(c, g.val()))};
  });
}

// Selects the pose subset rows from a flattened [1, 162] landmark Value.
inline nn::Value select_pose_rows(const nn::Value& flat,
                                  const std::vector<int>& subset = pose_landmark_subset()) {
  nn::Value pts = ad::reshape(flat, {kLandmarkCount, 2});
  std::vector<nn::Value> rows;
  rows.reserve(subset.size());
  for (int j : subset) rows.push_back(ad::slice_axis0(pts, j, 1));
  return ad::concat_axis0(rows);
}

}  // namespace dlat
