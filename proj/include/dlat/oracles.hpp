#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dlat/datamodel.hpp"
#include "dlat/nn.hpp"

// Pluggable third-party models (race estimator, identity embedder,
// perceptual extractor, face verifier, age estimator, landmark detector)
// with deterministic offline mocks.

namespace dlat {

inline constexpr int kRaceClasses = 7;
inline constexpr int64_t kEmbedDim = 512;

struct OracleSuite {
  std::function<Tensor(const FaceImage&)> race_estimator;       // [C], sums to 1
  std::function<Tensor(const FaceImage&)> identity_embedder;    // [512], unit norm
  std::function<std::vector<Tensor>(const FaceImage&)> perceptual_extractor;  // 4 tensors
  std::function<double(const FaceImage&, const FaceImage&)> face_verifier;    // [0,100]
  std::function<double(const FaceImage&)> age_estimator;        // years
  std::function<LandmarkSet(const FaceImage&)> landmark_detector;
};

// Fixed 81-point face template (oval outline, brows, eyes, nose, mouth)
// scaled to the image side; generic position (no three collinear clusters).
inline LandmarkSet landmark_template(int side) {
  LandmarkSet l{Tensor({kLandmarkCount, 2})};
  const double cx = side * 0.5, cy = side * 0.52;
  int idx = 0;
  auto put = [&](double x, double y) {
    l.points[2 * idx] = x;
    l.points[2 * idx + 1] = y;
    ++idx;
  };
  const double pi = 3.14159265358979323846;
  // 33 jaw/oval points
  for (int i = 0; i < 33; ++i) {
    const double a = pi * (0.1 + 0.8 * i / 32.0);
    put(cx + 0.42 * side * std::cos(a + pi / 2), cy + 0.46 * side * std::sin(a - pi / 2) * -1);
  }
  // brows: 2 x 6
  for (int s = -1; s <= 1; s += 2)
    for (int i = 0; i < 6; ++i)
      put(cx + s * (0.10 + 0.03 * i) * side, cy - (0.20 + 0.02 * std::sin(i * 0.8)) * side);
  // eyes: 2 x 6 small ellipses
  for (int s = -1; s <= 1; s += 2)
    for (int i = 0; i < 6; ++i) {
      const double a = 2 * pi * i / 6.0;
      put(cx + s * 0.17 * side + 0.06 * side * std::cos(a), cy - 0.08 * side + 0.03 * side * std::sin(a));
    }
  // nose: 8 points
  for (int i = 0; i < 8; ++i) put(cx + 0.02 * side * std::sin(i * 1.1), cy + (0.02 * i - 0.06) * side);
  // mouth: 16-point ellipse
  for (int i = 0; i < 16; ++i) {
    const double a = 2 * pi * i / 16.0;
    put(cx + 0.14 * side * std::cos(a), cy + 0.24 * side + 0.05 * side * std::sin(a));
  }
  return l;
}

// Deterministic hash-based mock backends. All randomness is frozen at
// construction from the seed; outputs depend only on pixel content.
class MockOracles {
 public:
  explicit MockOracles(uint64_t seed = 0) {
    Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
    proj_embed_ = random_normal({kEmbedDim, kFeatDim}, rng, 1.0 / std::sqrt(double(kFeatDim)));
    proj_race_ = random_normal({kRaceClasses, kFeatDim}, rng, 2.0 / std::sqrt(double(kFeatDim)));
    proj_jitter_ =
        random_normal({kLandmarkVecDim, kFeatDim}, rng, 1.0 / std::sqrt(double(kFeatDim)));
  }

  static constexpr int64_t kFeatDim = 3 * 16 * 16;

  // Box-downsamples [N,3,S,S] to [N, 768] (S a power of two >= 32).
  nn::Value features_v(const nn::Value& img) const {
    nn::Value h = img;
    while (h.shape()[3] > 16) h = ad::avgpool2(h);
    return ad::reshape(h, {img.shape()[0], kFeatDim});
  }

  // Unit-norm identity embedding, differentiable. [N, 512].
  nn::Value embed_v(const nn::Value& img) const {
    nn::Value e = ad::matmul(features_v(img), ad::transpose(ad::constant(proj_embed_)));
    nn::Value sq = ad::matmul(ad::mul(e, e), ad::constant(Tensor({kEmbedDim, 1}, 1.0)));
    nn::Value inv = ad::div(ad::constant(Tensor(sq.shape(), 1.0)),
                            ad::sqrt_v(ad::add_scalar(sq, 1e-12)));
    return ad::mul(e, ad::matmul(inv, ad::constant(Tensor({1, kEmbedDim}, 1.0))));
  }

  // Race distribution via softmax of a fixed projection. [N, 7].
  nn::Value race_v(const nn::Value& img) const {
    nn::Value z = ad::matmul(features_v(img), ad::transpose(ad::constant(proj_race_)));
    nn::Value ez = ad::exp_v(z);
    nn::Value s = ad::matmul(ez, ad::constant(Tensor({kRaceClasses, 1}, 1.0)));
    nn::Value inv = ad::div(ad::constant(Tensor(s.shape(), 1.0)), s);
    return ad::mul(ez, ad::matmul(inv, ad::constant(Tensor({1, kRaceClasses}, 1.0))));
  }

  // First four average-pool pyramid levels, differentiable.
  std::vector<nn::Value> perceptual_v(const nn::Value& img) const {
    std::vector<nn::Value> feats;
    nn::Value h = img;
    for (int i = 0; i < 4; ++i) {
      h = ad::avgpool2(h);
      feats.push_back(h);
    }
    return feats;
  }

  Tensor embed(const FaceImage& x) const {
    Tensor e = embed_v(wrap(x)).val();
    return Tensor({kEmbedDim}, std::move(e.data));
  }

  Tensor race(const FaceImage& x) const {
    Tensor r = race_v(wrap(x)).val();
    return Tensor({kRaceClasses}, std::move(r.data));
  }

  double verify(const FaceImage& a, const FaceImage& b) const {
    Tensor ea = embed(a), eb = embed(b);
    const double cos = ea.vec().dot(eb.vec());
    return std::min(100.0, 100.0 * std::max(0.0, cos));
  }

  // Affine function of mean intensity, clamped to a plausible age range.
  double age(const FaceImage& x) const {
    const double m = x.pixels.vec().mean();
    return std::min(120.0, std::max(0.0, 60.0 + 55.0 * m));
  }

  std::vector<Tensor> perceptual(const FaceImage& x) const {
    std::vector<Tensor> out;
    for (auto& f : perceptual_v(wrap(x))) out.push_back(f.val());
    return out;
  }

  // Template plus a small content-dependent jitter from a fixed projection.
  LandmarkSet detect_landmarks(const FaceImage& x) const {
    x.check();
    LandmarkSet l = landmark_template(x.side());
    Tensor f = features_v(wrap(x)).val();
    Eigen::VectorXd jitter =
        proj_jitter_.mat(kLandmarkVecDim, kFeatDim) * ECVecMap(f.data.data(), kFeatDim);
    l.points.vec() += 0.01 * static_cast<double>(x.side()) * jitter.array().tanh().matrix();
    l.group = x.group;
    return l;
  }

  OracleSuite suite() const {
    OracleSuite s;
    s.race_estimator = [*this](const FaceImage& x) { return race(x); };
    s.identity_embedder = [*this](const FaceImage& x) { return embed(x); };
    s.perceptual_extractor = [*this](const FaceImage& x) { return perceptual(x); };
    s.face_verifier = [*this](const FaceImage& a, const FaceImage& b) { return verify(a, b); };
    s.age_estimator = [*this](const FaceImage& x) { return age(x); };
    s.landmark_detector = [*this](const FaceImage& x) { return detect_landmarks(x); };
    return s;
  }

 private:
  static nn::Value wrap(const FaceImage& x) {
    x.check();
    return ad::constant(Tensor({1, 3, x.side(), x.side()}, x.pixels.data));
  }

  Tensor proj_embed_;   // [512, 768]
  Tensor proj_race_;    // [7, 768]
  Tensor proj_jitter_;  // [162, 768]
};

inline OracleSuite mock_suite(uint64_t seed = 0) { return MockOracles(seed).suite(); }

}  // namespace dlat
