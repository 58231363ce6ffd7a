#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dlat/datamodel.hpp"
#include "dlat/nn.hpp"

// Training objectives. All norms are mean-reduced L1 unless a loss states
// otherwise; every function returns a differentiable scalar Value.

namespace dlat::losses {

using ad::Value;

namespace detail {
inline Value l1_mean(const Value& a, const Value& b) {
  return ad::mean_all(ad::abs_v(ad::sub(a, b)));
}
inline void check_finite(const Value& v, const char* what) {
  for (double x : v.val().data)
    if (!std::isfinite(x)) throw NumericalError(std::string(what) + ": non-finite input");
}
}  // namespace detail

// Mean absolute difference between two syntheses of the same source under
// different codes; maximized (clamped) inside the totals.
inline Value diversity_loss(const Value& y1, const Value& y2) {
  check_same_shape(y1.val(), y2.val(), "diversity_loss");
  return detail::l1_mean(y1, y2);
}

// Predictor output vs the sampled code.
inline Value age_code_loss(const Value& pred, const Value& sampled) {
  check_same_shape(pred.val(), sampled.val(), "age_code_loss");
  return detail::l1_mean(pred, sampled);
}

struct AdvPair {
  Value d_loss;
  Value g_loss;
};

// Non-saturating logistic GAN losses on raw logits (the k-masked branch of
// the image discriminator).
inline AdvPair adversarial_losses(const Value& real_logit, const Value& fake_logit) {
  detail::check_finite(real_logit, "adversarial_losses(real)");
  detail::check_finite(fake_logit, "adversarial_losses(fake)");
  Value d = ad::add(ad::mean_all(ad::softplus_v(ad::neg(real_logit))),
                    ad::mean_all(ad::softplus_v(fake_logit)));
  Value g = ad::mean_all(ad::softplus_v(ad::neg(fake_logit)));
  return {d, g};
}

// Saturating BCE on the landmark discriminator's sigmoid scores in (0,1).
inline AdvPair adversarial_losses_sigmoid(const Value& real_score, const Value& fake_score,
                                          double eps = 1e-12) {
  Value d = ad::neg(ad::add(
      ad::mean_all(ad::log_v(ad::add_scalar(real_score, eps))),
      ad::mean_all(ad::log_v(ad::add_scalar(
          ad::sub(ad::constant(Tensor(fake_score.shape(), 1.0)), fake_score), eps)))));
  Value g = ad::neg(ad::mean_all(ad::log_v(ad::add_scalar(fake_score, eps))));
  return {d, g};
}

// R1 gradient penalty: mean over the batch of the squared L2 norm of
// d(real logit)/d(real pixels). `grad_x` is the pixel gradient [N,3,H,W]
// produced by a differentiable backward pass.
inline Value r1_penalty(const Value& grad_x) {
  const double n = static_cast<double>(grad_x.shape()[0]);
  return ad::mul_scalar(ad::sum_all(ad::mul(grad_x, grad_x)), 1.0 / n);
}

// 0 when the generated face keeps the source's argmax race class, else
// 1 - (generated probability of the source class). The class-agreement
// test is a stop-gradient gate: gradients flow only through the else branch.
inline Value race_consistency_loss(const Tensor& src_dist, const Value& gen_dist) {
  const Tensor& g = gen_dist.val();
  if (src_dist.numel() != g.numel())
    throw DomainError("race distributions must have equal length");
  auto check_norm = [](const Tensor& d, const char* who) {
    double s = 0.0;
    for (double v : d.data) s += v;
    if (std::abs(s - 1.0) > 1e-6)
      throw DomainError(std::string(who) + " race distribution does not sum to 1");
  };
  check_norm(src_dist, "source");
  check_norm(g, "generated");
  int64_t src_arg = 0, gen_arg = 0;
  for (int64_t i = 1; i < src_dist.numel(); ++i) {
    if (src_dist[i] > src_dist[src_arg]) src_arg = i;
    if (g[i] > g[gen_arg]) gen_arg = i;
  }
  if (src_arg == gen_arg) return ad::scalar(0.0);
  Tensor onehot(g.shape);
  onehot[src_arg] = 1.0;
  Value flat_g = ad::reshape(gen_dist, {g.numel()});
  return ad::sub(ad::scalar(1.0), ad::dot(flat_g, ad::constant(Tensor({g.numel()}, onehot.data))));
}

// L1 distance over the 8 concatenated pose parameters (flattened scale x
// rotation, translation). Sum-reduced: a (3,4) translation gap scores 7.
inline Value pose_consistency_loss(const Value& p_x, const Value& p_y) {
  check_same_shape(p_x.val(), p_y.val(), "pose_consistency_loss");
  detail::check_finite(p_x, "pose_consistency_loss");
  detail::check_finite(p_y, "pose_consistency_loss");
  return ad::sum_all(ad::abs_v(ad::sub(p_x, p_y)));
}

inline Value cycle_loss(const Value& x, const Value& x_rec) {
  check_same_shape(x.val(), x_rec.val(), "cycle_loss");
  return detail::l1_mean(x, x_rec);
}

// Mean over the four feature layers of the mean absolute difference.
inline Value perceptual_loss(const std::vector<Value>& feats_x,
                             const std::vector<Value>& feats_rec) {
  if (feats_x.size() != 4 || feats_rec.size() != 4)
    throw DomainError("perceptual_loss expects exactly 4 feature tensors per image");
  Value acc = ad::scalar(0.0);
  for (size_t i = 0; i < 4; ++i) acc = ad::add(acc, detail::l1_mean(feats_x[i], feats_rec[i]));
  return ad::mul_scalar(acc, 0.25);
}

namespace detail {
inline Value cosine(const Value& a, const Value& b, double min_norm) {
  Value af = ad::reshape(a, {a.numel()});
  Value bf = ad::reshape(b, {b.numel()});
  const double na = std::sqrt(ECVecMap(a.val().data.data(), a.numel()).squaredNorm());
  const double nb = std::sqrt(ECVecMap(b.val().data.data(), b.numel()).squaredNorm());
  if (na < min_norm || nb < min_norm)
    throw DegenerateInput("cosine: vector norm below " + std::to_string(min_norm));
  Value denom = ad::sqrt_v(ad::mul(ad::dot(af, af), ad::dot(bf, bf)));
  return ad::div(ad::dot(af, bf), denom);
}
}  // namespace detail

// 1 - cos between identity embeddings (expected unit norm).
inline Value identity_feature_loss(const Value& e_x, const Value& e_y) {
  auto check_unit = [](const Value& e) {
    const double n = std::sqrt(ECVecMap(e.val().data.data(), e.numel()).squaredNorm());
    if (n < 1e-12) throw DegenerateInput("identity embedding has zero norm");
    if (std::abs(n - 1.0) > 1e-6)
      throw DomainError("identity embedding is not unit-norm (|e| = " + std::to_string(n) + ")");
  };
  check_unit(e_x);
  check_unit(e_y);
  return ad::sub(ad::scalar(1.0), detail::cosine(e_x, e_y, 1e-12));
}

// 1 - cos between landmark deviations from the source-group and
// target-group mean shapes. Near-zero deviations are degenerate.
inline Value personal_characteristic_loss(const Value& l_x, const Value& l_y,
                                          const Tensor& mean_src, const Tensor& mean_tgt) {
  if (l_x.numel() != kLandmarkVecDim || l_y.numel() != kLandmarkVecDim ||
      mean_src.numel() != kLandmarkVecDim || mean_tgt.numel() != kLandmarkVecDim)
    throw DomainError("personal_characteristic_loss expects length-162 vectors");
  Value dx = ad::sub(ad::reshape(l_x, {kLandmarkVecDim}),
                     ad::constant(Tensor({kLandmarkVecDim}, mean_src.data)));
  Value dy = ad::sub(ad::reshape(l_y, {kLandmarkVecDim}),
                     ad::constant(Tensor({kLandmarkVecDim}, mean_tgt.data)));
  return ad::sub(ad::scalar(1.0), detail::cosine(dx, dy, 1e-8));
}

// ---------------------------------------------------------------------------
// Totals (Eqs. 11/12). The maximized diversity term enters with a minus
// sign, clamped at tau = 1.0 so it cannot dominate the objective.

inline constexpr double kDiversityClamp = 1.0;

struct LossReport {
  std::vector<std::pair<std::string, double>> terms;
  double total = 0.0;

  double term(const std::string& name) const {
    for (const auto& [k, v] : terms)
      if (k == name) return v;
    throw DomainError("loss report has no term " + name);
  }
  void check_finite() const {
    for (const auto& [k, v] : terms)
      if (!std::isfinite(v)) throw NumericalError("loss term " + k + " is not finite");
    if (!std::isfinite(total)) throw NumericalError("loss total is not finite");
  }
};

struct ImageLossParts {
  Value adv, div, age, cyc, rac, ppc, idc;
};

struct LandmarkLossParts {
  Value adv, div, age, cyc, pos, pcc;
};

namespace detail {
inline Value clamped_div(const Value& div) { return ad::min_scalar(div, kDiversityClamp); }
}  // namespace detail

inline std::pair<Value, LossReport> total_image_loss(const ImageLossParts& p,
                                                     const HyperParams& hp) {
  const auto& lm = hp.lambda;
  Value total = ad::mul_scalar(p.adv, lm[0]);
  total = ad::sub(total, ad::mul_scalar(detail::clamped_div(p.div), lm[1]));
  total = ad::add(total, ad::mul_scalar(p.age, lm[2]));
  total = ad::add(total, ad::mul_scalar(p.cyc, lm[3]));
  total = ad::add(total, ad::mul_scalar(p.rac, lm[4]));
  total = ad::add(total, ad::mul_scalar(p.ppc, lm[5]));
  total = ad::add(total, ad::mul_scalar(p.idc, lm[6]));
  LossReport r;
  r.terms = {{"adv", p.adv.val()[0]}, {"div", p.div.val()[0]}, {"age", p.age.val()[0]},
             {"cyc", p.cyc.val()[0]}, {"rac", p.rac.val()[0]}, {"ppc", p.ppc.val()[0]},
             {"idc", p.idc.val()[0]}};
  r.total = total.val()[0];
  r.check_finite();
  return {total, r};
}

inline std::pair<Value, LossReport> total_landmark_loss(const LandmarkLossParts& p,
                                                        const HyperParams& hp) {
  const auto& lm = hp.lambda;
  Value total = ad::mul_scalar(p.adv, lm[7]);
  total = ad::sub(total, ad::mul_scalar(detail::clamped_div(p.div), lm[8]));
  total = ad::add(total, ad::mul_scalar(p.age, lm[9]));
  total = ad::add(total, ad::mul_scalar(p.cyc, lm[10]));
  total = ad::add(total, ad::mul_scalar(p.pos, lm[11]));
  total = ad::add(total, ad::mul_scalar(p.pcc, lm[12]));
  LossReport r;
  r.terms = {{"adv", p.adv.val()[0]}, {"div", p.div.val()[0]}, {"age", p.age.val()[0]},
             {"cyc", p.cyc.val()[0]}, {"pos", p.pos.val()[0]}, {"pcc", p.pcc.val()[0]}};
  r.total = total.val()[0];
  r.check_finite();
  return {total, r};
}

}  // namespace dlat::losses
