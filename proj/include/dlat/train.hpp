#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "dlat/checkpoint.hpp"
#include "dlat/datamodel.hpp"
#include "dlat/imgnet.hpp"
#include "dlat/lmknet.hpp"
#include "dlat/losses.hpp"
#include "dlat/mapper.hpp"
#include "dlat/oracles.hpp"

// Training orchestration: alternating discriminator / generator+mapper+
// predictor Adam steps, loss wiring per the image and landmark objectives,
// deterministic checkpoint/resume.

namespace dlat {

// ---------------------------------------------------------------------------
// Adam with the StyleGAN-lineage betas; state serializes for exact resume.

class Adam {
 public:
  Adam(double beta1 = 0.0, double beta2 = 0.99, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::vector<nn::NamedParam>& params, const ad::Gradients& grads, double lr) {
    if (m_.empty()) {
      for (auto& p : params) {
        m_.emplace_back(p.value.shape());
        v_.emplace_back(p.value.shape());
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor g = grads.tensor(params[i].value);
      auto ga = g.vec().array();
      auto ma = m_[i].vec().array();
      auto va = v_[i].vec().array();
      auto wa = params[i].value.get()->val.vec().array();
      ma = beta1_ * ma + (1.0 - beta1_) * ga;
      va = beta2_ * va + (1.0 - beta2_) * ga.square();
      wa -= lr * (ma / bc1) / ((va / bc2).sqrt() + eps_);
    }
  }

  ckpt::json save(const std::filesystem::path& dir, const std::string& name) const {
    ckpt::json j;
    j["t"] = t_;
    std::vector<const Tensor*> ts;
    for (const auto& m : m_) ts.push_back(&m);
    for (const auto& v : v_) ts.push_back(&v);
    j["slots"] = m_.size();
    ckpt::json shapes = ckpt::json::array();
    for (const auto& m : m_) shapes.push_back(m.shape);
    j["shapes"] = shapes;
    j["blob"] = name + ".bin";
    if (!ts.empty()) ckpt::write_blob(dir / (name + ".bin"), ts);
    return j;
  }

  void load(const std::filesystem::path& dir, const ckpt::json& j) {
    t_ = j.at("t").get<int64_t>();
    m_.clear();
    v_.clear();
    const auto shapes = j.at("shapes").get<std::vector<std::vector<int64_t>>>();
    for (const auto& s : shapes) m_.emplace_back(s);
    for (const auto& s : shapes) v_.emplace_back(s);
    std::vector<Tensor*> ts;
    for (auto& m : m_) ts.push_back(&m);
    for (auto& v : v_) ts.push_back(&v);
    if (!ts.empty()) ckpt::read_blob(dir / j.at("blob").get<std::string>(), ts);
  }

 private:
  double beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

// ---------------------------------------------------------------------------
// Shared helpers

namespace detail {

// Head index of an age group within the first k trainable groups.
inline int head_of_group(AgeGroup g, int k) {
  const auto& tg = trainable_groups();
  for (int i = 0; i < k && i < static_cast<int>(tg.size()); ++i)
    if (tg[static_cast<size_t>(i)].index == g.index) return i;
  throw DomainError("group " + g.bounds_str() + " has no trainable head");
}

// Selects per-sample masked scores from [N, K]: returns [N, 1].
inline nn::Value mask_columns(const nn::Value& scores, const std::vector<int>& ks) {
  const int64_t n = scores.shape()[0], k = scores.shape()[1];
  Tensor mask({n, k});
  for (int64_t i = 0; i < n; ++i) mask[i * k + ks[static_cast<size_t>(i)]] = 1.0;
  return ad::matmul(ad::mul(scores, ad::constant(std::move(mask))),
                    ad::constant(Tensor({k, 1}, 1.0)));
}

inline void check_finite_term(double v, const std::string& term) {
  if (!std::isfinite(v)) throw NumericalError("loss term " + term + " is not finite");
}

struct LossLog {
  std::ofstream out;
  int64_t rows = 0;
  std::vector<std::string> header;

  void open(const std::filesystem::path& path, std::vector<std::string> cols, bool append) {
    header = std::move(cols);
    const bool existed = std::filesystem::exists(path);
    out.open(path, append ? std::ios::app : std::ios::trunc);
    if (!out) throw IoError("cannot open training log: " + path.string());
    if (!append || !existed) {
      out << "step";
      for (const auto& c : header) out << "," << c;
      out << ",lr\n";
    }
  }

  void row(int64_t step, const std::vector<double>& vals, double lr) {
    out << step;
    for (double v : vals) out << "," << v;
    out << "," << lr << "\n";
    out.flush();
    ++rows;
  }
};

inline std::string rng_to_string(const Rng& rng) {
  std::ostringstream ss;
  ss << rng;
  return ss.str();
}

inline void rng_from_string(Rng& rng, const std::string& s) {
  std::istringstream ss(s);
  ss >> rng;
  if (ss.fail()) throw IoError("corrupt RNG state in checkpoint");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// DLAT_img

struct ImgModel {
  DiverseAgeMapper mapper;
  ImageGenerator gen;
  ImagePredictor pred;
  ImageDiscriminator disc;
  int64_t resolution;
  int k;

  ImgModel(int64_t resolution_, int k_, Rng& rng)
      : mapper(Modality::image, k_, rng),
        gen(resolution_, rng),
        pred(resolution_, k_, rng),
        disc(resolution_, k_, rng),
        resolution(resolution_),
        k(k_) {}
};

struct ImgTrainState {
  std::unique_ptr<ImgModel> model;
  Adam opt_g;  // mapper + generator + predictor
  Adam opt_d;  // discriminator
  Rng rng;
  int64_t step = 0;
  HyperParams hp;
  uint64_t seed = 0;

  static constexpr const char* kVersion = "dlat-img-1";

  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    ckpt::json m;
    m["version"] = kVersion;
    m["net"] = "img";
    m["resolution"] = model->resolution;
    m["k"] = model->k;
    m["step"] = step;
    m["seed"] = seed;
    m["rng"] = detail::rng_to_string(rng);
    m["hp"] = Config::from_hyper_params(hp).kv;
    m["mapper"] = ckpt::save_store(dir, "mapper", model->mapper.params());
    m["generator"] = ckpt::save_store(dir, "generator", model->gen.params());
    m["predictor"] = ckpt::save_store(dir, "predictor", model->pred.params());
    m["discriminator"] = ckpt::save_store(dir, "discriminator", model->disc.params());
    m["opt_g"] = opt_g.save(dir, "opt_g");
    m["opt_d"] = opt_d.save(dir, "opt_d");
    ckpt::save_manifest(dir, m);
  }

  static ImgTrainState load(const std::filesystem::path& dir) {
    ckpt::json m = ckpt::load_manifest(dir);
    if (m.at("version").get<std::string>() != kVersion)
      throw IoError("unsupported image checkpoint version");
    ImgTrainState st;
    st.seed = m.at("seed").get<uint64_t>();
    Rng init(st.seed);
    st.model = std::make_unique<ImgModel>(m.at("resolution").get<int64_t>(),
                                          m.at("k").get<int>(), init);
    ckpt::load_store(dir, m.at("mapper"), st.model->mapper.params());
    ckpt::load_store(dir, m.at("generator"), st.model->gen.params());
    ckpt::load_store(dir, m.at("predictor"), st.model->pred.params());
    ckpt::load_store(dir, m.at("discriminator"), st.model->disc.params());
    st.opt_g.load(dir, m.at("opt_g"));
    st.opt_d.load(dir, m.at("opt_d"));
    st.step = m.at("step").get<int64_t>();
    detail::rng_from_string(st.rng, m.at("rng").get<std::string>());
    Config c;
    c.kv = m.at("hp").get<std::map<std::string, std::string>>();
    st.hp = c.hyper_params();
    return st;
  }
};

// One alternating D / G+M+P step; appends one row per step to `log`.
inline void train_img_steps(ImgTrainState& st, const std::vector<FaceImage>& dataset,
                            const MockOracles& oracles, int64_t steps, detail::LossLog& log) {
  ImgModel& mdl = *st.model;
  const int64_t batch = std::max(1, st.hp.batch);
  const int64_t steps_per_epoch =
      std::max<int64_t>(1, (static_cast<int64_t>(dataset.size()) + batch - 1) / batch);
  if (dataset.empty()) throw DomainError("train_img: empty dataset");
  for (const auto& f : dataset) {
    f.check();
    if (!f.group) throw DomainError("train_img: image without an age-group label");
    if (f.pixels.dim(1) != mdl.resolution) throw DomainError("train_img: resolution mismatch");
  }
  std::uniform_int_distribution<size_t> pick(0, dataset.size() - 1);
  std::uniform_int_distribution<int> pick_k(0, mdl.k - 1);

  for (int64_t s = 0; s < steps; ++s) {
    const int epoch = static_cast<int>(st.step / steps_per_epoch);
    const double lr = st.hp.lr_at_epoch(epoch);

    // Assemble the batch.
    Tensor xb({batch, 3, mdl.resolution, mdl.resolution});
    std::vector<int> src_heads(static_cast<size_t>(batch));
    std::vector<const FaceImage*> srcs(static_cast<size_t>(batch));
    for (int64_t i = 0; i < batch; ++i) {
      const FaceImage& f = dataset[pick(st.rng)];
      srcs[static_cast<size_t>(i)] = &f;
      src_heads[static_cast<size_t>(i)] = detail::head_of_group(*f.group, mdl.k);
      std::copy(f.pixels.data.begin(), f.pixels.data.end(),
                xb.data.begin() + i * f.pixels.numel());
    }
    const int k_tgt = pick_k(st.rng);
    std::vector<int> tgt_heads(static_cast<size_t>(batch), k_tgt);
    Tensor n1({batch, kNoiseDim}), n2({batch, kNoiseDim});
    fill_normal(n1, st.rng);
    fill_normal(n2, st.rng);

    // ---- Discriminator step (real vs detached fake, plus R1 on reals).
    nn::Value x_leaf = ad::leaf(xb);
    nn::Value u1 = mdl.mapper.forward(ad::constant(n1))[static_cast<size_t>(k_tgt)];
    nn::Value y1 = mdl.gen.forward(ad::constant(xb), u1);
    nn::Value real_scores = detail::mask_columns(mdl.disc.forward(x_leaf), src_heads);
    nn::Value fake_scores = detail::mask_columns(mdl.disc.forward(y1.detach()), tgt_heads);
    auto adv_d = losses::adversarial_losses(real_scores, fake_scores);
    nn::Value grad_x = ad::backward(ad::sum_all(real_scores)).at(x_leaf);
    nn::Value r1 = losses::r1_penalty(grad_x);
    nn::Value d_total = ad::add(adv_d.d_loss, r1);
    detail::check_finite_term(adv_d.d_loss.val()[0], "d_adv");
    detail::check_finite_term(r1.val()[0], "r1");
    st.opt_d.step(mdl.disc.params().all(), ad::backward(d_total), lr);

    // ---- Generator + mapper + predictor step.
    nn::Value xv = ad::constant(xb);
    nn::Value u1g = mdl.mapper.forward(ad::constant(n1))[static_cast<size_t>(k_tgt)];
    nn::Value u2g = mdl.mapper.forward(ad::constant(n2))[static_cast<size_t>(k_tgt)];
    nn::Value y1g = mdl.gen.forward(xv, u1g);
    nn::Value y2g = mdl.gen.forward(xv, u2g);

    losses::ImageLossParts parts;
    parts.div = losses::diversity_loss(y1g, y2g);
    parts.age = losses::age_code_loss(mdl.pred.predict(y1g, k_tgt), u1g);
    parts.adv =
        losses::adversarial_losses(real_scores.detach(),
                                   detail::mask_columns(mdl.disc.forward(y1g), tgt_heads))
            .g_loss;

    // Race consistency on Y1 only (oracle cost); mean over the batch.
    nn::Value race_gen = oracles.race_v(y1g);
    nn::Value rac = ad::scalar(0.0);
    for (int64_t i = 0; i < batch; ++i) {
      Tensor src_dist = oracles.race(*srcs[static_cast<size_t>(i)]);
      rac = ad::add(rac, losses::race_consistency_loss(
                             src_dist, ad::slice_axis0(
                                           ad::reshape(race_gen, {batch, kRaceClasses}), i, 1)));
    }
    parts.rac = ad::mul_scalar(rac, 1.0 / static_cast<double>(batch));

    // Cycle: regenerate the source from Y1 using the source-head code.
    nn::Value trunk_x = mdl.pred.trunk(xv);
    std::vector<nn::Value> rec_codes;
    for (int64_t i = 0; i < batch; ++i)
      rec_codes.push_back(mdl.pred.head(src_heads[static_cast<size_t>(i)])
                              .forward(ad::slice_axis0(trunk_x, i, 1)));
    nn::Value rec_code = rec_codes.size() == 1 ? rec_codes[0] : ad::concat_axis0(rec_codes);
    nn::Value x_rec = mdl.gen.forward(y1g, rec_code);
    parts.cyc = losses::cycle_loss(xv, x_rec);
    parts.ppc = losses::perceptual_loss(oracles.perceptual_v(xv), oracles.perceptual_v(x_rec));

    // Identity consistency between source and Y1 embeddings.
    nn::Value ex = oracles.embed_v(xv);
    nn::Value ey = oracles.embed_v(y1g);
    nn::Value idc = ad::scalar(0.0);
    for (int64_t i = 0; i < batch; ++i)
      idc = ad::add(idc, losses::identity_feature_loss(ad::slice_axis0(ex, i, 1),
                                                       ad::slice_axis0(ey, i, 1)));
    parts.idc = ad::mul_scalar(idc, 1.0 / static_cast<double>(batch));

    auto [g_total, report] = losses::total_image_loss(parts, st.hp);
    ad::Gradients grads = ad::backward(g_total);
    // One optimizer over the concatenated stores keeps a single Adam state.
    std::vector<nn::NamedParam> joint;
    for (auto* sp : {&mdl.mapper.params(), &mdl.gen.params(), &mdl.pred.params()})
      for (auto& p : sp->all()) joint.push_back(p);
    st.opt_g.step(joint, grads, lr);

    std::vector<double> row;
    for (const auto& [name, v] : report.terms) row.push_back(v);
    row.push_back(report.total);
    row.push_back(adv_d.d_loss.val()[0]);
    row.push_back(r1.val()[0]);
    log.row(st.step, row, lr);
    ++st.step;
  }
}

inline std::vector<std::string> img_log_columns() {
  return {"adv", "div", "age", "cyc", "rac", "ppc", "idc", "total", "d_adv", "r1"};
}

// ---------------------------------------------------------------------------
// DLAT_lmk

struct LmkModel {
  DiverseAgeMapper mapper;
  LandmarkGenerator gen;
  LandmarkPredictor pred;
  LandmarkDiscriminator disc;
  PcaBasis basis;
  ReferencePoints3D ref;
  int k;

  LmkModel(int k_, Rng& rng)
      : mapper(Modality::landmark, k_, rng),
        gen(rng),
        pred(k_, rng),
        disc(k_, rng),
        ref(make_reference_points()),
        k(k_) {}
};

struct LmkTrainState {
  std::unique_ptr<LmkModel> model;
  Adam opt_g;
  Adam opt_d;
  Rng rng;
  int64_t step = 0;
  HyperParams hp;
  uint64_t seed = 0;
  std::map<int, Tensor> group_means;  // group index -> [162]
  int64_t pcc_skipped = 0;            // degenerate-deviation samples skipped

  static constexpr const char* kVersion = "dlat-lmk-1";

  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    ckpt::json m;
    m["version"] = kVersion;
    m["net"] = "lmk";
    m["k"] = model->k;
    m["step"] = step;
    m["seed"] = seed;
    m["rng"] = detail::rng_to_string(rng);
    m["hp"] = Config::from_hyper_params(hp).kv;
    m["mapper"] = ckpt::save_store(dir, "mapper", model->mapper.params());
    m["generator"] = ckpt::save_store(dir, "generator", model->gen.params());
    m["predictor"] = ckpt::save_store(dir, "predictor", model->pred.params());
    m["discriminator"] = ckpt::save_store(dir, "discriminator", model->disc.params());
    m["pca_mean"] = ckpt::save_tensor(dir, "pca_mean", model->basis.mean);
    m["pca_components"] = ckpt::save_tensor(dir, "pca_components", model->basis.components);
    m["pca_variances"] = ckpt::save_tensor(dir, "pca_variances", model->basis.variances);
    m["ref_points"] = ckpt::save_tensor(dir, "ref_points", model->ref.points);
    ckpt::json gm;
    for (const auto& [g, t] : group_means)
      gm[std::to_string(g)] = ckpt::save_tensor(dir, "group_mean_" + std::to_string(g), t);
    m["group_means"] = gm;
    m["opt_g"] = opt_g.save(dir, "opt_g");
    m["opt_d"] = opt_d.save(dir, "opt_d");
    ckpt::save_manifest(dir, m);
  }

  static LmkTrainState load(const std::filesystem::path& dir) {
    ckpt::json m = ckpt::load_manifest(dir);
    if (m.at("version").get<std::string>() != kVersion)
      throw IoError("unsupported landmark checkpoint version");
    LmkTrainState st;
    st.seed = m.at("seed").get<uint64_t>();
    Rng init(st.seed);
    st.model = std::make_unique<LmkModel>(m.at("k").get<int>(), init);
    ckpt::load_store(dir, m.at("mapper"), st.model->mapper.params());
    ckpt::load_store(dir, m.at("generator"), st.model->gen.params());
    ckpt::load_store(dir, m.at("predictor"), st.model->pred.params());
    ckpt::load_store(dir, m.at("discriminator"), st.model->disc.params());
    st.model->basis.mean = ckpt::load_tensor(dir, m.at("pca_mean"));
    st.model->basis.components = ckpt::load_tensor(dir, m.at("pca_components"));
    st.model->basis.variances = ckpt::load_tensor(dir, m.at("pca_variances"));
    st.model->ref.points = ckpt::load_tensor(dir, m.at("ref_points"));
    for (const auto& [key, entry] : m.at("group_means").items())
      st.group_means[std::stoi(key)] = ckpt::load_tensor(dir, entry);
    st.opt_g.load(dir, m.at("opt_g"));
    st.opt_d.load(dir, m.at("opt_d"));
    st.step = m.at("step").get<int64_t>();
    detail::rng_from_string(st.rng, m.at("rng").get<std::string>());
    Config c;
    c.kv = m.at("hp").get<std::map<std::string, std::string>>();
    st.hp = c.hyper_params();
    return st;
  }
};

// Arithmetic mean of each group's flattened landmark vectors.
inline std::map<int, Tensor> landmark_group_means(const std::vector<LandmarkSet>& sets) {
  std::map<int, Tensor> sums;
  std::map<int, int64_t> counts;
  for (const auto& l : sets) {
    l.check();
    if (!l.group) throw DomainError("landmark set without an age-group label");
    auto [it, fresh] = sums.try_emplace(l.group->index, Tensor({kLandmarkVecDim}));
    it->second.vec() += l.points.vec();
    counts[l.group->index] += 1;
  }
  for (auto& [g, t] : sums) t.vec() /= static_cast<double>(counts[g]);
  return sums;
}

inline void train_lmk_steps(LmkTrainState& st, const std::vector<LandmarkSet>& dataset,
                            int64_t steps, detail::LossLog& log) {
  LmkModel& mdl = *st.model;
  const int64_t batch = std::max(1, st.hp.batch);
  const int64_t steps_per_epoch =
      std::max<int64_t>(1, (static_cast<int64_t>(dataset.size()) + batch - 1) / batch);
  if (dataset.empty()) throw DomainError("train_lmk: empty dataset");
  std::uniform_int_distribution<size_t> pick(0, dataset.size() - 1);
  std::uniform_int_distribution<int> pick_k(0, mdl.k - 1);

  for (int64_t s = 0; s < steps; ++s) {
    const int epoch = static_cast<int>(st.step / steps_per_epoch);
    const double lr = st.hp.lr_at_epoch(epoch);

    Tensor lb({batch, kLandmarkVecDim});
    std::vector<int> src_heads(static_cast<size_t>(batch));
    std::vector<const LandmarkSet*> srcs(static_cast<size_t>(batch));
    for (int64_t i = 0; i < batch; ++i) {
      const LandmarkSet& l = dataset[pick(st.rng)];
      if (!l.group) throw DomainError("train_lmk: landmark set without a label");
      srcs[static_cast<size_t>(i)] = &l;
      src_heads[static_cast<size_t>(i)] = detail::head_of_group(*l.group, mdl.k);
      std::copy(l.points.data.begin(), l.points.data.end(),
                lb.data.begin() + i * kLandmarkVecDim);
    }
    const int k_tgt = pick_k(st.rng);
    std::vector<int> tgt_heads(static_cast<size_t>(batch), k_tgt);
    Tensor n1({batch, kNoiseDim}), n2({batch, kNoiseDim});
    fill_normal(n1, st.rng);
    fill_normal(n2, st.rng);

    nn::Value lv = ad::constant(lb);
    nn::Value real_coeffs = pca_project_v(lv, mdl.basis);

    // ---- Discriminator step (saturating BCE on sigmoid scores).
    nn::Value u1 = mdl.mapper.forward(ad::constant(n1))[static_cast<size_t>(k_tgt)];
    nn::Value y1 = mdl.gen.forward_flat(lv, u1, mdl.basis);
    nn::Value real_s = detail::mask_columns(mdl.disc.forward(real_coeffs), src_heads);
    nn::Value fake_s = detail::mask_columns(
        mdl.disc.forward(pca_project_v(y1.detach(), mdl.basis)), tgt_heads);
    auto adv_d = losses::adversarial_losses_sigmoid(real_s, fake_s);
    detail::check_finite_term(adv_d.d_loss.val()[0], "d_adv");
    st.opt_d.step(mdl.disc.params().all(), ad::backward(adv_d.d_loss), lr);

    // ---- Generator + mapper + predictor step.
    nn::Value u1g = mdl.mapper.forward(ad::constant(n1))[static_cast<size_t>(k_tgt)];
    nn::Value u2g = mdl.mapper.forward(ad::constant(n2))[static_cast<size_t>(k_tgt)];
    nn::Value y1g = mdl.gen.forward_flat(lv, u1g, mdl.basis);
    nn::Value y2g = mdl.gen.forward_flat(lv, u2g, mdl.basis);
    nn::Value gen_coeffs = pca_project_v(y1g, mdl.basis);

    losses::LandmarkLossParts parts;
    parts.div = losses::diversity_loss(y1g, y2g);
    parts.age = losses::age_code_loss(mdl.pred.predict(gen_coeffs, k_tgt), u1g);
    parts.adv = losses::adversarial_losses_sigmoid(
                    real_s.detach(), detail::mask_columns(mdl.disc.forward(gen_coeffs), tgt_heads))
                    .g_loss;

    // Cycle through the source-head predicted code.
    nn::Value trunk = mdl.pred.trunk(real_coeffs);
    std::vector<nn::Value> rec_codes;
    for (int64_t i = 0; i < batch; ++i)
      rec_codes.push_back(mdl.pred.head(src_heads[static_cast<size_t>(i)])
                              .forward(ad::slice_axis0(trunk, i, 1)));
    nn::Value rec_code = rec_codes.size() == 1 ? rec_codes[0] : ad::concat_axis0(rec_codes);
    nn::Value l_rec = mdl.gen.forward_flat(y1g, rec_code, mdl.basis);
    parts.cyc = losses::cycle_loss(lv, l_rec);

    // Pose consistency on Y1 (per-sample weak-perspective fits).
    nn::Value pos = ad::scalar(0.0);
    for (int64_t i = 0; i < batch; ++i) {
      nn::Value p_src = pose_params_v(
          select_pose_rows(ad::slice_axis0(lv, i, 1)), mdl.ref);
      nn::Value p_gen = pose_params_v(
          select_pose_rows(ad::slice_axis0(y1g, i, 1)), mdl.ref);
      pos = ad::add(pos, losses::pose_consistency_loss(p_src.detach(), p_gen));
    }
    parts.pos = ad::mul_scalar(pos, 1.0 / static_cast<double>(batch));

    // Personal characteristic consistency; degenerate deviations skipped.
    nn::Value pcc = ad::scalar(0.0);
    int64_t pcc_n = 0;
    for (int64_t i = 0; i < batch; ++i) {
      const int gs = srcs[static_cast<size_t>(i)]->group->index;
      const int gt = trainable_groups()[static_cast<size_t>(k_tgt)].index;
      auto it_s = st.group_means.find(gs);
      auto it_t = st.group_means.find(gt);
      if (it_s == st.group_means.end() || it_t == st.group_means.end())
        throw DomainError("missing per-group mean landmarks for pcc");
      try {
        pcc = ad::add(pcc, losses::personal_characteristic_loss(
                               ad::slice_axis0(lv, i, 1), ad::slice_axis0(y1g, i, 1),
                               it_s->second, it_t->second));
        ++pcc_n;
      } catch (const DegenerateInput&) {
        ++st.pcc_skipped;
      }
    }
    parts.pcc = pcc_n > 0 ? ad::mul_scalar(pcc, 1.0 / static_cast<double>(pcc_n))
                          : ad::scalar(0.0);

    auto [g_total, report] = losses::total_landmark_loss(parts, st.hp);
    ad::Gradients grads = ad::backward(g_total);
    std::vector<nn::NamedParam> joint;
    for (auto* sp : {&mdl.mapper.params(), &mdl.gen.params(), &mdl.pred.params()})
      for (auto& p : sp->all()) joint.push_back(p);
    st.opt_g.step(joint, grads, lr);

    std::vector<double> row;
    for (const auto& [name, v] : report.terms) row.push_back(v);
    row.push_back(report.total);
    row.push_back(adv_d.d_loss.val()[0]);
    log.row(st.step, row, lr);
    ++st.step;
  }
}

inline std::vector<std::string> lmk_log_columns() {
  return {"adv", "div", "age", "cyc", "pos", "pcc", "total", "d_adv"};
}

}  // namespace dlat
