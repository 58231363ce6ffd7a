#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dlat/datamodel.hpp"
#include "dlat/nn.hpp"

namespace dlat {

// Channel widths follow the 256-resolution reference tables; at smaller
// working resolutions they scale by resolution/256 with a floor of 16.
inline int64_t scaled_channels(int64_t ref_channels, int64_t resolution) {
  return std::max<int64_t>(16, ref_channels * resolution / 256);
}

inline int check_resolution(int64_t r) {
  if (r < 32 || (r & (r - 1)) != 0)
    throw DomainError("image side must be a power of two >= 32, got " + std::to_string(r));
  int levels = 0;
  while ((int64_t{1} << levels) < r) ++levels;
  return levels;  // log2(r)
}

namespace detail {

// Pre-activation residual block, stride 1, constant width. `act` applies
// the block's nonlinearity (ReLU + pixel norm in the generator encoder).
struct ResBlock {
  nn::Conv2d conv1, conv2;

  ResBlock() = default;
  ResBlock(nn::ParamStore& ps, const std::string& name, int64_t ch, Rng& rng)
      : conv1(ps, name + ".c1", ch, ch, 3, 1, 1, rng), conv2(ps, name + ".c2", ch, ch, 3, 1, 1, rng) {}

  template <class Act>
  nn::Value forward(const nn::Value& x, Act act) const {
    return ad::add(x, conv2.forward(act(conv1.forward(act(x)))));
  }
};

// Pre-activation residual block that halves resolution and changes width;
// 1x1 strided conv on the skip path, leaky ReLU activations.
struct DownResBlock {
  nn::Conv2d conv1, conv2, skip;

  DownResBlock() = default;
  DownResBlock(nn::ParamStore& ps, const std::string& name, int64_t in, int64_t out, Rng& rng)
      : conv1(ps, name + ".c1", in, out, 3, 2, 1, rng),
        conv2(ps, name + ".c2", out, out, 3, 1, 1, rng),
        skip(ps, name + ".skip", in, out, 1, 2, 0, rng) {}

  nn::Value forward(const nn::Value& x) const {
    nn::Value h = conv2.forward(ad::lrelu(conv1.forward(ad::lrelu(x))));
    // 1/sqrt(2) keeps the variance of the merged paths near the input's.
    return ad::mul_scalar(ad::add(h, skip.forward(x)), 1.0 / std::sqrt(2.0));
  }
};

inline nn::Value enc_act(const nn::Value& x) { return nn::pixel_norm(ad::relu(x)); }

}  // namespace detail

// G_img: convolutional encoder (ReLU + pixel norm) into five residual
// blocks, then six age-modulated styled convolutions with bilinear
// upsampling after the last two, closed by a 1x1 conv + Tanh.
class ImageGenerator {
 public:
  explicit ImageGenerator(int64_t resolution, Rng& rng) : resolution_(resolution) {
    check_resolution(resolution);
    const int64_t c64 = scaled_channels(64, resolution);
    const int64_t c128 = scaled_channels(128, resolution);
    const int64_t c256 = scaled_channels(256, resolution);
    enc_.emplace_back(params_, "enc0", 3, c64, 7, 1, 3, rng);
    enc_.emplace_back(params_, "enc1", c64, c128, 3, 2, 1, rng);
    enc_.emplace_back(params_, "enc2", c128, c256, 3, 2, 1, rng);
    for (int i = 0; i < 5; ++i) res_.emplace_back(params_, "res" + std::to_string(i), c256, rng);
    const int64_t widths[6] = {c256, c256, c256, c256, c128, c64};
    int64_t in = c256;
    for (int i = 0; i < 6; ++i) {
      styled_.emplace_back(params_, "dec" + std::to_string(i), in, widths[i], 3, kImageCodeDim,
                           rng);
      in = widths[i];
    }
    out_ = nn::Conv2d(params_, "out", c64, 3, 1, 1, 0, rng);
  }

  // x: [N, 3, R, R], code: [N, 256] -> [N, 3, R, R] in [-1, 1].
  nn::Value forward(const nn::Value& x, const nn::Value& code) const {
    if (x.shape().size() != 4 || x.shape()[1] != 3 || x.shape()[2] != resolution_ ||
        x.shape()[3] != resolution_)
      throw DomainError("generator expects [N,3," + std::to_string(resolution_) + "," +
                        std::to_string(resolution_) + "], got " + x.val().shape_str());
    if (code.shape().back() != kImageCodeDim)
      throw DomainError("image age code must have length 256");
    nn::Value h = x;
    for (const auto& c : enc_) h = detail::enc_act(c.forward(h));
    for (const auto& r : res_) h = r.forward(h, detail::enc_act);
    for (size_t i = 0; i < styled_.size(); ++i) {
      h = nn::pixel_norm(ad::lrelu(styled_[i].forward(h, code)));
      if (i >= 4) h = ad::upsample_bilinear2(h);
    }
    return ad::tanh_v(out_.forward(h));
  }

  FaceImage generate(const FaceImage& x, const AgeLatentCode& u) const {
    if (u.modality != Modality::image) throw DomainError("generator needs an image-modality code");
    Tensor xb({1, 3, x.side(), x.side()}, x.pixels.data);
    Tensor cb({1, kImageCodeDim}, u.values.data);
    Tensor y = forward(ad::constant(std::move(xb)), ad::constant(std::move(cb))).val();
    return FaceImage{Tensor({3, x.side(), x.side()}, std::move(y.data))};
  }

  int64_t resolution() const { return resolution_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

 private:
  int64_t resolution_;
  nn::ParamStore params_;
  std::vector<nn::Conv2d> enc_;
  std::vector<detail::ResBlock> res_;
  std::vector<nn::StyledConv2d> styled_;
  nn::Conv2d out_;
};

// P_img: shared conv trunk (1x1 conv, strided residual blocks down to 4x4,
// 4x4 valid conv), then K unshared linear heads of width 256.
class ImagePredictor {
 public:
  ImagePredictor(int64_t resolution, int k, Rng& rng) : resolution_(resolution), k_(k) {
    const int levels = check_resolution(resolution);
    stem_ = nn::Conv2d(params_, "stem", 3, scaled_channels(64, resolution), 1, 1, 0, rng);
    int64_t ref = 64;
    for (int i = 0; i < levels - 2; ++i) {
      const int64_t ref_next = std::min<int64_t>(512, ref * 2);
      blocks_.emplace_back(params_, "blk" + std::to_string(i), scaled_channels(ref, resolution),
                           scaled_channels(ref_next, resolution), rng);
      ref = ref_next;
    }
    const int64_t c512 = scaled_channels(512, resolution);
    tail_ = nn::Conv2d(params_, "tail", c512, c512, 4, 1, 0, rng);
    for (int b = 0; b < k; ++b)
      heads_.emplace_back(params_, "head" + std::to_string(b), c512, kImageCodeDim, rng);
  }

  // y: [N, 3, R, R] -> [N, c512] shared features.
  nn::Value trunk(const nn::Value& y) const {
    nn::Value h = ad::lrelu(stem_.forward(y));
    for (const auto& b : blocks_) h = b.forward(h);
    h = ad::lrelu(tail_.forward(h));  // [N, c512, 1, 1]
    return ad::reshape(h, {y.shape()[0], h.numel() / y.shape()[0]});
  }

  // Head k applied to the whole batch: [N, 256].
  nn::Value predict(const nn::Value& y, int k) const {
    if (k < 0 || k >= k_) throw DomainError("predictor head index out of range");
    return heads_[static_cast<size_t>(k)].forward(trunk(y));
  }

  AgeLatentCode predict_code(const FaceImage& y, int k) const {
    Tensor yb({1, 3, y.side(), y.side()}, y.pixels.data);
    Tensor c = predict(ad::constant(std::move(yb)), k).val();
    return AgeLatentCode{Tensor({kImageCodeDim}, std::move(c.data)), Modality::image,
                         trainable_groups()[static_cast<size_t>(k)]};
  }

  const nn::Linear& head(int k) const { return heads_[static_cast<size_t>(k)]; }
  int k() const { return k_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

 private:
  int64_t resolution_;
  int k_;
  nn::ParamStore params_;
  nn::Conv2d stem_, tail_;
  std::vector<detail::DownResBlock> blocks_;
  std::vector<nn::Linear> heads_;
};

// D_img: StyleGAN-style conv pyramid with average-pool downsampling, a
// minibatch-stddev layer before the last block, and a 4x4 valid conv that
// emits K realism logits.
class ImageDiscriminator {
 public:
  ImageDiscriminator(int64_t resolution, int k, Rng& rng) : resolution_(resolution), k_(k) {
    const int levels = check_resolution(resolution);
    stem_ = nn::Conv2d(params_, "stem", 3, scaled_channels(64, resolution), 1, 1, 0, rng);
    int64_t ref = 64;
    for (int i = 0; i < levels - 2; ++i) {
      const int64_t ref_next = std::min<int64_t>(512, ref * 2);
      convs_.emplace_back(params_, "lvl" + std::to_string(i) + ".a",
                          scaled_channels(ref, resolution), scaled_channels(ref, resolution), 3, 1,
                          1, rng);
      convs_.emplace_back(params_, "lvl" + std::to_string(i) + ".b",
                          scaled_channels(ref, resolution), scaled_channels(ref_next, resolution),
                          3, 1, 1, rng);
      ref = ref_next;
    }
    const int64_t c512 = scaled_channels(512, resolution);
    penult_ = nn::Conv2d(params_, "penult", c512 + 1, c512, 3, 1, 1, rng);
    final_ = nn::Conv2d(params_, "final", c512, k, 4, 1, 0, rng);
  }

  // y: [N, 3, R, R] -> [N, K] logits.
  nn::Value forward(const nn::Value& y) const {
    nn::Value h = ad::lrelu(stem_.forward(y));
    for (size_t i = 0; i < convs_.size(); i += 2) {
      h = ad::lrelu(convs_[i].forward(h));
      h = ad::lrelu(convs_[i + 1].forward(h));
      h = ad::avgpool2(h);
    }
    h = nn::minibatch_stddev(h);
    h = ad::lrelu(penult_.forward(h));
    h = final_.forward(h);  // [N, K, 1, 1]
    return ad::reshape(h, {y.shape()[0], static_cast<int64_t>(k_)});
  }

  Tensor discriminate(const FaceImage& y) const {
    Tensor yb({1, 3, y.side(), y.side()}, y.pixels.data);
    Tensor out = forward(ad::constant(std::move(yb))).val();
    return Tensor({static_cast<int64_t>(k_)}, std::move(out.data));
  }

  int k() const { return k_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

 private:
  int64_t resolution_;
  int k_;
  nn::ParamStore params_;
  nn::Conv2d stem_, penult_, final_;
  std::vector<nn::Conv2d> convs_;
};

}  // namespace dlat
