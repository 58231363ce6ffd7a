#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dlat/autodiff.hpp"

// Small module layer on top of the autodiff primitives: parameter registry,
// fan-in init, linear/conv modules and the StyleGAN-flavoured composites
// (pixel norm, weight demodulation, minibatch stddev).

namespace dlat::nn {

using ad::Value;

struct NamedParam {
  std::string name;
  Value value;
};

// Owns the trainable leaves of one network, in registration order. The order
// is the serialization order.
class ParamStore {
 public:
  Value add(const std::string& name, Tensor init) {
    params_.push_back({name, ad::leaf(std::move(init))});
    return params_.back().value;
  }

  const std::vector<NamedParam>& all() const { return params_; }
  std::vector<NamedParam>& all() { return params_; }

  int64_t total_size() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  const NamedParam& find(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return p;
    throw std::out_of_range("no parameter named " + name);
  }

 private:
  std::vector<NamedParam> params_;
};

// Fan-in scaled normal init keeps activations O(1) at depth.
inline Tensor fanin_normal(std::vector<int64_t> shape, int64_t fan_in, Rng& rng) {
  return random_normal(std::move(shape), rng, 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

struct Linear {
  Value W;  // [out, in]
  Value b;  // [out]
  int64_t in = 0, out = 0;

  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, int64_t in_, int64_t out_, Rng& rng,
         double bias_init = 0.0)
      : in(in_), out(out_) {
    W = ps.add(name + ".w", fanin_normal({out_, in_}, in_, rng));
    Tensor bt({out_}, bias_init);
    b = ps.add(name + ".b", std::move(bt));
  }

  // x: [N, in] -> [N, out]
  Value forward(const Value& x) const {
    return ad::add_rowvec(ad::matmul(x, ad::transpose(W)), b);
  }
};

struct Conv2d {
  Value W;  // [out, in, k, k]
  Value b;  // [out]
  int64_t stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(ParamStore& ps, const std::string& name, int64_t in, int64_t out, int64_t k,
         int64_t stride_, int64_t pad_, Rng& rng)
      : stride(stride_), pad(pad_) {
    W = ps.add(name + ".w", fanin_normal({out, in, k, k}, in * k * k, rng));
    b = ps.add(name + ".b", Tensor({out}));
  }

  Value forward(const Value& x) const {
    return ad::add_bias_nchw(ad::conv2d(x, W, stride, pad), b);
  }
};

// x / sqrt(mean_c(x^2) + eps): per-position channel RMS normalization.
inline Value pixel_norm(const Value& x, double eps = 1e-8) {
  const int64_t C = x.shape()[1];
  Value ms = ad::mul_scalar(ad::sum_channels(ad::mul(x, x)), 1.0 / static_cast<double>(C));
  Value denom = ad::sqrt_v(ad::add_scalar(ms, eps));
  Value recip = ad::div(ad::constant(Tensor(denom.shape(), 1.0)), denom);
  return ad::mul(x, ad::broadcast_channels(recip, C));
}

// Appends one channel holding the batch-wide mean feature stddev.
inline Value minibatch_stddev(const Value& x, double eps = 1e-8) {
  const int64_t N = x.shape()[0];
  Value m = ad::mul_scalar(ad::sum_axis0(x), 1.0 / static_cast<double>(N));
  Value d = ad::sub(x, ad::broadcast_axis0(m, N));
  Value var = ad::mul_scalar(ad::sum_axis0(ad::mul(d, d)), 1.0 / static_cast<double>(N));
  Value sd = ad::sqrt_v(ad::add_scalar(ad::mean_all(var), eps));
  Value chan = ad::broadcast_to(sd, {N, 1, x.shape()[2], x.shape()[3]});
  return ad::concat_channels({x, chan});
}

// ---------------------------------------------------------------------------
// Styled convolution with weight demodulation. The style vector scales the
// input channels of the conv weights; each output channel is then rescaled
// to unit L2 norm (eps inside the square root).

struct StyledConv2d {
  Value W;       // [out, in, k, k]
  Value b;       // [out]
  Linear style;  // code -> per-input-channel scale, bias initialised at 1
  int64_t in = 0, out = 0, k = 0;

  StyledConv2d() = default;
  StyledConv2d(ParamStore& ps, const std::string& name, int64_t in_, int64_t out_, int64_t k_,
               int64_t code_dim, Rng& rng)
      : in(in_), out(out_), k(k_) {
    W = ps.add(name + ".w", fanin_normal({out_, in_, k_, k_}, in_ * k_ * k_, rng));
    b = ps.add(name + ".b", Tensor({out_}));
    style = Linear(ps, name + ".style", code_dim, in_, rng, /*bias_init=*/1.0);
  }

  // Per-sample modulated+demodulated weights for style row n of s [N, in].
  Value demodulated_weights(const Value& s_row, double eps = 1e-8) const {
    // Expand scale [1, in] over taps and output channels.
    Value s_taps = ad::matmul(ad::transpose(s_row), ad::constant(Tensor({1, k * k}, 1.0)));
    Value s_w = ad::broadcast_axis0(ad::reshape(s_taps, {1, in, k, k}), out);
    Value wmod = ad::mul(W, s_w);
    Value flat = ad::reshape(wmod, {out, in * k * k});
    Value norms = ad::matmul(ad::mul(flat, flat), ad::constant(Tensor({in * k * k, 1}, 1.0)));
    Value inv = ad::div(ad::constant(Tensor({out, 1}, 1.0)),
                        ad::sqrt_v(ad::add_scalar(norms, eps)));
    Value inv_full = ad::matmul(inv, ad::constant(Tensor({1, in * k * k}, 1.0)));
    return ad::reshape(ad::mul(flat, inv_full), {out, in, k, k});
  }

  // x: [N, in, H, W], code: [N, code_dim]
  Value forward(const Value& x, const Value& code) const {
    const int64_t N = x.shape()[0];
    Value s = style.forward(code);  // [N, in]
    std::vector<Value> rows;
    rows.reserve(static_cast<size_t>(N));
    for (int64_t n = 0; n < N; ++n) {
      Value wn = demodulated_weights(ad::slice_axis0(s, n, 1));
      Value xn = ad::slice_axis0(x, n, 1);
      rows.push_back(ad::conv2d(xn, wn, 1, (k - 1) / 2));
    }
    Value y = rows.size() == 1 ? rows[0] : ad::concat_axis0(rows);
    return ad::add_bias_nchw(y, b);
  }
};

// FiLM layer: h <- lrelu(gamma(u) * (W h) + beta(u)).
struct FilmLayer {
  Value W;  // [out, in]
  Linear cond;  // code -> [2*out] = (gamma, beta); gamma bias initialised at 1

  FilmLayer() = default;
  FilmLayer(ParamStore& ps, const std::string& name, int64_t in, int64_t out, int64_t code_dim,
            Rng& rng) {
    W = ps.add(name + ".w", fanin_normal({out, in}, in, rng));
    cond = Linear(ps, name + ".cond", code_dim, 2 * out, rng);
    // gamma half of the bias starts at 1 so the layer opens as a plain linear.
    Tensor& bt = cond.b.get()->val;
    for (int64_t i = 0; i < out; ++i) bt[i] = 1.0;
  }

  // h: [N, in], code: [N, code_dim]
  Value forward(const Value& h, const Value& code, double slope = 0.2) const {
    const int64_t out = W.shape()[0];
    Value gb = cond.forward(code);   // [N, 2*out]
    Value gbt = ad::transpose(gb);   // [2*out, N]
    Value g_part = ad::transpose(ad::slice_axis0(gbt, 0, out));    // [N, out]
    Value b_part = ad::transpose(ad::slice_axis0(gbt, out, out));  // [N, out]
    Value lin = ad::matmul(h, ad::transpose(W));
    return ad::lrelu(ad::add(ad::mul(g_part, lin), b_part), slope);
  }
};

}  // namespace dlat::nn
