#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "dlat/tensor.hpp"

// Reverse-mode automatic differentiation on Tensor values. The backward pass
// of every primitive is itself expressed through primitives, so gradients are
// graph values and can be differentiated again (the discriminator's R1
// penalty relies on this).

namespace dlat::ad {

struct Node;

class Value {
 public:
  Value() = default;
  explicit Value(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  const Tensor& val() const;
  const std::vector<int64_t>& shape() const;
  int64_t numel() const;
  bool defined() const { return node_ != nullptr; }
  bool requires_grad() const;
  Node* get() const { return node_.get(); }

  Value detach() const;

 private:
  std::shared_ptr<Node> node_;
};

using Vjp = std::function<std::vector<Value>(const Value& g)>;

struct Node {
  Tensor val;
  std::vector<Value> inputs;
  Vjp vjp;
  bool requires_grad = false;
};

inline const Tensor& Value::val() const { return node_->val; }
inline const std::vector<int64_t>& Value::shape() const { return node_->val.shape; }
inline int64_t Value::numel() const { return node_->val.numel(); }
inline bool Value::requires_grad() const { return node_ && node_->requires_grad; }

inline Value constant(Tensor t) {
  auto n = std::make_shared<Node>();
  n->val = std::move(t);
  return Value(std::move(n));
}

inline Value scalar(double v) { return constant(Tensor::scalar(v)); }

// Trainable leaf.
inline Value leaf(Tensor t) {
  auto n = std::make_shared<Node>();
  n->val = std::move(t);
  n->requires_grad = true;
  return Value(std::move(n));
}

inline Value Value::detach() const { return constant(node_->val); }

inline Value make(Tensor val, std::vector<Value> inputs, Vjp vjp) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  for (const Value& v : inputs)
    if (v.defined() && v.requires_grad()) n->requires_grad = true;
  if (n->requires_grad) {
    n->inputs = std::move(inputs);
    n->vjp = std::move(vjp);
  }
  return Value(std::move(n));
}

// ---------------------------------------------------------------------------
// Elementwise ops

inline Value add(const Value& a, const Value& b) {
  check_same_shape(a.val(), b.val(), "add");
  Tensor out = a.val();
  out.vec() += b.val().vec();
  return make(std::move(out), {a, b},
              [](const Value& g) { return std::vector<Value>{g, g}; });
}

inline Value neg(const Value& a) {
  Tensor out = a.val();
  out.vec() = -out.vec();
  return make(std::move(out), {a},
              [](const Value& g) { return std::vector<Value>{neg(g)}; });
}

inline Value sub(const Value& a, const Value& b) {
  check_same_shape(a.val(), b.val(), "sub");
  Tensor out = a.val();
  out.vec() -= b.val().vec();
  return make(std::move(out), {a, b},
              [](const Value& g) { return std::vector<Value>{g, neg(g)}; });
}

inline Value mul(const Value& a, const Value& b) {
  check_same_shape(a.val(), b.val(), "mul");
  Tensor out = a.val();
  out.vec().array() *= b.val().vec().array();
  return make(std::move(out), {a, b},
              [a, b](const Value& g) { return std::vector<Value>{mul(g, b), mul(g, a)}; });
}

inline Value mul_scalar(const Value& a, double s) {
  Tensor out = a.val();
  out.vec() *= s;
  return make(std::move(out), {a},
              [s](const Value& g) { return std::vector<Value>{mul_scalar(g, s)}; });
}

inline Value add_scalar(const Value& a, double s) {
  Tensor out = a.val();
  out.vec().array() += s;
  return make(std::move(out), {a},
              [](const Value& g) { return std::vector<Value>{g}; });
}

inline Value div(const Value& a, const Value& b) {
  check_same_shape(a.val(), b.val(), "div");
  Tensor out = a.val();
  out.vec().array() /= b.val().vec().array();
  return make(std::move(out), {a, b}, [a, b](const Value& g) {
    Value ga = div(g, b);
    Value gb = neg(div(mul(g, a), mul(b, b)));
    return std::vector<Value>{ga, gb};
  });
}

inline Value relu(const Value& a) {
  Tensor out = a.val();
  Tensor mask(out.shape);
  for (int64_t i = 0; i < out.numel(); ++i) {
    mask[i] = out[i] > 0.0 ? 1.0 : 0.0;
    out[i] *= mask[i];
  }
  Value m = constant(std::move(mask));
  return make(std::move(out), {a},
              [m](const Value& g) { return std::vector<Value>{mul(g, m)}; });
}

inline Value lrelu(const Value& a, double slope = 0.2) {
  Tensor out = a.val();
  Tensor mask(out.shape);
  for (int64_t i = 0; i < out.numel(); ++i) {
    mask[i] = out[i] > 0.0 ? 1.0 : slope;
    out[i] *= mask[i];
  }
  Value m = constant(std::move(mask));
  return make(std::move(out), {a},
              [m](const Value& g) { return std::vector<Value>{mul(g, m)}; });
}

inline Value tanh_v(const Value& a) {
  Tensor out = a.val();
  out.vec() = out.vec().array().tanh();
  return make(std::move(out), {a}, [a](const Value& g) {
    Value y = tanh_v(a);
    Value d = add_scalar(neg(mul(y, y)), 1.0);
    return std::vector<Value>{mul(g, d)};
  });
}

inline Value sigmoid_v(const Value& a) {
  Tensor out = a.val();
  for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
  return make(std::move(out), {a}, [a](const Value& g) {
    Value s = sigmoid_v(a);
    Value d = mul(s, add_scalar(neg(s), 1.0));
    return std::vector<Value>{mul(g, d)};
  });
}

inline Value softplus_v(const Value& a) {
  Tensor out = a.val();
  for (double& v : out.data) v = std::log1p(std::exp(-std::abs(v))) + std::max(v, 0.0);
  return make(std::move(out), {a}, [a](const Value& g) {
    return std::vector<Value>{mul(g, sigmoid_v(a))};
  });
}

inline Value abs_v(const Value& a) {
  Tensor out = a.val();
  Tensor sign(out.shape);
  for (int64_t i = 0; i < out.numel(); ++i) {
    sign[i] = out[i] >= 0.0 ? 1.0 : -1.0;
    out[i] = std::abs(out[i]);
  }
  Value s = constant(std::move(sign));
  return make(std::move(out), {a},
              [s](const Value& g) { return std::vector<Value>{mul(g, s)}; });
}

inline Value sqrt_v(const Value& a) {
  Tensor out = a.val();
  out.vec() = out.vec().array().sqrt();
  return make(std::move(out), {a}, [a](const Value& g) {
    Value y = sqrt_v(a);
    return std::vector<Value>{mul_scalar(div(g, y), 0.5)};
  });
}

inline Value exp_v(const Value& a) {
  Tensor out = a.val();
  out.vec() = out.vec().array().exp();
  return make(std::move(out), {a}, [a](const Value& g) {
    return std::vector<Value>{mul(g, exp_v(a))};
  });
}

inline Value log_v(const Value& a) {
  Tensor out = a.val();
  out.vec() = out.vec().array().log();
  return make(std::move(out), {a},
              [a](const Value& g) { return std::vector<Value>{div(g, a)}; });
}

// min(x, cap) elementwise against a constant cap; gradient is gated.
inline Value min_scalar(const Value& a, double cap) {
  Tensor out = a.val();
  Tensor mask(out.shape);
  for (int64_t i = 0; i < out.numel(); ++i) {
    mask[i] = out[i] < cap ? 1.0 : 0.0;
    out[i] = std::min(out[i], cap);
  }
  Value m = constant(std::move(mask));
  return make(std::move(out), {a},
              [m](const Value& g) { return std::vector<Value>{mul(g, m)}; });
}

// ---------------------------------------------------------------------------
// Reductions, reshapes, broadcasts

inline Value broadcast_to(const Value& s, std::vector<int64_t> shape);

inline Value sum_all(const Value& a) {
  Tensor out({1});
  out[0] = a.val().vec().sum();
  return make(std::move(out), {a}, [sh = a.shape()](const Value& g) {
    return std::vector<Value>{broadcast_to(g, sh)};
  });
}

inline Value broadcast_to(const Value& s, std::vector<int64_t> shape) {
  if (s.numel() != 1) throw std::invalid_argument("broadcast_to: source not scalar");
  Tensor out(shape, s.val()[0]);
  return make(std::move(out), {s},
              [](const Value& g) { return std::vector<Value>{sum_all(g)}; });
}

inline Value mean_all(const Value& a) {
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

inline Value reshape(const Value& a, std::vector<int64_t> shape) {
  if (Tensor::numel_of(shape) != a.numel())
    throw std::invalid_argument("reshape: numel mismatch");
  Tensor out(std::move(shape), a.val().data);
  return make(std::move(out), {a}, [sh = a.shape()](const Value& g) {
    return std::vector<Value>{reshape(g, sh)};
  });
}

inline Value dot(const Value& a, const Value& b) { return sum_all(mul(a, b)); }

// ---------------------------------------------------------------------------
// Matrix ops ([rows, cols] tensors)

inline Value transpose(const Value& a) {
  const Tensor& A = a.val();
  if (A.rank() != 2) throw std::invalid_argument("transpose: rank != 2");
  Tensor out({A.dim(1), A.dim(0)});
  out.mat(A.dim(1), A.dim(0)) = A.mat(A.dim(0), A.dim(1)).transpose();
  return make(std::move(out), {a},
              [](const Value& g) { return std::vector<Value>{transpose(g)}; });
}

inline Value matmul(const Value& a, const Value& b) {
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
    throw std::invalid_argument("matmul: incompatible " + A.shape_str() + " x " + B.shape_str());
  Tensor out({A.dim(0), B.dim(1)});
  out.mat(A.dim(0), B.dim(1)).noalias() =
      A.mat(A.dim(0), A.dim(1)) * B.mat(B.dim(0), B.dim(1));
  return make(std::move(out), {a, b}, [a, b](const Value& g) {
    Value ga = matmul(g, transpose(b));
    Value gb = matmul(transpose(a), g);
    return std::vector<Value>{ga, gb};
  });
}

inline Value sum_rows(const Value& x);
inline Value broadcast_rows(const Value& b, int64_t n);

// Add a row vector b[F] to every row of x[N,F].
inline Value add_rowvec(const Value& x, const Value& b) {
  const Tensor& X = x.val();
  if (X.rank() != 2 || b.val().numel() != X.dim(1))
    throw std::invalid_argument("add_rowvec: shape mismatch");
  Tensor out = X;
  out.mat(X.dim(0), X.dim(1)).rowwise() += b.val().vec().transpose();
  return make(std::move(out), {x, b},
              [](const Value& g) { return std::vector<Value>{g, sum_rows(g)}; });
}

inline Value sum_rows(const Value& x) {
  const Tensor& X = x.val();
  Tensor out({X.dim(1)});
  out.vec() = X.mat(X.dim(0), X.dim(1)).colwise().sum();
  return make(std::move(out), {x}, [n = X.dim(0)](const Value& g) {
    return std::vector<Value>{broadcast_rows(g, n)};
  });
}

inline Value broadcast_rows(const Value& b, int64_t n) {
  const Tensor& B = b.val();
  Tensor out({n, B.numel()});
  out.mat(n, B.numel()).rowwise() = B.vec().transpose();
  return make(std::move(out), {b},
              [](const Value& g) { return std::vector<Value>{sum_rows(g)}; });
}

// ---------------------------------------------------------------------------
// Concatenation / slicing (axis 0 and channel axis of NCHW)

inline Value slice_axis0(const Value& x, int64_t start, int64_t len);

inline Value concat_axis0(const std::vector<Value>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_axis0: empty");
  std::vector<int64_t> shape = parts[0].shape();
  int64_t total = 0;
  for (const Value& p : parts) total += p.shape()[0];
  shape[0] = total;
  Tensor out(shape);
  int64_t off = 0;
  std::vector<int64_t> starts, lens;
  int64_t row = 0;
  for (const Value& p : parts) {
    starts.push_back(row);
    lens.push_back(p.shape()[0]);
    row += p.shape()[0];
    std::copy(p.val().data.begin(), p.val().data.end(), out.data.begin() + off);
    off += p.val().numel();
  }
  return make(std::move(out), parts, [starts, lens](const Value& g) {
    std::vector<Value> gs;
    for (size_t i = 0; i < lens.size(); ++i)
      gs.push_back(slice_axis0(g, starts[i], lens[i]));
    return gs;
  });
}

inline Value slice_axis0(const Value& x, int64_t start, int64_t len) {
  const Tensor& X = x.val();
  std::vector<int64_t> shape = X.shape;
  const int64_t inner = X.numel() / X.dim(0);
  shape[0] = len;
  Tensor out(shape);
  std::copy(X.data.begin() + start * inner, X.data.begin() + (start + len) * inner,
            out.data.begin());
  const int64_t n0 = X.dim(0);
  return make(std::move(out), {x}, [start, len, n0, shape](const Value& g) {
    // Adjoint: embed g back at [start, start+len) between zero blocks.
    std::vector<Value> parts;
    auto zeros = [&](int64_t rows) {
      std::vector<int64_t> s = shape;
      s[0] = rows;
      return constant(Tensor(s));
    };
    if (start > 0) parts.push_back(zeros(start));
    parts.push_back(g);
    if (start + len < n0) parts.push_back(zeros(n0 - start - len));
    return std::vector<Value>{parts.size() == 1 ? parts[0] : concat_axis0(parts)};
  });
}

inline Value slice_channels(const Value& x, int64_t start, int64_t len);

inline Value concat_channels(const std::vector<Value>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: empty");
  const Tensor& P0 = parts[0].val();
  if (P0.rank() != 4) throw std::invalid_argument("concat_channels: rank != 4");
  const int64_t N = P0.dim(0), H = P0.dim(2), W = P0.dim(3);
  int64_t C = 0;
  for (const Value& p : parts) C += p.shape()[1];
  Tensor out({N, C, H, W});
  const int64_t hw = H * W;
  std::vector<int64_t> starts, lens;
  int64_t c0 = 0;
  for (const Value& p : parts) {
    const int64_t pc = p.shape()[1];
    starts.push_back(c0);
    lens.push_back(pc);
    for (int64_t n = 0; n < N; ++n)
      std::copy(p.val().data.begin() + n * pc * hw, p.val().data.begin() + (n + 1) * pc * hw,
                out.data.begin() + (n * C + c0) * hw);
    c0 += pc;
  }
  return make(std::move(out), parts, [starts, lens](const Value& g) {
    std::vector<Value> gs;
    for (size_t i = 0; i < lens.size(); ++i)
      gs.push_back(slice_channels(g, starts[i], lens[i]));
    return gs;
  });
}

inline Value slice_channels(const Value& x, int64_t start, int64_t len) {
  const Tensor& X = x.val();
  if (X.rank() != 4) throw std::invalid_argument("slice_channels: rank != 4");
  const int64_t N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
  const int64_t hw = H * W;
  Tensor out({N, len, H, W});
  for (int64_t n = 0; n < N; ++n)
    std::copy(X.data.begin() + (n * C + start) * hw, X.data.begin() + (n * C + start + len) * hw,
              out.data.begin() + n * len * hw);
  return make(std::move(out), {x}, [start, len, N, C, H, W](const Value& g) {
    std::vector<Value> parts;
    auto zeros = [&](int64_t ch) { return constant(Tensor({N, ch, H, W})); };
    if (start > 0) parts.push_back(zeros(start));
    parts.push_back(g);
    if (start + len < C) parts.push_back(zeros(C - start - len));
    return std::vector<Value>{parts.size() == 1 ? parts[0] : concat_channels(parts)};
  });
}

inline Value broadcast_channels(const Value& x, int64_t c);

// (N,C,H,W) -> (N,1,H,W)
inline Value sum_channels(const Value& x) {
  const Tensor& X = x.val();
  if (X.rank() != 4) throw std::invalid_argument("sum_channels: rank != 4");
  const int64_t N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
  const int64_t hw = H * W;
  Tensor out({N, 1, H, W});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < hw; ++i) out.data[n * hw + i] += X.data[(n * C + c) * hw + i];
  return make(std::move(out), {x}, [C](const Value& g) {
    return std::vector<Value>{broadcast_channels(g, C)};
  });
}

// (N,1,H,W) -> (N,C,H,W)
inline Value broadcast_channels(const Value& x, int64_t c) {
  const Tensor& X = x.val();
  if (X.rank() != 4 || X.dim(1) != 1)
    throw std::invalid_argument("broadcast_channels: expected (N,1,H,W)");
  const int64_t N = X.dim(0), H = X.dim(2), W = X.dim(3);
  const int64_t hw = H * W;
  Tensor out({N, c, H, W});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t k = 0; k < c; ++k)
      std::copy(X.data.begin() + n * hw, X.data.begin() + (n + 1) * hw,
                out.data.begin() + (n * c + k) * hw);
  return make(std::move(out), {x},
              [](const Value& g) { return std::vector<Value>{sum_channels(g)}; });
}

inline Value broadcast_axis0(const Value& x, int64_t n);

// (N,...) -> (1,...)
inline Value sum_axis0(const Value& x) {
  const Tensor& X = x.val();
  const int64_t N = X.dim(0);
  const int64_t inner = X.numel() / N;
  std::vector<int64_t> shape = X.shape;
  shape[0] = 1;
  Tensor out(shape);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t i = 0; i < inner; ++i) out.data[i] += X.data[n * inner + i];
  return make(std::move(out), {x}, [N](const Value& g) {
    return std::vector<Value>{broadcast_axis0(g, N)};
  });
}

inline Value broadcast_axis0(const Value& x, int64_t n) {
  const Tensor& X = x.val();
  if (X.dim(0) != 1) throw std::invalid_argument("broadcast_axis0: first dim != 1");
  std::vector<int64_t> shape = X.shape;
  shape[0] = n;
  Tensor out(shape);
  const int64_t inner = X.numel();
  for (int64_t k = 0; k < n; ++k)
    std::copy(X.data.begin(), X.data.end(), out.data.begin() + k * inner);
  return make(std::move(out), {x},
              [](const Value& g) { return std::vector<Value>{sum_axis0(g)}; });
}

// ---------------------------------------------------------------------------
// Convolution family. x:[N,C,H,W] w:[O,C,kh,kw]. The three bilinear maps
// (forward, data-adjoint, weight-adjoint) reference each other in their VJPs.

namespace detail {

inline void im2col(const double* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                   int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, double* col) {
  // col layout: [C*kh*kw, Ho*Wo]
  for (int64_t c = 0; c < C; ++c)
    for (int64_t i = 0; i < kh; ++i)
      for (int64_t j = 0; j < kw; ++j) {
        double* dst = col + ((c * kh + i) * kw + j) * Ho * Wo;
        for (int64_t ho = 0; ho < Ho; ++ho) {
          const int64_t hi = ho * stride + i - pad;
          if (hi < 0 || hi >= H) {
            std::fill(dst + ho * Wo, dst + (ho + 1) * Wo, 0.0);
            continue;
          }
          const double* src = x + (c * H + hi) * W;
          for (int64_t wo = 0; wo < Wo; ++wo) {
            const int64_t wi = wo * stride + j - pad;
            dst[ho * Wo + wo] = (wi < 0 || wi >= W) ? 0.0 : src[wi];
          }
        }
      }
}

inline void col2im_add(const double* col, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                       int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, double* x) {
  for (int64_t c = 0; c < C; ++c)
    for (int64_t i = 0; i < kh; ++i)
      for (int64_t j = 0; j < kw; ++j) {
        const double* src = col + ((c * kh + i) * kw + j) * Ho * Wo;
        for (int64_t ho = 0; ho < Ho; ++ho) {
          const int64_t hi = ho * stride + i - pad;
          if (hi < 0 || hi >= H) continue;
          double* dst = x + (c * H + hi) * W;
          for (int64_t wo = 0; wo < Wo; ++wo) {
            const int64_t wi = wo * stride + j - pad;
            if (wi >= 0 && wi < W) dst[wi] += src[ho * Wo + wo];
          }
        }
      }
}

inline int64_t conv_out(int64_t in, int64_t k, int64_t stride, int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace detail

Value conv2d(const Value& x, const Value& w, int64_t stride, int64_t pad);
Value conv2d_data(const Value& g, const Value& w, int64_t stride, int64_t pad, int64_t H,
                  int64_t W);
Value conv2d_weight(const Value& x, const Value& g, int64_t stride, int64_t pad, int64_t kh,
                    int64_t kw);

inline Value conv2d(const Value& x, const Value& w, int64_t stride, int64_t pad) {
  const Tensor& X = x.val();
  const Tensor& Wt = w.val();
  if (X.rank() != 4 || Wt.rank() != 4 || X.dim(1) != Wt.dim(1))
    throw std::invalid_argument("conv2d: bad shapes " + X.shape_str() + " " + Wt.shape_str());
  const int64_t N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
  const int64_t O = Wt.dim(0), kh = Wt.dim(2), kw = Wt.dim(3);
  const int64_t Ho = detail::conv_out(H, kh, stride, pad), Wo = detail::conv_out(W, kw, stride, pad);
  Tensor out({N, O, Ho, Wo});
  Tensor col({C * kh * kw, Ho * Wo});
  for (int64_t n = 0; n < N; ++n) {
    detail::im2col(X.data.data() + n * C * H * W, C, H, W, kh, kw, stride, pad, Ho, Wo,
                   col.data.data());
    EMap(out.data.data() + n * O * Ho * Wo, O, Ho * Wo).noalias() =
        Wt.mat(O, C * kh * kw) * col.mat(C * kh * kw, Ho * Wo);
  }
  return make(std::move(out), {x, w}, [x, w, stride, pad, H, W, kh, kw](const Value& g) {
    Value gx = conv2d_data(g, w, stride, pad, H, W);
    Value gw = conv2d_weight(x, g, stride, pad, kh, kw);
    return std::vector<Value>{gx, gw};
  });
}

inline Value conv2d_data(const Value& g, const Value& w, int64_t stride, int64_t pad, int64_t H,
                         int64_t W) {
  const Tensor& G = g.val();
  const Tensor& Wt = w.val();
  const int64_t N = G.dim(0), O = G.dim(1), Ho = G.dim(2), Wo = G.dim(3);
  const int64_t C = Wt.dim(1), kh = Wt.dim(2), kw = Wt.dim(3);
  Tensor out({N, C, H, W});
  Tensor col({C * kh * kw, Ho * Wo});
  for (int64_t n = 0; n < N; ++n) {
    col.mat(C * kh * kw, Ho * Wo).noalias() =
        Wt.mat(O, C * kh * kw).transpose() * ECMap(G.data.data() + n * O * Ho * Wo, O, Ho * Wo);
    detail::col2im_add(col.data.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                       out.data.data() + n * C * H * W);
  }
  return make(std::move(out), {g, w}, [g, w, stride, pad, kh, kw](const Value& u) {
    Value gg = conv2d(u, w, stride, pad);
    Value gw = conv2d_weight(u, g, stride, pad, kh, kw);
    return std::vector<Value>{gg, gw};
  });
}

inline Value conv2d_weight(const Value& x, const Value& g, int64_t stride, int64_t pad, int64_t kh,
                           int64_t kw) {
  const Tensor& X = x.val();
  const Tensor& G = g.val();
  const int64_t N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
  const int64_t O = G.dim(1), Ho = G.dim(2), Wo = G.dim(3);
  Tensor out({O, C, kh, kw});
  Tensor col({C * kh * kw, Ho * Wo});
  auto acc = out.mat(O, C * kh * kw);
  for (int64_t n = 0; n < N; ++n) {
    detail::im2col(X.data.data() + n * C * H * W, C, H, W, kh, kw, stride, pad, Ho, Wo,
                   col.data.data());
    acc.noalias() += ECMap(G.data.data() + n * O * Ho * Wo, O, Ho * Wo) *
                     col.mat(C * kh * kw, Ho * Wo).transpose();
  }
  return make(std::move(out), {x, g}, [x, g, stride, pad, H = X.dim(2), W = X.dim(3)](const Value& u) {
    Value gx = conv2d_data(g, u, stride, pad, H, W);
    Value gg = conv2d(x, u, stride, pad);
    return std::vector<Value>{gx, gg};
  });
}

// Per-output-channel bias on NCHW.
inline Value channel_bias_grad(const Value& g);

inline Value add_bias_nchw(const Value& x, const Value& b) {
  const Tensor& X = x.val();
  if (X.rank() != 4 || b.val().numel() != X.dim(1))
    throw std::invalid_argument("add_bias_nchw: shape mismatch");
  const int64_t N = X.dim(0), C = X.dim(1), hw = X.dim(2) * X.dim(3);
  Tensor out = X;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const double bv = b.val()[c];
      double* p = out.data.data() + (n * C + c) * hw;
      for (int64_t i = 0; i < hw; ++i) p[i] += bv;
    }
  return make(std::move(out), {x, b}, [](const Value& g) {
    return std::vector<Value>{g, channel_bias_grad(g)};
  });
}

inline Value broadcast_bias_nchw(const Value& b, int64_t N, int64_t H, int64_t W);

inline Value channel_bias_grad(const Value& g) {
  const Tensor& G = g.val();
  const int64_t N = G.dim(0), C = G.dim(1), hw = G.dim(2) * G.dim(3);
  Tensor out({C});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const double* p = G.data.data() + (n * C + c) * hw;
      double s = 0;
      for (int64_t i = 0; i < hw; ++i) s += p[i];
      out[c] += s;
    }
  return make(std::move(out), {g}, [N, H = G.dim(2), W = G.dim(3)](const Value& u) {
    return std::vector<Value>{broadcast_bias_nchw(u, N, H, W)};
  });
}

inline Value broadcast_bias_nchw(const Value& b, int64_t N, int64_t H, int64_t W) {
  const int64_t C = b.val().numel();
  Tensor out({N, C, H, W});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      std::fill_n(out.data.begin() + (n * C + c) * H * W, H * W, b.val()[c]);
  return make(std::move(out), {b}, [](const Value& g) {
    return std::vector<Value>{channel_bias_grad(g)};
  });
}

// ---------------------------------------------------------------------------
// 2x average pooling and its adjoint (mutual transposes)

inline Value avgpool2_adj(const Value& g);

inline Value avgpool2(const Value& x) {
  const Tensor& X = x.val();
  const int64_t N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
  Tensor out({N, C, H / 2, W / 2});
  const int64_t Ho = H / 2, Wo = W / 2;
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const double* src = X.data.data() + nc * H * W;
    double* dst = out.data.data() + nc * Ho * Wo;
    for (int64_t i = 0; i < Ho; ++i)
      for (int64_t j = 0; j < Wo; ++j)
        dst[i * Wo + j] = 0.25 * (src[2 * i * W + 2 * j] + src[2 * i * W + 2 * j + 1] +
                                  src[(2 * i + 1) * W + 2 * j] + src[(2 * i + 1) * W + 2 * j + 1]);
  }
  return make(std::move(out), {x},
              [](const Value& g) { return std::vector<Value>{avgpool2_adj(g)}; });
}

inline Value avgpool2_adj(const Value& g) {
  const Tensor& G = g.val();
  const int64_t N = G.dim(0), C = G.dim(1), Ho = G.dim(2), Wo = G.dim(3);
  const int64_t H = Ho * 2, W = Wo * 2;
  Tensor out({N, C, H, W});
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const double* src = G.data.data() + nc * Ho * Wo;
    double* dst = out.data.data() + nc * H * W;
    for (int64_t i = 0; i < Ho; ++i)
      for (int64_t j = 0; j < Wo; ++j) {
        const double v = 0.25 * src[i * Wo + j];
        dst[2 * i * W + 2 * j] = v;
        dst[2 * i * W + 2 * j + 1] = v;
        dst[(2 * i + 1) * W + 2 * j] = v;
        dst[(2 * i + 1) * W + 2 * j + 1] = v;
      }
  }
  return make(std::move(out), {g},
              [](const Value& u) { return std::vector<Value>{avgpool2(u)}; });
}

// ---------------------------------------------------------------------------
// 2x bilinear upsampling (align_corners = false) and its adjoint

namespace detail {
// Output index o samples input coordinate o/2 - 0.25, clamped.
struct Tap {
  int64_t i0, i1;
  double w0, w1;
};
inline Tap bilinear_tap(int64_t o, int64_t in) {
  const double src = 0.5 * static_cast<double>(o) - 0.25;
  double f = std::floor(src);
  int64_t i0 = static_cast<int64_t>(f);
  double w1 = src - f;
  int64_t i1 = i0 + 1;
  if (i0 < 0) { i0 = 0; }
  if (i1 > in - 1) { i1 = in - 1; }
  return {i0, i1, 1.0 - w1, w1};
}
}  // namespace detail

inline Value upsample_bilinear2_adj(const Value& g);

inline Value upsample_bilinear2(const Value& x) {
  const Tensor& X = x.val();
  const int64_t N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
  const int64_t Ho = H * 2, Wo = W * 2;
  Tensor out({N, C, Ho, Wo});
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const double* src = X.data.data() + nc * H * W;
    double* dst = out.data.data() + nc * Ho * Wo;
    for (int64_t i = 0; i < Ho; ++i) {
      const auto ti = detail::bilinear_tap(i, H);
      for (int64_t j = 0; j < Wo; ++j) {
        const auto tj = detail::bilinear_tap(j, W);
        dst[i * Wo + j] = ti.w0 * (tj.w0 * src[ti.i0 * W + tj.i0] + tj.w1 * src[ti.i0 * W + tj.i1]) +
                          ti.w1 * (tj.w0 * src[ti.i1 * W + tj.i0] + tj.w1 * src[ti.i1 * W + tj.i1]);
      }
    }
  }
  return make(std::move(out), {x},
              [](const Value& g) { return std::vector<Value>{upsample_bilinear2_adj(g)}; });
}

inline Value upsample_bilinear2_adj(const Value& g) {
  const Tensor& G = g.val();
  const int64_t N = G.dim(0), C = G.dim(1), Ho = G.dim(2), Wo = G.dim(3);
  const int64_t H = Ho / 2, W = Wo / 2;
  Tensor out({N, C, H, W});
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const double* src = G.data.data() + nc * Ho * Wo;
    double* dst = out.data.data() + nc * H * W;
    for (int64_t i = 0; i < Ho; ++i) {
      const auto ti = detail::bilinear_tap(i, H);
      for (int64_t j = 0; j < Wo; ++j) {
        const auto tj = detail::bilinear_tap(j, W);
        const double v = src[i * Wo + j];
        dst[ti.i0 * W + tj.i0] += ti.w0 * tj.w0 * v;
        dst[ti.i0 * W + tj.i1] += ti.w0 * tj.w1 * v;
        dst[ti.i1 * W + tj.i0] += ti.w1 * tj.w0 * v;
        dst[ti.i1 * W + tj.i1] += ti.w1 * tj.w1 * v;
      }
    }
  }
  return make(std::move(out), {g},
              [](const Value& u) { return std::vector<Value>{upsample_bilinear2(u)}; });
}

// ---------------------------------------------------------------------------
// Backward pass

class Gradients {
 public:
  explicit Gradients(std::unordered_map<const Node*, Value> adj) : adj_(std::move(adj)) {}

  bool has(const Value& v) const { return adj_.count(v.get()) > 0; }

  // Graph-connected adjoint (usable for double backprop).
  Value at(const Value& v) const {
    auto it = adj_.find(v.get());
    if (it == adj_.end()) throw std::logic_error("gradients: value not reached by backward");
    return it->second;
  }

  Tensor tensor(const Value& v) const {
    auto it = adj_.find(v.get());
    if (it == adj_.end()) return Tensor(v.shape());
    return it->second.val();
  }

 private:
  std::unordered_map<const Node*, Value> adj_;
};

inline Gradients backward(const Value& root) {
  if (root.numel() != 1) throw std::invalid_argument("backward: root must be scalar");
  // Topological order over grad-requiring nodes.
  std::vector<Node*> topo;
  std::unordered_map<Node*, int> state;  // 0 unseen, 1 in-progress, 2 done
  std::vector<std::pair<Node*, size_t>> stack;
  if (root.requires_grad()) stack.push_back({root.get(), 0});
  state[root.get()] = 1;
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->inputs.size()) {
      Node* child = n->inputs[idx++].get();
      if (child && child->requires_grad && state[child] == 0) {
        state[child] = 1;
        stack.push_back({child, 0});
      }
    } else {
      state[n] = 2;
      topo.push_back(n);
      stack.pop_back();
    }
  }
  std::unordered_map<const Node*, Value> adj;
  adj[root.get()] = constant(Tensor({1}, 1.0));
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* n = *it;
    auto git = adj.find(n);
    if (git == adj.end() || !n->vjp) continue;
    std::vector<Value> contrib = n->vjp(git->second);
    for (size_t i = 0; i < n->inputs.size() && i < contrib.size(); ++i) {
      const Value& in = n->inputs[i];
      if (!in.defined() || !in.requires_grad() || !contrib[i].defined()) continue;
      auto ait = adj.find(in.get());
      if (ait == adj.end())
        adj[in.get()] = contrib[i];
      else
        ait->second = add(ait->second, contrib[i]);
    }
  }
  return Gradients(std::move(adj));
}

}  // namespace dlat::ad
