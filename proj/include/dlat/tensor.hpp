#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace dlat {

using EMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMatrix>;
using ECMap = Eigen::Map<const EMatrix>;
using EVecMap = Eigen::Map<Eigen::VectorXd>;
using ECVecMap = Eigen::Map<const Eigen::VectorXd>;

// Dense row-major double tensor. Shapes follow NCHW for images and
// [rows, cols] for matrices; a scalar is shape {1}.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)), data(numel_of(shape), 0.0) {}
  Tensor(std::vector<int64_t> s, double fill)
      : shape(std::move(s)), data(numel_of(shape), fill) {}
  Tensor(std::vector<int64_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<int64_t>(data.size()) != numel_of(shape))
      throw std::invalid_argument("tensor: data size does not match shape");
  }

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t dim(int i) const { return shape.at(static_cast<size_t>(i)); }
  int rank() const { return static_cast<int>(shape.size()); }

  double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  EMap mat(int64_t rows, int64_t cols) {
    return EMap(data.data(), rows, cols);
  }
  ECMap mat(int64_t rows, int64_t cols) const {
    return ECMap(data.data(), rows, cols);
  }
  EVecMap vec() { return EVecMap(data.data(), numel()); }
  ECVecMap vec() const { return ECVecMap(data.data(), numel()); }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                                b.shape_str());
}

// Deterministic RNG shared by sampling and init. mt19937_64 state can be
// round-tripped through text streams for checkpoint resume.
using Rng = std::mt19937_64;

inline void fill_normal(Tensor& t, Rng& rng, double stddev = 1.0) {
  std::normal_distribution<double> nd(0.0, stddev);
  for (double& v : t.data) v = nd(rng);
}

inline Tensor random_normal(std::vector<int64_t> shape, Rng& rng, double stddev = 1.0) {
  Tensor t(std::move(shape));
  fill_normal(t, rng, stddev);
  return t;
}

}  // namespace dlat
