#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace depthlab {

// Dense row-major tensor of doubles. Rank 0 (empty shape) is a scalar.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<int64_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (size_of(shape) != static_cast<int64_t>(data.size()))
      throw std::invalid_argument("Tensor: shape/data size mismatch");
  }

  static int64_t size_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t e : s) {
      if (e <= 0) throw std::invalid_argument("Tensor: non-positive extent");
      n *= e;
    }
    return n;
  }

  static Tensor zeros(std::vector<int64_t> s) {
    int64_t n = size_of(s);
    return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), 0.0));
  }
  static Tensor full(std::vector<int64_t> s, double v) {
    int64_t n = size_of(s);
    return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), v));
  }
  static Tensor scalar(double v) { return Tensor({}, {v}); }

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  bool is_scalar() const { return data.size() == 1 && shape.empty(); }

  double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  // 2D accessors for image-shaped tensors {H, W}.
  int64_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
  int64_t cols() const { return shape.size() == 2 ? shape[1] : size(); }
  double& at(int64_t y, int64_t x) { return data[static_cast<size_t>(y * cols() + x)]; }
  double at(int64_t y, int64_t x) const { return data[static_cast<size_t>(y * cols() + x)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

// Images are {H, W} tensors; pixel centers sit on integer coordinates,
// origin top-left, +x right, +y down.
using Image = Tensor;

inline std::string shape_str(const Tensor& t) {
  std::string s = "[";
  for (size_t i = 0; i < t.shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(t.shape[i]);
  }
  return s + "]";
}

}  // namespace depthlab
