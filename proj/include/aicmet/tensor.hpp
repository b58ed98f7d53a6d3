#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace aicmet {

struct TensorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense row-major 64-bit float array. Rank 1 and 2 cover everything the
// encoder/decoder graphs need.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel() != static_cast<int64_t>(data.size()))
      throw TensorError("tensor shape/buffer mismatch");
  }

  static Tensor zeros(std::vector<int> s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), 0.0));
  }
  static Tensor full(std::vector<int> s, double v) {
    Tensor t = zeros(std::move(s));
    for (auto& x : t.data) x = v;
    return t;
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor vec(std::vector<double> d) {
    const int n = static_cast<int>(d.size());
    return Tensor({n}, std::move(d));
  }
  // Column vector (n x 1); the standard carrier for per-time features.
  static Tensor col(const std::vector<double>& d) {
    const int n = static_cast<int>(d.size());
    Tensor t = zeros({n, 1});
    t.data.assign(d.begin(), d.end());
    return t;
  }

  int rank() const { return static_cast<int>(shape.size()); }
  int64_t numel() const {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }
  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const {
    if (rank() == 2) return shape[1];
    if (rank() == 1) return shape[0];
    throw TensorError("cols() on rank " + std::to_string(rank()));
  }

  double& at(int i) { return data[static_cast<size_t>(i)]; }
  double at(int i) const { return data[static_cast<size_t>(i)]; }
  double& at(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
  double at(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline std::string shape_str(const Tensor& t) {
  std::string s = "(";
  for (size_t i = 0; i < t.shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(t.shape[i]);
  }
  return s + ")";
}

}  // namespace aicmet
