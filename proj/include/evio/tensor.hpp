#pragma once

#include <algorithm>
#include <initializer_list>
#include <numeric>
#include <ostream>

#include "evio/common.hpp"

namespace evio {

// Dense row-major tensor. Values are kept in double precision in memory so that
// finite-difference gradient checks resolve to 1e-4; weight files store 32-bit
// reals (see weights.hpp) and quantize on save.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(numel_of(shape_), 0.0);
  }
  Tensor(std::vector<int> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    require(data_.size() == numel_of(shape_), "tensor data length does not match shape");
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }
  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = stddev * rng.normal();
    return t;
  }
  static Tensor uniform(std::vector<int> shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = rng.uniform(lo, hi);
    return t;
  }

  static std::size_t numel_of(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
      require(d >= 1, "tensor dims must be >= 1");
      n *= std::size_t(d);
    }
    return n;
  }

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[std::size_t(i)]; }
  int rank() const { return int(shape_.size()); }
  std::size_t size() const { return data_.size(); }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  // 2-D / 3-D / 4-D accessors (row-major).
  double& at(int i, int j) { return data_[std::size_t(i) * dim(1) + j]; }
  double at(int i, int j) const { return data_[std::size_t(i) * dim(1) + j]; }
  double& at(int c, int i, int j) {
    return data_[(std::size_t(c) * dim(1) + i) * dim(2) + j];
  }
  double at(int c, int i, int j) const {
    return data_[(std::size_t(c) * dim(1) + i) * dim(2) + j];
  }
  double& at(int n, int c, int i, int j) {
    return data_[((std::size_t(n) * dim(1) + c) * std::size_t(dim(2)) + i) * dim(3) + j];
  }

  Tensor reshaped(std::vector<int> shape) const {
    require(numel_of(shape) == size(), "reshape changes element count");
    return Tensor(std::move(shape), data_);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

inline std::ostream& operator<<(std::ostream& os, const Tensor& t) {
  os << "Tensor[";
  for (int i = 0; i < t.rank(); ++i) os << (i ? "x" : "") << t.shape()[std::size_t(i)];
  os << "]";
  return os;
}

}  // namespace evio
