#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <vector>

#include "fadet/common.hpp"

namespace fadet {

// Dense float32 tensor, row-major, up to 4 dims in practice (NCHW).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(count(shape_)), 0.0f);
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, float v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<float> data) {
    Tensor t;
    t.shape_ = std::move(shape);
    if (static_cast<int64_t>(data.size()) != count(t.shape_))
      throw std::runtime_error("Tensor::from: data size does not match shape");
    t.data_ = std::move(data);
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::vector<float>& vec() { return data_; }
  const std::vector<float>& vec() const { return data_; }

  float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // NCHW accessors.
  float& at(int n, int c, int h, int w) { return data_[static_cast<size_t>(idx4(n, c, h, w))]; }
  float at(int n, int c, int h, int w) const { return data_[static_cast<size_t>(idx4(n, c, h, w))]; }
  int64_t idx4(int n, int c, int h, int w) const {
    return ((static_cast<int64_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  float& at3(int a, int b, int c) { return data_[static_cast<size_t>((static_cast<int64_t>(a) * shape_[1] + b) * shape_[2] + c)]; }
  float& at2(int a, int b) { return data_[static_cast<size_t>(static_cast<int64_t>(a) * shape_[1] + b)]; }
  float at2(int a, int b) const { return data_[static_cast<size_t>(static_cast<int64_t>(a) * shape_[1] + b)]; }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

  void fill_normal(Rng& rng, float mean, float stddev) {
    for (auto& x : data_) x = static_cast<float>(mean + stddev * rng.normal());
  }

  void fill_uniform(Rng& rng, float lo, float hi) {
    for (auto& x : data_) x = static_cast<float>(rng.uniform(lo, hi));
  }

  double sum() const {
    double acc = 0.0;
    for (float x : data_) acc += x;
    return acc;
  }

  float max_abs() const {
    float m = 0.0f;
    for (float x : data_) m = std::max(m, std::fabs(x));
    return m;
  }

  double l2_norm() const {
    double acc = 0.0;
    for (float x : data_) acc += static_cast<double>(x) * x;
    return std::sqrt(acc);
  }

  bool all_finite() const {
    for (float x : data_) {
      if (!std::isfinite(x)) return false;
    }
    return true;
  }

  bool bit_equal(const Tensor& o) const {
    if (!same_shape(o)) return false;
    return std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(float)) == 0;
  }

  static int64_t count(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return shape.empty() ? 0 : n;
  }

 private:
  std::vector<int> shape_;
  std::vector<float> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  assert(a.same_shape(b));
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(static_cast<double>(a[i]) - b[i]));
  return m;
}

inline double l2_diff(const Tensor& a, const Tensor& b) {
  assert(a.same_shape(b));
  double acc = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

}  // namespace fadet
