#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace nulite {

// Dense float32 tensor, contiguous row-major (NCHW for image data).
// Copies are shallow; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
    int64_t n = numel_of(shape_);
    data_ = std::shared_ptr<float[]>(new float[n]());
    numel_ = n;
  }

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int64_t> shape, float value) {
    Tensor t(std::move(shape));
    std::fill(t.data(), t.data() + t.numel(), value);
    return t;
  }

  static Tensor from(std::vector<int64_t> shape, std::initializer_list<float> values) {
    Tensor t(std::move(shape));
    if (static_cast<int64_t>(values.size()) != t.numel())
      throw std::invalid_argument("Tensor::from: value count does not match shape");
    std::copy(values.begin(), values.end(), t.data());
    return t;
  }

  bool defined() const { return static_cast<bool>(data_); }
  int64_t numel() const { return numel_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t dim(int i) const { return shape_.at(static_cast<size_t>(i)); }

  float* data() { return data_.get(); }
  const float* data() const { return data_.get(); }

  float& operator[](int64_t i) { return data_[i]; }
  float operator[](int64_t i) const { return data_[i]; }

  // Element access by multi-index; test/convenience path, not for hot loops.
  float& at(std::initializer_list<int64_t> idx) { return data_[offset(idx)]; }
  float at(std::initializer_list<int64_t> idx) const { return data_[offset(idx)]; }

  Tensor clone() const {
    Tensor t(shape_);
    std::memcpy(t.data(), data(), sizeof(float) * static_cast<size_t>(numel_));
    return t;
  }

  // Same storage, new shape with equal element count.
  Tensor reshaped(std::vector<int64_t> shape) const {
    if (numel_of(shape) != numel_) throw std::invalid_argument("reshaped: numel mismatch");
    Tensor t;
    t.data_ = data_;
    t.numel_ = numel_;
    t.shape_ = std::move(shape);
    return t;
  }

  void fill(float v) { std::fill(data(), data() + numel_, v); }

  void add_(const Tensor& other) {
    assert(other.numel_ == numel_);
    const float* o = other.data();
    float* d = data();
    for (int64_t i = 0; i < numel_; ++i) d[i] += o[i];
  }

  void scale_(float s) {
    float* d = data();
    for (int64_t i = 0; i < numel_; ++i) d[i] *= s;
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  std::string shape_str() const {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << ']';
    return os.str();
  }

  static int64_t numel_of(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
      if (d < 0) throw std::invalid_argument("negative dimension");
      n *= d;
    }
    return n;
  }

 private:
  int64_t offset(std::initializer_list<int64_t> idx) const {
    assert(idx.size() == shape_.size());
    int64_t off = 0;
    size_t k = 0;
    for (int64_t i : idx) {
      off = off * shape_[k] + i;
      ++k;
    }
    return off;
  }

  std::shared_ptr<float[]> data_;
  std::vector<int64_t> shape_;
  int64_t numel_ = 0;
};

inline float max_abs_diff(const Tensor& a, const Tensor& b) {
  assert(a.numel() == b.numel());
  float m = 0.f;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<size_t>(a.numel())) == 0;
}

// Deterministic RNG used everywhere weights or sampling decisions are drawn.
using Rng = std::mt19937_64;

inline float rand_uniform(Rng& rng, float lo, float hi) {
  std::uniform_real_distribution<float> d(lo, hi);
  return d(rng);
}

inline float rand_normal(Rng& rng, float mean, float std) {
  std::normal_distribution<float> d(mean, std);
  return d(rng);
}

// Normal draw rejected outside [mean - 2 std, mean + 2 std].
inline float rand_trunc_normal(Rng& rng, float mean, float std) {
  std::normal_distribution<float> d(mean, std);
  for (;;) {
    float v = d(rng);
    if (std::abs(v - mean) <= 2.f * std) return v;
  }
}

}  // namespace nulite
