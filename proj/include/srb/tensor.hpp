#pragma once

#include <algorithm>
#include <cstring>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

#include "srb/common.hpp"

namespace srb {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    if (d < 0) throw InvalidInputError("negative dimension in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major tensor of doubles. Value semantics; all layers and ops in
// this library run on it.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}
  Tensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != shape_numel(shape_))
      throw InvalidInputError("tensor data size does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, Real v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor scalar(Real v) { return Tensor({1}, {v}); }
  static Tensor of(std::initializer_list<Real> vals, Shape shape) {
    return Tensor(std::move(shape), std::vector<Real>(vals));
  }

  const Shape& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  int64_t dim(size_t i) const { return shape_.at(i); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }
  std::vector<Real>& vec() { return data_; }
  const std::vector<Real>& vec() const { return data_; }

  Real& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  Real operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  Real& at(int64_t i) { return data_[check_index(i)]; }
  Real at(int64_t i) const { return data_[check_index(i)]; }
  Real& at(int64_t i, int64_t j) { return data_[idx2(i, j)]; }
  Real at(int64_t i, int64_t j) const { return data_[idx2(i, j)]; }
  Real& at(int64_t i, int64_t j, int64_t k) { return data_[idx3(i, j, k)]; }
  Real at(int64_t i, int64_t j, int64_t k) const { return data_[idx3(i, j, k)]; }
  Real& at(int64_t i, int64_t j, int64_t k, int64_t l) { return data_[idx4(i, j, k, l)]; }
  Real at(int64_t i, int64_t j, int64_t k, int64_t l) const { return data_[idx4(i, j, k, l)]; }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

  Real min() const {
    if (data_.empty()) throw InvalidInputError("min of empty tensor");
    return *std::min_element(data_.begin(), data_.end());
  }
  Real max() const {
    if (data_.empty()) throw InvalidInputError("max of empty tensor");
    return *std::max_element(data_.begin(), data_.end());
  }
  Real sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }
  Real mean() const {
    if (data_.empty()) throw InvalidInputError("mean of empty tensor");
    return sum() / static_cast<Real>(data_.size());
  }

  bool all_finite() const {
    for (Real v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  size_t check_index(int64_t i) const {
    if (i < 0 || i >= numel()) throw InvalidInputError("tensor index out of range");
    return static_cast<size_t>(i);
  }
  size_t idx2(int64_t i, int64_t j) const { return static_cast<size_t>(i * shape_[1] + j); }
  size_t idx3(int64_t i, int64_t j, int64_t k) const {
    return static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k);
  }
  size_t idx4(int64_t i, int64_t j, int64_t k, int64_t l) const {
    return static_cast<size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l);
  }

  Shape shape_;
  std::vector<Real> data_;
};

inline Real max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw InvalidInputError("max_abs_diff: shape mismatch");
  Real m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Deterministic RNG. Uniform/normal are implemented directly on top of the
// raw generator so results do not depend on the standard library's
// distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t u64() { return gen_(); }

  Real uniform() {  // [0,1)
    return std::ldexp(static_cast<Real>(gen_() >> 11), -53);
  }
  Real uniform(Real a, Real b) { return a + (b - a) * uniform(); }

  Real normal() {
    Real u1 = 1.0 - uniform();  // (0,1]
    Real u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }
  Real normal(Real mean, Real stddev) { return mean + stddev * normal(); }

  int64_t index(int64_t n) {
    if (n <= 0) throw InvalidInputError("Rng::index requires n > 0");
    return static_cast<int64_t>(gen_() % static_cast<uint64_t>(n));
  }

  bool coin() { return (gen_() & 1u) != 0; }

  Tensor uniform_tensor(Shape shape, Real a, Real b) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = uniform(a, b);
    return t;
  }
  Tensor normal_tensor(Shape shape, Real mean, Real stddev) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = normal(mean, stddev);
    return t;
  }

  // Fisher-Yates over [0,n)
  std::vector<int64_t> permutation(int64_t n) {
    std::vector<int64_t> p(static_cast<size_t>(n));
    std::iota(p.begin(), p.end(), 0);
    for (int64_t i = n - 1; i > 0; --i) std::swap(p[i], p[index(i + 1)]);
    return p;
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace srb
