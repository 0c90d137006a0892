#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedforge {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

// Dense row-major tensor of 64-bit floats.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(count(shape_), 0.0) {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (count(shape_) != data_.size()) {
      throw Error("tensor: shape " + shape_string(shape_) + " needs " +
                  std::to_string(count(shape_)) + " values, got " +
                  std::to_string(data_.size()));
    }
  }

  // Constructor for external input; rejects NaN/Inf.
  static Tensor checked(std::vector<std::size_t> shape,
                        std::vector<double> data) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (!std::isfinite(data[i])) {
        throw Error("tensor: non-finite value at flat index " +
                    std::to_string(i));
      }
    }
    return Tensor(std::move(shape), std::move(data));
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // (H,W,C) indexing
  double& at3(std::size_t h, std::size_t w, std::size_t c) {
    return data_[(h * shape_[1] + w) * shape_[2] + c];
  }
  double at3(std::size_t h, std::size_t w, std::size_t c) const {
    return data_[(h * shape_[1] + w) * shape_[2] + c];
  }

  // (B,H,W,C) indexing
  double& at4(std::size_t b, std::size_t h, std::size_t w, std::size_t c) {
    return data_[((b * shape_[1] + h) * shape_[2] + w) * shape_[3] + c];
  }
  double at4(std::size_t b, std::size_t h, std::size_t w, std::size_t c) const {
    return data_[((b * shape_[1] + h) * shape_[2] + w) * shape_[3] + c];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  static std::size_t count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

// Flat parameter vector; the unit of aggregation.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::size_t n) : v_(n, 0.0) {}
  explicit ParamVector(std::vector<double> v) : v_(std::move(v)) {}

  std::size_t size() const { return v_.size(); }
  double& operator[](std::size_t i) { return v_[i]; }
  double operator[](std::size_t i) const { return v_[i]; }
  std::vector<double>& values() { return v_; }
  const std::vector<double>& values() const { return v_; }
  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }

  ParamVector& operator+=(const ParamVector& o) {
    check_len(o);
    for (std::size_t i = 0; i < v_.size(); ++i) v_[i] += o.v_[i];
    return *this;
  }
  ParamVector& operator-=(const ParamVector& o) {
    check_len(o);
    for (std::size_t i = 0; i < v_.size(); ++i) v_[i] -= o.v_[i];
    return *this;
  }
  ParamVector& operator*=(double s) {
    for (auto& x : v_) x *= s;
    return *this;
  }

  friend ParamVector operator+(ParamVector a, const ParamVector& b) {
    a += b;
    return a;
  }
  friend ParamVector operator-(ParamVector a, const ParamVector& b) {
    a -= b;
    return a;
  }
  friend ParamVector operator*(ParamVector a, double s) {
    a *= s;
    return a;
  }
  friend ParamVector operator*(double s, ParamVector a) {
    a *= s;
    return a;
  }

  double dot(const ParamVector& o) const {
    check_len(o);
    double s = 0.0;
    for (std::size_t i = 0; i < v_.size(); ++i) s += v_[i] * o.v_[i];
    return s;
  }

  double norm() const { return std::sqrt(dot(*this)); }

  bool finite() const {
    for (double x : v_)
      if (!std::isfinite(x)) return false;
    return true;
  }

 private:
  void check_len(const ParamVector& o) const {
    if (v_.size() != o.v_.size()) {
      throw Error("param vector length mismatch: " + std::to_string(v_.size()) +
                  " vs " + std::to_string(o.v_.size()));
    }
  }

  std::vector<double> v_;
};

inline double cosine_similarity(const std::vector<double>& a,
                                const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;  // zero-norm convention
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace fedforge
