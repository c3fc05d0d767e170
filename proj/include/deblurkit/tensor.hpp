#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <vector>

namespace dbk {

// Dense row-major double tensor. Copies are shallow (shared storage); use
// clone() for a deep copy. Images are stored C x H x W in [0,1], flow fields
// 2 x H x W (dx then dy), conv weights O x C x Kh x Kw.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double value);
  static Tensor scalar(double value) { return full({1}, value); }

  bool defined() const { return data_ != nullptr; }
  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  std::int64_t size() const { return size_; }

  double* data() { return data_->data(); }
  const double* data() const { return data_->data(); }

  double& operator[](std::int64_t i) { return (*data_)[static_cast<size_t>(i)]; }
  double operator[](std::int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

  // Index helpers for the common layouts.
  double& at3(int c, int y, int x) { return (*data_)[idx3(c, y, x)]; }
  double at3(int c, int y, int x) const { return (*data_)[idx3(c, y, x)]; }
  std::size_t idx3(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x;
  }

  Tensor clone() const;
  void fill(double value);
  void zero() { fill(0.0); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  // In-place a += s * b (same shape).
  void axpy(double s, const Tensor& b);

  double sum() const;
  double min() const;
  double max() const;
  bool all_finite() const;

 private:
  std::vector<int> shape_;
  std::shared_ptr<std::vector<double>> data_;
  std::int64_t size_ = 0;
};

std::string shape_str(const Tensor& t);
std::string shape_str(const std::vector<int>& s);

}  // namespace dbk
