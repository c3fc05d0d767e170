#include "deblurkit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "deblurkit/common.hpp"

namespace dbk {

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  size_ = 1;
  for (int d : shape_) {
    if (d <= 0) throw ShapeError("tensor dimension must be positive, got " + shape_str(shape_));
    size_ *= d;
  }
  data_ = std::make_shared<std::vector<double>>(static_cast<size_t>(size_), 0.0);
}

Tensor Tensor::full(std::vector<int> shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.shape_ = shape_;
  t.size_ = size_;
  t.data_ = std::make_shared<std::vector<double>>(*data_);
  return t;
}

void Tensor::fill(double value) { std::fill(data_->begin(), data_->end(), value); }

void Tensor::axpy(double s, const Tensor& b) {
  if (!same_shape(b)) throw ShapeError("axpy shape mismatch: " + shape_str(*this) + " vs " + shape_str(b));
  double* a = data();
  const double* bp = b.data();
  for (std::int64_t i = 0; i < size_; ++i) a[i] += s * bp[i];
}

double Tensor::sum() const {
  double s = 0.0;
  const double* p = data();
  for (std::int64_t i = 0; i < size_; ++i) s += p[i];
  return s;
}

double Tensor::min() const {
  const double* p = data();
  double m = p[0];
  for (std::int64_t i = 1; i < size_; ++i) m = std::min(m, p[i]);
  return m;
}

double Tensor::max() const {
  const double* p = data();
  double m = p[0];
  for (std::int64_t i = 1; i < size_; ++i) m = std::max(m, p[i]);
  return m;
}

bool Tensor::all_finite() const {
  const double* p = data();
  for (std::int64_t i = 0; i < size_; ++i)
    if (!std::isfinite(p[i])) return false;
  return true;
}

std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

std::string shape_str(const Tensor& t) { return shape_str(t.shape()); }

}  // namespace dbk
