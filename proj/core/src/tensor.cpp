#include "rrdet/tensor.h"

#include <cmath>
#include <cstring>
#include <sstream>

namespace rrdet {

const char* dtype_name(Dtype dt) { return dt == Dtype::f32 ? "f32" : "f64"; }

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) {
    if (e < 0) throw std::invalid_argument("negative shape extent in " + shape_str(s));
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

void Tensor::check_defined() const {
  if (!st_) throw std::logic_error("use of undefined tensor");
}

Tensor Tensor::uninitialized(Shape shape, Dtype dt) {
  Tensor t;
  t.numel_ = shape_numel(shape);
  t.shape_ = std::move(shape);
  t.st_ = std::make_shared<Storage>();
  t.st_->dt = dt;
  t.st_->n = t.numel_;
  t.st_->bytes.reset(new unsigned char[static_cast<size_t>(t.numel_) * dtype_size(dt)]);
  return t;
}

Tensor Tensor::zeros(Shape shape, Dtype dt) {
  Tensor t = uninitialized(std::move(shape), dt);
  std::memset(t.st_->bytes.get(), 0, static_cast<size_t>(t.numel_) * dtype_size(dt));
  return t;
}

Tensor Tensor::full(Shape shape, double value, Dtype dt) {
  Tensor t = uninitialized(std::move(shape), dt);
  if (dt == Dtype::f32) {
    float* p = t.st_->f();
    const float v = static_cast<float>(value);
    for (int64_t i = 0; i < t.numel_; ++i) p[i] = v;
  } else {
    double* p = t.st_->d();
    for (int64_t i = 0; i < t.numel_; ++i) p[i] = value;
  }
  return t;
}

Tensor Tensor::from_values(Shape shape, const std::vector<double>& values, Dtype dt) {
  Tensor t = uninitialized(std::move(shape), dt);
  if (static_cast<int64_t>(values.size()) != t.numel_)
    throw std::invalid_argument("from_values: " + std::to_string(values.size()) +
                             " values for shape " + shape_str(t.shape_));
  for (int64_t i = 0; i < t.numel_; ++i) t.set(i, values[static_cast<size_t>(i)]);
  return t;
}

Tensor Tensor::scalar(double value, Dtype dt) { return full({1}, value, dt); }

int64_t Tensor::dim(int i) const {
  int r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r) throw std::invalid_argument("dim index out of range");
  return shape_[static_cast<size_t>(i)];
}

Dtype Tensor::dtype() const {
  check_defined();
  return st_->dt;
}

double Tensor::get(int64_t i) const {
  check_defined();
  return st_->dt == Dtype::f32 ? static_cast<double>(st_->f()[i]) : st_->d()[i];
}

void Tensor::set(int64_t i, double v) {
  check_defined();
  if (st_->dt == Dtype::f32)
    st_->f()[i] = static_cast<float>(v);
  else
    st_->d()[i] = v;
}

std::vector<double> Tensor::to_vector() const {
  std::vector<double> out(static_cast<size_t>(numel_));
  for (int64_t i = 0; i < numel_; ++i) out[static_cast<size_t>(i)] = get(i);
  return out;
}

Tensor Tensor::clone() const {
  check_defined();
  Tensor t = uninitialized(shape_, st_->dt);
  std::memcpy(t.st_->bytes.get(), st_->bytes.get(),
              static_cast<size_t>(numel_) * dtype_size(st_->dt));
  return t;
}

Tensor Tensor::to(Dtype dt) const {
  check_defined();
  if (dt == st_->dt) return clone();
  Tensor t = uninitialized(shape_, dt);
  for (int64_t i = 0; i < numel_; ++i) t.set(i, get(i));
  return t;
}

Tensor Tensor::reshaped(Shape new_shape) const {
  check_defined();
  if (shape_numel(new_shape) != numel_)
    throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " + shape_str(new_shape) +
                             " changes element count");
  Tensor t = *this;
  t.shape_ = std::move(new_shape);
  return t;
}

bool Tensor::all_finite() const {
  check_defined();
  if (st_->dt == Dtype::f32) {
    const float* p = st_->f();
    for (int64_t i = 0; i < numel_; ++i)
      if (!std::isfinite(p[i])) return false;
  } else {
    const double* p = st_->d();
    for (int64_t i = 0; i < numel_; ++i)
      if (!std::isfinite(p[i])) return false;
  }
  return true;
}

}  // namespace rrdet
