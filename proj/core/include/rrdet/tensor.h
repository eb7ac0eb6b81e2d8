#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace rrdet {

enum class Dtype { f32, f64 };

inline std::size_t dtype_size(Dtype dt) { return dt == Dtype::f32 ? 4 : 8; }
const char* dtype_name(Dtype dt);

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Dense row-major tensor. Storage is shared between copies; values are
/// treated as immutable once an operation has produced them. The only
/// sanctioned in-place writers are initializers and the optimizer, which
/// own their tensors exclusively.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, Dtype dt);
  static Tensor full(Shape shape, double value, Dtype dt);
  static Tensor from_values(Shape shape, const std::vector<double>& values, Dtype dt);
  static Tensor scalar(double value, Dtype dt);
  /// Allocation without the zero fill. Contents are unspecified: callers
  /// must write every element before the tensor escapes.
  static Tensor uninitialized(Shape shape, Dtype dt);

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const;  // negative indices count from the back
  int64_t numel() const { return numel_; }
  Dtype dtype() const;

  template <typename T>
  const T* data() const;
  template <typename T>
  T* data();

  // Slow generic element access, for tests, IO and glue code.
  double get(int64_t flat_index) const;
  void set(int64_t flat_index, double value);
  std::vector<double> to_vector() const;

  Tensor clone() const;
  Tensor to(Dtype dt) const;
  Tensor reshaped(Shape new_shape) const;  // shares storage

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

 private:
  struct Storage {
    Dtype dt = Dtype::f32;
    int64_t n = 0;
    std::unique_ptr<unsigned char[]> bytes;

    float* f() { return reinterpret_cast<float*>(bytes.get()); }
    const float* f() const { return reinterpret_cast<const float*>(bytes.get()); }
    double* d() { return reinterpret_cast<double*>(bytes.get()); }
    const double* d() const { return reinterpret_cast<const double*>(bytes.get()); }
  };
  Shape shape_;
  int64_t numel_ = 0;
  std::shared_ptr<Storage> st_;

  void check_defined() const;
};

template <>
inline const float* Tensor::data<float>() const {
  check_defined();
  if (dtype() != Dtype::f32) throw std::runtime_error("tensor dtype is not f32");
  return st_->f();
}
template <>
inline const double* Tensor::data<double>() const {
  check_defined();
  if (dtype() != Dtype::f64) throw std::runtime_error("tensor dtype is not f64");
  return st_->d();
}
template <>
inline float* Tensor::data<float>() {
  check_defined();
  if (dtype() != Dtype::f32) throw std::runtime_error("tensor dtype is not f32");
  return st_->f();
}
template <>
inline double* Tensor::data<double>() {
  check_defined();
  if (dtype() != Dtype::f64) throw std::runtime_error("tensor dtype is not f64");
  return st_->d();
}

/// Invokes fn with a value of the scalar type matching dt.
template <typename F>
auto dispatch_dtype(Dtype dt, F&& fn) {
  if (dt == Dtype::f32) return fn(float{});
  return fn(double{});
}

}  // namespace rrdet
