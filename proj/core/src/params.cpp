#include "rrdet/params.h"

#include <cmath>
#include <stdexcept>

namespace rrdet {

ad::Var ParamRegistry::create(const std::string& name, Tensor init) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  if (init.dtype() != dt_) init = init.to(dt_);
  ad::Var v = ad::leaf(std::move(init), true);
  items_.emplace_back(name, v);
  return v;
}

ad::Var ParamRegistry::find(const std::string& name) const {
  for (const auto& [n, v] : items_)
    if (n == name) return v;
  throw std::invalid_argument("unknown parameter: " + name);
}

bool ParamRegistry::contains(const std::string& name) const {
  for (const auto& [n, v] : items_)
    if (n == name) return true;
  return false;
}

int64_t ParamRegistry::total_scalars() const {
  int64_t t = 0;
  for (const auto& [n, v] : items_) t += v.numel();
  return t;
}

Tensor xavier_uniform(int64_t in, int64_t out, Rng& rng, Dtype dt) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  Tensor t = Tensor::zeros({in, out}, Dtype::f64);
  double* p = t.data<double>();
  for (int64_t i = 0; i < t.numel(); ++i) p[i] = rng.uniform(-limit, limit);
  return dt == Dtype::f64 ? t : t.to(dt);
}

Tensor normal_init(Shape shape, double stddev, Rng& rng, Dtype dt) {
  Tensor t = Tensor::zeros(std::move(shape), Dtype::f64);
  double* p = t.data<double>();
  for (int64_t i = 0; i < t.numel(); ++i) p[i] = rng.normal() * stddev;
  return dt == Dtype::f64 ? t : t.to(dt);
}

Linear::Linear(ParamRegistry& reg, const std::string& prefix, int64_t in, int64_t out, Rng& rng)
    : w(reg.create(prefix + ".w", xavier_uniform(in, out, rng, reg.dtype()))),
      b(reg.create(prefix + ".b", Tensor::zeros({out}, reg.dtype()))) {}

LayerNorm::LayerNorm(ParamRegistry& reg, const std::string& prefix, int64_t dim)
    : gamma(reg.create(prefix + ".gamma", Tensor::full({dim}, 1.0, reg.dtype()))),
      beta(reg.create(prefix + ".beta", Tensor::zeros({dim}, reg.dtype()))) {}

}  // namespace rrdet
