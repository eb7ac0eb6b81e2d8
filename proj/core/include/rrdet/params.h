#pragma once

#include <string>
#include <utility>
#include <vector>

#include "rrdet/autodiff.h"
#include "rrdet/rng.h"
#include "rrdet/tensor.h"

namespace rrdet {

/// Ordered, named collection of trainable leaves. Modules register their
/// weights here so the optimizer, checkpointing and parameter audits all
/// see the same flat list.
class ParamRegistry {
 public:
  explicit ParamRegistry(Dtype dt) : dt_(dt) {}

  ad::Var create(const std::string& name, Tensor init);
  const std::vector<std::pair<std::string, ad::Var>>& all() const { return items_; }
  ad::Var find(const std::string& name) const;
  bool contains(const std::string& name) const;
  int64_t total_scalars() const;
  Dtype dtype() const { return dt_; }

 private:
  Dtype dt_;
  std::vector<std::pair<std::string, ad::Var>> items_;
};

// Weight initializers. Linear weights are stored (in, out) so the forward
// pass is x * W.
Tensor xavier_uniform(int64_t in, int64_t out, Rng& rng, Dtype dt);
Tensor normal_init(Shape shape, double stddev, Rng& rng, Dtype dt);

/// Fully-connected layer; bias starts at zero unless given.
struct Linear {
  ad::Var w, b;
  Linear() = default;
  Linear(ParamRegistry& reg, const std::string& prefix, int64_t in, int64_t out, Rng& rng);
  ad::Var operator()(const ad::Var& x) const { return ad::affine(x, w, b); }
  int64_t in() const { return w.shape()[0]; }
  int64_t out() const { return w.shape()[1]; }
};

/// Layer norm over the last axis with learnable affine.
struct LayerNorm {
  ad::Var gamma, beta;
  LayerNorm() = default;
  LayerNorm(ParamRegistry& reg, const std::string& prefix, int64_t dim);
  ad::Var operator()(const ad::Var& x) const { return ad::layer_norm(x, gamma, beta); }
};

}  // namespace rrdet
