#pragma once

#include <functional>
#include <string>
#include <vector>

#include "rrdet/autodiff.h"
#include "rrdet/tensor.h"

namespace rrdet::ad {

struct GradCheckResult {
  bool pass = false;
  double max_rel_err = 0.0;
  double tol = 0.0;
  int64_t coords_checked = 0;
  std::string worst;  // human-readable location of the worst coordinate
};

/// Central-difference check of reverse-mode gradients.
///
/// `fn` must be pure: called repeatedly with the same leaf handles, it
/// rebuilds the scalar loss from their current values. `inits` seeds the
/// leaves (f64 strongly recommended). Relative error per coordinate is
/// |a - n| / max(|a|, |n|, 1e-8). When `max_coords_per_param` is
/// non-negative, at most that many coordinates per parameter are probed,
/// chosen deterministically from `subsample_seed`.
GradCheckResult check_gradient(const std::function<Var(const std::vector<Var>&)>& fn,
                               const std::vector<Tensor>& inits, double eps = 1e-5,
                               double tol = 1e-4, int64_t max_coords_per_param = -1,
                               uint64_t subsample_seed = 0);

/// Single-input convenience wrapper.
GradCheckResult check_gradient(const std::function<Var(const Var&)>& fn, const Tensor& init,
                               double eps = 1e-5, double tol = 1e-4);

struct OpCheck {
  std::string op;
  GradCheckResult result;
};

/// Runs a finite-difference check over every primitive in
/// required_op_suite(), with fixed seeds and inputs kept away from
/// non-differentiable kinks. All checks run in f64.
std::vector<OpCheck> run_op_suite_checks();

}  // namespace rrdet::ad
