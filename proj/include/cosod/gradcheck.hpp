#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "cosod/tensor.hpp"

namespace cosod {

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = true;
  // Location of the worst coordinate: parameter index and flat element index.
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Compares reverse-mode gradients of a scalar function against central
// differences (f(x+h e_i) - f(x-h e_i)) / 2h. Relative error uses the
// denominator max(|a|, |b|, 1e-5); the floor keeps structurally zero
// gradients (attention key biases, for one) from turning rounding noise into
// a large relative error.
GradCheckReport finite_diff_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                                  const Tensor<double>& x, double h = 1e-3, double tol = 1e-4);

// Same check over several leaf tensors that `f` closes over. The tensors are
// perturbed in place and restored afterwards.
GradCheckReport finite_diff_check(const std::function<Tensor<double>()>& f,
                                  std::vector<Tensor<double>> params, double h = 1e-3,
                                  double tol = 1e-4);

}  // namespace cosod
