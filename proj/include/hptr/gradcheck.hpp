// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "hptr/tensor.hpp"

namespace hptr {

struct NamedTensor {
  std::string name;
  Tensor<double> tensor;
};

struct ParamGradCheck {
  std::string name;
  std::size_t count = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  bool passed = true;
};

struct FiniteDiffReport {
  std::vector<ParamGradCheck> params;
  double max_rel_error = 0.0;
  std::size_t checked_elements = 0;
  bool passed = true;
};

/// Compares analytic gradients of a scalar function against central
/// differences, element by element.
///
/// The relative error of one element is |a - n| / max(|a|, |n|, abs_floor).
/// `f` must be deterministic and must read the parameters through the given
/// tensors; perturbations are written into them in place and restored.
FiniteDiffReport finite_diff_check(const std::function<Tensor<double>()>& f,
                                   const std::vector<NamedTensor>& params, double h = 1e-5,
                                   double tol = 1e-4, double abs_floor = 1e-6);

}  // namespace hptr
