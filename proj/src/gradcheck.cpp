// SPDX-License-Identifier: Apache-2.0
#include "hptr/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "hptr/error.hpp"

namespace hptr {

FiniteDiffReport finite_diff_check(const std::function<Tensor<double>()>& f,
                                   const std::vector<NamedTensor>& params, double h, double tol,
                                   double abs_floor) {
  for (const auto& p : params) {
    auto t = p.tensor;
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tensor<double> loss = f();
    loss.backward();
  }
  FiniteDiffReport report;
  NoGradGuard no_grad;
  for (const auto& p : params) {
    Tensor<double> t = p.tensor;
    ParamGradCheck check;
    check.name = p.name;
    check.count = t.numel();
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    auto values = t.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + h;
      const double plus = f().item();
      values[i] = original - h;
      const double minus = f().item();
      values[i] = original;
      const double numeric = (plus - minus) / (2.0 * h);
      if (!std::isfinite(numeric)) throw NumericalError("non-finite difference in " + p.name);
      const double abs_err = std::abs(analytic[i] - numeric);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), abs_floor});
      check.max_abs_error = std::max(check.max_abs_error, abs_err);
      check.max_rel_error = std::max(check.max_rel_error, abs_err / denom);
    }
    check.passed = check.max_rel_error < tol;
    report.checked_elements += check.count;
    report.max_rel_error = std::max(report.max_rel_error, check.max_rel_error);
    report.passed = report.passed && check.passed;
    report.params.push_back(std::move(check));
  }
  return report;
}

}  // namespace hptr
