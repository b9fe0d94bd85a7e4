#pragma once

// Finite-difference verification of reverse-mode gradients (double precision).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mpjudge/errors.hpp"
#include "mpjudge/tensor.hpp"

namespace mpjudge {

struct GradCheckReport {
  double max_relative_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
  bool passed = false;
  std::string worst;  // "<input index>[<element>]" of the largest relative error
};

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;
  // Relative error is |a - n| / max(|a|, |n|, abs_floor).
  double abs_floor = 1e-6;
  // Elements probed per input; 0 probes all, otherwise an even stride.
  std::size_t max_elements_per_input = 0;
};

/// Compares the tape gradient of the scalar `f()` with respect to each
/// tensor in `inputs` against central differences. `f` must rebuild its
/// result from the current contents of `inputs` on every call.
template <typename F>
GradCheckReport grad_check(F&& f, std::vector<TensorD> inputs, const GradCheckOptions& opt = {}) {
  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  auto evaluate = [&] {
    const double v = f().item();
    if (!std::isfinite(v)) throw NumericError("grad_check: objective is not finite");
    return v;
  };
  {
    Tape<double> tape;
    TensorD loss;
    {
      TapeScope<double> scope(tape);
      loss = f();
    }
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: objective is not finite");
    if (loss.requires_grad()) backward(loss, tape);
  }

  GradCheckReport report;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    TensorD& x = inputs[t];
    const std::vector<double> analytic = x.grad();
    const std::size_t n = x.numel();
    const std::size_t stride =
        opt.max_elements_per_input == 0 ? 1 : std::max<std::size_t>(1, n / opt.max_elements_per_input);
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = x[i];
      x[i] = saved + opt.step;
      const double fp = evaluate();
      x[i] = saved - opt.step;
      const double fm = evaluate();
      x[i] = saved;
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double abs_err = std::abs(analytic[i] - numeric);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), opt.abs_floor});
      const double rel = abs_err / denom;
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel > report.max_relative_error || report.checked == 0) {
        report.max_relative_error = rel;
        report.worst = std::to_string(t) + "[" + std::to_string(i) + "]";
      }
      ++report.checked;
    }
  }
  report.passed = report.max_relative_error < opt.tolerance;
  return report;
}

template <typename F>
GradCheckReport grad_check(F&& f, TensorD x, double tolerance) {
  GradCheckOptions opt;
  opt.tolerance = tolerance;
  return grad_check(std::forward<F>(f), std::vector<TensorD>{std::move(x)}, opt);
}

}  // namespace mpjudge
