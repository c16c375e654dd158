#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace sam3d {

inline constexpr double kGradCheckFloor = 1e-6;
// Gradients smaller than kRoundingMargin * eps * max(1, |f|) / h are judged by
// absolute error: at that scale the difference quotient is mostly rounding.
inline constexpr double kRoundingMargin = 1e5;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

// Compares backward() gradients of the scalar `f` with central differences for
// every element of every input. Each numeric value is the Richardson
// extrapolation (4 D(h/2) - D(h)) / 3 of the central quotients
// D(s) = (f(x + s) - f(x - s)) / 2s, which cancels the s^2 truncation term.
// The relative error denominator is max(|analytic|, |numeric|, floor), with
// floor raised to the rounding scale of f (see kRoundingMargin).
inline GradCheckReport grad_check_report(const std::function<Tensor()>& f,
                                         std::vector<Tensor> inputs, double h = 1e-5,
                                         double floor = kGradCheckFloor) {
  if (!(h >= 1e-7 && h <= 1e-3)) {
    throw TensorError(TensorError::Kind::invalid_argument, "grad_check", "step outside [1e-7, 1e-3]");
  }
  for (Tensor& t : inputs) t.zero_grad();
  f().backward();
  std::vector<std::vector<double>> analytic;
  for (const Tensor& t : inputs) {
    analytic.emplace_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                       : std::vector<double>(t.size(), 0.0));
  }

  auto eval = [&]() {
    NoGradGuard guard;
    const double v = f().item();
    if (!std::isfinite(v)) {
      throw TensorError(TensorError::Kind::non_finite, "grad_check", "non-finite f at perturbed point");
    }
    return v;
  };

  const double f0 = eval();
  floor = std::max(floor, kRoundingMargin * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(f0)) / h);

  GradCheckReport rep;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto values = inputs[t].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double x = values[i];
      auto central = [&](double s) {
        values[i] = x + s;
        const double fp = eval();
        values[i] = x - s;
        const double fm = eval();
        values[i] = x;
        return (fp - fm) / (2.0 * s);
      };
      const double coarse = central(h), fine = central(h / 2);
      const double numeric = fine + (fine - coarse) / 3.0;
      const double a = analytic[t][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      const double rel = std::abs(a - numeric) / denom;
      ++rep.checked;
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_input = t;
        rep.worst_index = i;
        rep.analytic = a;
        rep.numeric = numeric;
      }
    }
  }
  return rep;
}

inline double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                         double h = 1e-5) {
  return grad_check_report(f, std::move(inputs), h).max_rel_error;
}

}  // namespace sam3d
