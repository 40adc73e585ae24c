#pragma once

#include <cmath>
#include <cstddef>
#include <functional>

#include "clipad/numerics/tensor.hpp"

namespace clipad::numerics {

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate of x.
template <typename T>
BasicTensor<T> finite_diff_grad(const std::function<double(const BasicTensor<T>&)>& f,
                                const BasicTensor<T>& x, double h) {
  BasicTensor<T> grad(x.shape());
  BasicTensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T original = probe[i];
    probe[i] = static_cast<T>(original + h);
    const double up = f(probe);
    probe[i] = static_cast<T>(original - h);
    const double down = f(probe);
    probe[i] = original;
    grad[i] = static_cast<T>((up - down) / (2.0 * h));
  }
  return grad;
}

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t failures = 0;
};

/// Compares two gradients entrywise. An entry passes when
/// |a - n| <= rel_tol * max(|a|, |n|) or |a - n| <= abs_floor.
template <typename T>
GradCheckResult compare_gradients(const BasicTensor<T>& analytic, const BasicTensor<T>& numeric,
                                  double rel_tol, double abs_floor = 1e-9) {
  GradCheckResult result;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i];
    const double n = numeric[i];
    const double diff = std::abs(a - n);
    const double scale = std::max(std::abs(a), std::abs(n));
    const double rel = scale > 0.0 ? diff / scale : 0.0;
    const bool ok = diff <= abs_floor || diff <= rel_tol * scale;
    if (!ok) ++result.failures;
    if (diff > abs_floor && rel > result.max_relative_error) {
      result.max_relative_error = rel;
      result.worst_index = i;
    }
  }
  return result;
}

}  // namespace clipad::numerics
