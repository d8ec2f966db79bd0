#ifndef VOLNET_TEST_GRADCHECK_HPP
#define VOLNET_TEST_GRADCHECK_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <type_traits>

#include "volnet/tensor.hpp"

namespace volnet::test {

// Finite-difference step and pass threshold per precision.
template <typename Scalar>
struct GradTolerance {
  static constexpr double step = std::is_same_v<Scalar, float> ? 1e-2 : 1e-5;
  static constexpr double max_relative_error = std::is_same_v<Scalar, float> ? 1e-3 : 1e-5;
};

// Fixed random projection so a tensor-valued output becomes a scalar loss
// L = sum(w * y), whose upstream gradient is w.
template <typename Scalar>
struct Projection {
  Tensor<Scalar> weights;

  Projection(const Shape& shape, std::mt19937_64& rng) : weights(shape) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (Index i = 0; i < weights.size(); ++i) weights[i] = Scalar(u(rng));
  }

  double operator()(const Tensor<Scalar>& y) const {
    double sum = 0.0;
    for (Index i = 0; i < y.size(); ++i) sum += double(weights[i]) * double(y[i]);
    return sum;
  }
};

// Central differences of `loss` w.r.t. every entry of `x` (perturbed in place
// and restored). The denominator uses the perturbed values actually stored, so
// rounding of x +- h does not leak into the estimate. Entries for which
// `skip(i)` holds are reported as NaN and ignored by relative_error.
template <typename Scalar>
Tensor<double> numeric_gradient(Tensor<Scalar>& x, const std::function<double()>& loss, double step,
                                const std::function<bool(Index)>& skip = {}) {
  Tensor<double> grad(x.shape());
  for (Index i = 0; i < x.size(); ++i) {
    if (skip && skip(i)) {
      grad[i] = std::nan("");
      continue;
    }
    const Scalar original = x[i];
    x[i] = Scalar(double(original) + step);
    const double x_plus = double(x[i]);
    const double loss_plus = loss();
    x[i] = Scalar(double(original) - step);
    const double x_minus = double(x[i]);
    const double loss_minus = loss();
    x[i] = original;
    grad[i] = (loss_plus - loss_minus) / (x_plus - x_minus);
  }
  return grad;
}

// max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|): the worst deviation
// relative to the gradient's own scale. NaN entries of `numeric` are skipped.
template <typename Scalar>
double relative_error(const Tensor<Scalar>& analytic, const Tensor<double>& numeric) {
  double diff = 0.0, scale = 0.0;
  for (Index i = 0; i < numeric.size(); ++i) {
    if (std::isnan(numeric[i])) continue;
    diff = std::max(diff, std::abs(double(analytic[i]) - numeric[i]));
    scale = std::max({scale, std::abs(double(analytic[i])), std::abs(numeric[i])});
  }
  return scale == 0.0 ? diff : diff / scale;
}

}  // namespace volnet::test

#endif
