#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ffcsn/layers.hpp"
#include "ffcsn/optim.hpp"

namespace ffcsn {

/// Result of a finite-difference gradient verification.
struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t checked_parameters = 0;
};

/// Compares analytic gradients of `objective` (a recorded scalar) against
/// central finite differences over every element of every parameter.
///
/// Intended for 64-bit instantiations; epsilon must lie in [1e-7, 1e-4].
/// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
template <class R>
GradCheckReport grad_check_fn(const std::vector<Parameter<R>*>& params,
                              const std::function<TensorPtr<R>()>& objective, R epsilon) {
  if (!(epsilon >= R(1e-7) && epsilon <= R(1e-4)))
    throw std::invalid_argument("grad_check: epsilon must lie in [1e-7, 1e-4]");

  zero_grads(params);
  auto loss = objective();
  if (loss->numel() != 1)
    throw std::runtime_error("grad_check: objective must produce a scalar");
  if (params.empty()) return {};  // vacuous max over an empty parameter set
  backward(loss);

  std::vector<std::vector<R>> analytic;
  analytic.reserve(params.size());
  for (Parameter<R>* p : params) {
    p->value->ensure_grad();
    analytic.push_back(p->value->grad_view());
  }

  GradCheckReport report;
  NoGradGuard no_grad;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter<R>* p = params[pi];
    auto& data = p->value->data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const R saved = data[i];
      data[i] = saved + epsilon;
      const R up = objective()->item();
      data[i] = saved - epsilon;
      const R down = objective()->item();
      data[i] = saved;
      const R numeric = (up - down) / (R(2) * epsilon);
      const R a = analytic[pi][i];
      if (!std::isfinite(static_cast<double>(numeric)) ||
          !std::isfinite(static_cast<double>(a)))
        throw std::runtime_error("grad_check: non-finite value for parameter '" + p->name +
                                 "' element " + std::to_string(i));
      const double denom = std::max({std::abs(static_cast<double>(a)),
                                     std::abs(static_cast<double>(numeric)), 1e-8});
      const double rel = std::abs(static_cast<double>(a - numeric)) / denom;
      if (rel > report.max_relative_error) {
        report.max_relative_error = rel;
        report.worst_parameter = p->name;
      }
      ++report.checked_parameters;
    }
  }
  zero_grads(params);
  return report;
}

/// Re-draws parameters at O(1) scales before a finite-difference check.
/// The production init (std 0.01) leaves early-layer gradients near the
/// central-difference cancellation floor, which says nothing about the
/// correctness of the backward pass being verified.
template <class R>
inline void randomize_for_gradcheck(const std::vector<Parameter<R>*>& params, Rng& rng) {
  for (Parameter<R>* p : params) {
    const bool is_gain = p->name.find("gamma") != std::string::npos;
    const bool is_shift = p->name.find("bias") != std::string::npos ||
                          p->name.find("beta") != std::string::npos;
    for (auto& v : p->value->data()) {
      if (is_gain)
        v = R(1) + static_cast<R>(rng.gaussian() * 0.1);
      else if (is_shift)
        v = static_cast<R>(rng.gaussian() * 0.05);
      else
        v = static_cast<R>(rng.gaussian() * 0.3);
    }
  }
}

/// Checks a LayerSpec-composed graph. The scalar objective is a fixed
/// pseudo-random weighting of the outputs so that softmax-style layers do
/// not collapse to a constant sum.
template <class R>
double grad_check(Sequential<R>& graph, const TensorPtr<R>& input, R epsilon,
                  bool training = true) {
  auto params = graph.parameters();
  auto objective = [&]() {
    auto out = graph.forward(input, training);
    std::vector<R> coeff(out->numel());
    for (std::size_t i = 0; i < coeff.size(); ++i)
      coeff[i] = static_cast<R>(std::sin(0.7 * static_cast<double>(i + 1)) + 0.25);
    auto c = Tensor<R>::create(out->shape(), std::move(coeff));
    return sum_all(mul(out, c));
  };
  return grad_check_fn<R>(params, objective, epsilon).max_relative_error;
}

}  // namespace ffcsn
