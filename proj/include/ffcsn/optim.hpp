#pragma once

#include <stdexcept>
#include <vector>

#include "ffcsn/layers.hpp"

namespace ffcsn {

/// SGD with momentum and decoupled-from-nothing classic weight decay:
///   buffer <- momentum * buffer + (grad + weight_decay * param)
///   param  <- param - lr * buffer
template <class R>
inline void sgd_step(const std::vector<Parameter<R>*>& params, R lr, R momentum, R weight_decay) {
  for (Parameter<R>* p : params) {
    if (!p->value->has_grad())
      throw std::runtime_error("sgd_step: missing gradient for parameter '" + p->name + "'");
    auto& val = p->value->data();
    const auto& g = p->value->grad_view();
    auto& buf = p->momentum;
    for (std::size_t i = 0; i < val.size(); ++i) {
      buf[i] = momentum * buf[i] + (g[i] + weight_decay * val[i]);
      val[i] -= lr * buf[i];
    }
  }
}

template <class R>
inline void zero_grads(const std::vector<Parameter<R>*>& params) {
  for (Parameter<R>* p : params) p->value->zero_grad();
}

}  // namespace ffcsn
