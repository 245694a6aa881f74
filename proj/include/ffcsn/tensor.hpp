#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ffcsn {

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// RAII guard that disables graph recording (eval-mode forward passes).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense n-dimensional array with reverse-mode gradient tracking.
///
/// A Tensor is both the value carrier and a node of the computation graph:
/// ops create fresh tensors holding parent links and a backward closure.
/// Precision is a template parameter; float for training, double for
/// finite-difference gradient verification.
template <class R>
class Tensor : public std::enable_shared_from_this<Tensor<R>> {
 public:
  using Ptr = std::shared_ptr<Tensor<R>>;
  using value_type = R;

  static Ptr create(Shape shape, std::vector<R> data, bool requires_grad = false) {
    if (shape.empty()) throw std::invalid_argument("tensor shape must be non-empty");
    for (std::size_t d : shape)
      if (d == 0) throw std::invalid_argument("tensor dimensions must be positive");
    if (shape_numel(shape) != data.size())
      throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    auto t = Ptr(new Tensor<R>());
    t->shape_ = std::move(shape);
    t->data_ = std::move(data);
    t->requires_grad_ = requires_grad;
    return t;
  }

  static Ptr zeros(Shape shape, bool requires_grad = false) {
    std::size_t n = shape_numel(shape);
    return create(std::move(shape), std::vector<R>(n, R(0)), requires_grad);
  }

  static Ptr full(Shape shape, R value, bool requires_grad = false) {
    std::size_t n = shape_numel(shape);
    return create(std::move(shape), std::vector<R>(n, value), requires_grad);
  }

  static Ptr scalar(R value, bool requires_grad = false) {
    return create({1}, {value}, requires_grad);
  }

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }

  std::vector<R>& data() { return data_; }
  const std::vector<R>& data() const { return data_; }
  R* raw() { return data_.data(); }
  const R* raw() const { return data_.data(); }

  R item() const {
    if (numel() != 1)
      throw std::runtime_error("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool v) { requires_grad_ = v; }

  bool has_grad() const { return !grad_.empty(); }
  std::vector<R>& grad() {
    ensure_grad();
    return grad_;
  }
  const std::vector<R>& grad_view() const { return grad_; }
  void ensure_grad() {
    if (grad_.empty()) grad_.assign(data_.size(), R(0));
  }
  void zero_grad() { grad_.clear(); }

  /// Leaf copy sharing no graph history; gradients stop here.
  Ptr detach() const { return create(shape_, data_, false); }

  bool is_leaf() const { return !backward_fn_; }
  const std::vector<Ptr>& parents() const { return parents_; }

  // graph wiring, used by ops
  void set_edges(std::vector<Ptr> parents, std::function<void()> backward_fn) {
    parents_ = std::move(parents);
    backward_fn_ = std::move(backward_fn);
    requires_grad_ = true;
  }

  void run_backward() {
    if (backward_fn_) backward_fn_();
  }

  /// Releases graph links after a backward pass so intermediate buffers free
  /// eagerly even while the loss handle stays alive.
  void release_graph() { parents_.clear(); backward_fn_ = nullptr; }

 private:
  Tensor() = default;

  Shape shape_;
  std::vector<R> data_;
  std::vector<R> grad_;
  bool requires_grad_ = false;
  std::vector<Ptr> parents_;
  std::function<void()> backward_fn_;
};

template <class R>
using TensorPtr = std::shared_ptr<Tensor<R>>;

template <class R>
inline bool any_requires_grad(std::initializer_list<TensorPtr<R>> ts) {
  for (const auto& t : ts)
    if (t && t->requires_grad()) return true;
  return false;
}

/// Populates gradients of every parameter reachable from `out`.
/// `out` must be a scalar produced by a recorded forward pass. Parameter
/// gradients accumulate across calls until zeroed explicitly.
template <class R>
inline void backward(const TensorPtr<R>& out) {
  if (!out) throw std::invalid_argument("backward: null tensor");
  if (out->numel() != 1)
    throw std::runtime_error("backward requires a scalar output, got shape " +
                             shape_str(out->shape()));
  if (out->is_leaf())
    throw std::runtime_error("backward called without a recorded computation graph");

  // iterative post-order over the DAG
  std::vector<Tensor<R>*> order;
  std::vector<std::pair<Tensor<R>*, std::size_t>> stack;
  std::vector<Tensor<R>*> seen;
  auto visited = [&](Tensor<R>* t) {
    return std::find(seen.begin(), seen.end(), t) != seen.end();
  };
  stack.emplace_back(out.get(), 0);
  seen.push_back(out.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    const auto& ps = node->parents();
    if (idx < ps.size()) {
      Tensor<R>* p = ps[idx++].get();
      if (p->requires_grad() && !p->is_leaf() && !visited(p)) {
        seen.push_back(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  out->grad().assign(1, R(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) (*it)->run_backward();
}

}  // namespace ffcsn
