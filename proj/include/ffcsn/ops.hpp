#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "ffcsn/tensor.hpp"

// Differentiable operations. Each op returns a fresh tensor; when gradient
// recording is active and an input requires grad, the result carries parent
// links and a backward closure that accumulates into the parents' grads.

namespace ffcsn {

namespace detail {

template <class R>
inline void check_same_shape(const char* op, const TensorPtr<R>& a, const TensorPtr<R>& b) {
  if (a->shape() != b->shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a->shape()) + " vs " + shape_str(b->shape()));
}

template <class R, class... Parents>
inline void wire(TensorPtr<R>& out, std::function<void()> fn, Parents... parents) {
  if (!grad_enabled()) return;
  bool need = (... || parents->requires_grad());
  if (!need) return;
  out->set_edges({parents...}, std::move(fn));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class R>
TensorPtr<R> add(const TensorPtr<R>& a, const TensorPtr<R>& b) {
  detail::check_same_shape("add", a, b);
  std::vector<R> out(a->numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data()[i] + b->data()[i];
  auto y = Tensor<R>::create(a->shape(), std::move(out));
  Tensor<R>* yr = y.get();
  detail::wire(y, [a, b, yr]() {
    const auto& g = yr->grad_view();
    if (a->requires_grad()) {
      auto& ga = a->grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b->requires_grad()) {
      auto& gb = b->grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  }, a, b);
  return y;
}

template <class R>
TensorPtr<R> sub(const TensorPtr<R>& a, const TensorPtr<R>& b) {
  detail::check_same_shape("sub", a, b);
  std::vector<R> out(a->numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data()[i] - b->data()[i];
  auto y = Tensor<R>::create(a->shape(), std::move(out));
  Tensor<R>* yr = y.get();
  detail::wire(y, [a, b, yr]() {
    const auto& g = yr->grad_view();
    if (a->requires_grad()) {
      auto& ga = a->grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b->requires_grad()) {
      auto& gb = b->grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  }, a, b);
  return y;
}

template <class R>
TensorPtr<R> mul(const TensorPtr<R>& a, const TensorPtr<R>& b) {
  detail::check_same_shape("mul", a, b);
  std::vector<R> out(a->numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data()[i] * b->data()[i];
  auto y = Tensor<R>::create(a->shape(), std::move(out));
  Tensor<R>* yr = y.get();
  detail::wire(y, [a, b, yr]() {
    const auto& g = yr->grad_view();
    if (a->requires_grad()) {
      auto& ga = a->grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b->data()[i];
    }
    if (b->requires_grad()) {
      auto& gb = b->grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a->data()[i];
    }
  }, a, b);
  return y;
}

template <class R>
TensorPtr<R> mul_scalar(const TensorPtr<R>& a, R c) {
  std::vector<R> out(a->numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data()[i] * c;
  auto y = Tensor<R>::create(a->shape(), std::move(out));
  Tensor<R>* yr = y.get();
  detail::wire(y, [a, c, yr]() {
    const auto& g = yr->grad_view();
    auto& ga = a->grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
  }, a);
  return y;
}

template <class R>
TensorPtr<R> add_scalar(const TensorPtr<R>& a, R c) {
  std::vector<R> out(a->numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data()[i] + c;
  auto y = Tensor<R>::create(a->shape(), std::move(out));
  Tensor<R>* yr = y.get();
  detail::wire(y, [a, yr]() {
    const auto& g = yr->grad_view();
    auto& ga = a->grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  }, a);
  return y;
}

/// c - x
template <class R>
TensorPtr<R> sub_from_scalar(const TensorPtr<R>& a, R c) {
  std::vector<R> out(a->numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c - a->data()[i];
  auto y = Tensor<R>::create(a->shape(), std::move(out));
  Tensor<R>* yr = y.get();
  detail::wire(y, [a, yr]() {
    const auto& g = yr->grad_view();
    auto& ga = a->grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] -= g[i];
  }, a);
  return y;
}

template <class R>
TensorPtr<R> neg(const TensorPtr<R>& a) {
  return mul_scalar(a, R(-1));
}

// ---------------------------------------------------------------------------
// activations and pointwise nonlinearities
// ---------------------------------------------------------------------------

template <class R>
TensorPtr<R> relu(const TensorPtr<R>& a) {
  std::vector<R> out(a->numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data()[i] > R(0) ? a->data()[i] : R(0);
  auto y = Tensor<R>::create(a->shape(), std::move(out));
  Tensor<R>* yr = y.get();
  detail::wire(y, [a, yr]() {
    const auto& g = yr->grad_view();
    auto& ga = a->grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (a->data()[i] > R(0)) ga[i] += g[i];
  }, a);
  return y;
}

template <class R>
TensorPtr<R> elu(const TensorPtr<R>& a, R alpha = R(1)) {
  std::vector<R> out(a->numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    R x = a->data()[i];
    out[i] = x > R(0) ? x : alpha * (std::exp(x) - R(1));
  }
  auto y = Tensor<R>::create(a->shape(), std::move(out));
  Tensor<R>* yr = y.get();
  detail::wire(y, [a, alpha, yr]() {
    const auto& g = yr->grad_view();
    auto& ga = a->grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      R x = a->data()[i];
      ga[i] += g[i] * (x > R(0) ? R(1) : yr->data()[i] + alpha);
    }
  }, a);
  return y;
}

template <class R>
TensorPtr<R> sigmoid(const TensorPtr<R>& a) {
  std::vector<R> out(a->numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    R x = a->data()[i];
    out[i] = x >= R(0) ? R(1) / (R(1) + std::exp(-x))
                       : std::exp(x) / (R(1) + std::exp(x));
  }
  auto y = Tensor<R>::create(a->shape(), std::move(out));
  Tensor<R>* yr = y.get();
  detail::wire(y, [a, yr]() {
    const auto& g = yr->grad_view();
    auto& ga = a->grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      R s = yr->data()[i];
      ga[i] += g[i] * s * (R(1) - s);
    }
  }, a);
  return y;
}

template <class R>
TensorPtr<R> log_t(const TensorPtr<R>& a) {
  std::vector<R> out(a->numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a->data()[i]);
  auto y = Tensor<R>::create(a->shape(), std::move(out));
  Tensor<R>* yr = y.get();
  detail::wire(y, [a, yr]() {
    const auto& g = yr->grad_view();
    auto& ga = a->grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / a->data()[i];
  }, a);
  return y;
}

template <class R>
TensorPtr<R> square(const TensorPtr<R>& a) {
  std::vector<R> out(a->numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data()[i] * a->data()[i];
  auto y = Tensor<R>::create(a->shape(), std::move(out));
  Tensor<R>* yr = y.get();
  detail::wire(y, [a, yr]() {
    const auto& g = yr->grad_view();
    auto& ga = a->grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * R(2) * a->data()[i];
  }, a);
  return y;
}

template <class R>
TensorPtr<R> sqrt_t(const TensorPtr<R>& a) {
  std::vector<R> out(a->numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(a->data()[i]);
  auto y = Tensor<R>::create(a->shape(), std::move(out));
  Tensor<R>* yr = y.get();
  detail::wire(y, [a, yr]() {
    const auto& g = yr->grad_view();
    auto& ga = a->grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      ga[i] += g[i] * R(0.5) / yr->data()[i];
  }, a);
  return y;
}

/// Clamp with pass-through gradient strictly inside (lo, hi), zero outside.
template <class R>
TensorPtr<R> clamp(const TensorPtr<R>& a, R lo, R hi) {
  std::vector<R> out(a->numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::min(hi, std::max(lo, a->data()[i]));
  auto y = Tensor<R>::create(a->shape(), std::move(out));
  Tensor<R>* yr = y.get();
  detail::wire(y, [a, lo, hi, yr]() {
    const auto& g = yr->grad_view();
    auto& ga = a->grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      R x = a->data()[i];
      if (x > lo && x < hi) ga[i] += g[i];
    }
  }, a);
  return y;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

/// x[N,I] @ w[I,O] -> [N,O]
template <class R>
TensorPtr<R> matmul(const TensorPtr<R>& x, const TensorPtr<R>& w) {
  if (x->rank() != 2 || w->rank() != 2 || x->dim(1) != w->dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(x->shape()) +
                                " and " + shape_str(w->shape()));
  const std::size_t N = x->dim(0), I = x->dim(1), O = w->dim(1);
  std::vector<R> out(N * O, R(0));
  const R* xp = x->raw();
  const R* wp = w->raw();
  for (std::size_t n = 0; n < N; ++n) {
    R* yrow = out.data() + n * O;
    const R* xrow = xp + n * I;
    for (std::size_t i = 0; i < I; ++i) {
      const R xv = xrow[i];
      const R* wrow = wp + i * O;
      for (std::size_t o = 0; o < O; ++o) yrow[o] += xv * wrow[o];
    }
  }
  auto y = Tensor<R>::create({N, O}, std::move(out));
  Tensor<R>* yr = y.get();
  detail::wire(y, [x, w, yr, N, I, O]() {
    const R* g = yr->grad_view().data();
    if (x->requires_grad()) {
      auto& gx = x->grad();
      const R* wp = w->raw();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < I; ++i) {
          R acc = R(0);
          const R* wrow = wp + i * O;
          const R* grow = g + n * O;
          for (std::size_t o = 0; o < O; ++o) acc += grow[o] * wrow[o];
          gx[n * I + i] += acc;
        }
    }
    if (w->requires_grad()) {
      auto& gw = w->grad();
      const R* xp = x->raw();
      for (std::size_t n = 0; n < N; ++n) {
        const R* xrow = xp + n * I;
        const R* grow = g + n * O;
        for (std::size_t i = 0; i < I; ++i) {
          const R xv = xrow[i];
          R* gwrow = gw.data() + i * O;
          for (std::size_t o = 0; o < O; ++o) gwrow[o] += xv * grow[o];
        }
      }
    }
  }, x, w);
  return y;
}

/// x[N,O] + b[O] broadcast over rows
template <class R>
TensorPtr<R> add_rowvec(const TensorPtr<R>& x, const TensorPtr<R>& b) {
  if (x->rank() != 2 || b->rank() != 1 || x->dim(1) != b->dim(0))
    throw std::invalid_argument("add_rowvec: incompatible shapes " + shape_str(x->shape()) +
                                " and " + shape_str(b->shape()));
  const std::size_t N = x->dim(0), O = x->dim(1);
  std::vector<R> out(N * O);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) out[n * O + o] = x->data()[n * O + o] + b->data()[o];
  auto y = Tensor<R>::create({N, O}, std::move(out));
  Tensor<R>* yr = y.get();
  detail::wire(y, [x, b, yr, N, O]() {
    const auto& g = yr->grad_view();
    if (x->requires_grad()) {
      auto& gx = x->grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (b->requires_grad()) {
      auto& gb = b->grad();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o) gb[o] += g[n * O + o];
    }
  }, x, b);
  return y;
}

// ---------------------------------------------------------------------------
// convolution and pooling
// ---------------------------------------------------------------------------

/// 3x3 convolution, stride 1, zero padding 1 (spatial dims preserved).
/// x[N,C,H,W], w[O,C,3,3], b[O] -> [N,O,H,W]. Pass a null bias for
/// convolutions feeding batch-norm, where a bias would be redundant.
template <class R>
TensorPtr<R> conv2d3x3(const TensorPtr<R>& x, const TensorPtr<R>& w, const TensorPtr<R>& b) {
  if (x->rank() != 4 || w->rank() != 4 || w->dim(2) != 3 || w->dim(3) != 3 ||
      x->dim(1) != w->dim(1) || (b && (b->rank() != 1 || b->dim(0) != w->dim(0))))
    throw std::invalid_argument("conv2d3x3: incompatible shapes x=" + shape_str(x->shape()) +
                                " w=" + shape_str(w->shape()));
  const std::size_t N = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
  const std::size_t O = w->dim(0);
  std::vector<R> out(N * O * H * W);
  const R* xp = x->raw();
  const R* wp = w->raw();
  const R* bp = b ? b->raw() : nullptr;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) {
      R* yplane = out.data() + (n * O + o) * H * W;
      const R binit = bp ? bp[o] : R(0);
      for (std::size_t i = 0; i < H * W; ++i) yplane[i] = binit;
      for (std::size_t c = 0; c < C; ++c) {
        const R* xplane = xp + (n * C + c) * H * W;
        const R* k = wp + (o * C + c) * 9;
        for (std::size_t ky = 0; ky < 3; ++ky)
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const R kv = k[ky * 3 + kx];
            if (kv == R(0)) continue;
            const long dy = static_cast<long>(ky) - 1, dx = static_cast<long>(kx) - 1;
            const std::size_t y0 = dy < 0 ? static_cast<std::size_t>(-dy) : 0;
            const std::size_t y1 = dy > 0 ? H - static_cast<std::size_t>(dy) : H;
            const std::size_t x0 = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
            const std::size_t x1 = dx > 0 ? W - static_cast<std::size_t>(dx) : W;
            for (std::size_t yy = y0; yy < y1; ++yy) {
              const R* xrow = xplane + (yy + dy) * W + dx;
              R* yrow = yplane + yy * W;
              for (std::size_t xx = x0; xx < x1; ++xx) yrow[xx] += kv * xrow[xx];
            }
          }
      }
    }
  auto y = Tensor<R>::create({N, O, H, W}, std::move(out));
  Tensor<R>* yr = y.get();
  auto backward_fn = [x, w, b, yr, N, C, H, W, O]() {
    const R* g = yr->grad_view().data();
    if (b && b->requires_grad()) {
      auto& gb = b->grad();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o) {
          const R* gplane = g + (n * O + o) * H * W;
          R acc = R(0);
          for (std::size_t i = 0; i < H * W; ++i) acc += gplane[i];
          gb[o] += acc;
        }
    }
    if (w->requires_grad()) {
      auto& gw = w->grad();
      const R* xp = x->raw();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o) {
          const R* gplane = g + (n * O + o) * H * W;
          for (std::size_t c = 0; c < C; ++c) {
            const R* xplane = xp + (n * C + c) * H * W;
            R* k = gw.data() + (o * C + c) * 9;
            for (std::size_t ky = 0; ky < 3; ++ky)
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const long dy = static_cast<long>(ky) - 1, dx = static_cast<long>(kx) - 1;
                const std::size_t y0 = dy < 0 ? static_cast<std::size_t>(-dy) : 0;
                const std::size_t y1 = dy > 0 ? H - static_cast<std::size_t>(dy) : H;
                const std::size_t x0 = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
                const std::size_t x1 = dx > 0 ? W - static_cast<std::size_t>(dx) : W;
                R acc = R(0);
                for (std::size_t yy = y0; yy < y1; ++yy) {
                  const R* xrow = xplane + (yy + dy) * W + dx;
                  const R* grow = gplane + yy * W;
                  for (std::size_t xx = x0; xx < x1; ++xx) acc += grow[xx] * xrow[xx];
                }
                k[ky * 3 + kx] += acc;
              }
          }
        }
    }
    if (x->requires_grad()) {
      auto& gx = x->grad();
      const R* wp = w->raw();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o) {
          const R* gplane = g + (n * O + o) * H * W;
          for (std::size_t c = 0; c < C; ++c) {
            R* xgplane = gx.data() + (n * C + c) * H * W;
            const R* k = wp + (o * C + c) * 9;
            for (std::size_t ky = 0; ky < 3; ++ky)
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const R kv = k[ky * 3 + kx];
                if (kv == R(0)) continue;
                const long dy = static_cast<long>(ky) - 1, dx = static_cast<long>(kx) - 1;
                const std::size_t y0 = dy < 0 ? static_cast<std::size_t>(-dy) : 0;
                const std::size_t y1 = dy > 0 ? H - static_cast<std::size_t>(dy) : H;
                const std::size_t x0 = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
                const std::size_t x1 = dx > 0 ? W - static_cast<std::size_t>(dx) : W;
                for (std::size_t yy = y0; yy < y1; ++yy) {
                  R* xgrow = xgplane + (yy + dy) * W + dx;
                  const R* grow = gplane + yy * W;
                  for (std::size_t xx = x0; xx < x1; ++xx) xgrow[xx] += kv * grow[xx];
                }
              }
          }
        }
    }
  };
  if (b)
    detail::wire(y, backward_fn, x, w, b);
  else
    detail::wire(y, backward_fn, x, w);
  return y;
}

template <class R>
TensorPtr<R> conv2d3x3(const TensorPtr<R>& x, const TensorPtr<R>& w) {
  return conv2d3x3(x, w, TensorPtr<R>{});
}

/// 2x2 average pooling, stride 2. Requires even spatial dims.
template <class R>
TensorPtr<R> avg_pool2x2(const TensorPtr<R>& x) {
  if (x->rank() != 4 || x->dim(2) % 2 != 0 || x->dim(3) % 2 != 0)
    throw std::invalid_argument("avg_pool2x2: requires [N,C,H,W] with even H,W, got " +
                                shape_str(x->shape()));
  const std::size_t N = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
  const std::size_t Ho = H / 2, Wo = W / 2;
  std::vector<R> out(N * C * Ho * Wo);
  const R* xp = x->raw();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const R* xplane = xp + nc * H * W;
    R* yplane = out.data() + nc * Ho * Wo;
    for (std::size_t yy = 0; yy < Ho; ++yy)
      for (std::size_t xx = 0; xx < Wo; ++xx) {
        const R* p = xplane + 2 * yy * W + 2 * xx;
        yplane[yy * Wo + xx] = (p[0] + p[1] + p[W] + p[W + 1]) * R(0.25);
      }
  }
  auto y = Tensor<R>::create({N, C, Ho, Wo}, std::move(out));
  Tensor<R>* yr = y.get();
  detail::wire(y, [x, yr, N, C, H, W, Ho, Wo]() {
    const R* g = yr->grad_view().data();
    auto& gx = x->grad();
    for (std::size_t nc = 0; nc < N * C; ++nc) {
      R* xgplane = gx.data() + nc * H * W;
      const R* gplane = g + nc * Ho * Wo;
      for (std::size_t yy = 0; yy < Ho; ++yy)
        for (std::size_t xx = 0; xx < Wo; ++xx) {
          const R gv = gplane[yy * Wo + xx] * R(0.25);
          R* p = xgplane + 2 * yy * W + 2 * xx;
          p[0] += gv;
          p[1] += gv;
          p[W] += gv;
          p[W + 1] += gv;
        }
    }
  }, x);
  return y;
}

/// Averages groups of `group` consecutive channels: [N,C,H,W] -> [N,C/group,H,W].
template <class R>
TensorPtr<R> depth_group_mean(const TensorPtr<R>& x, std::size_t group) {
  if (x->rank() != 4 || group == 0 || x->dim(1) % group != 0)
    throw std::invalid_argument("depth_group_mean: channels " + shape_str(x->shape()) +
                                " not divisible by group " + std::to_string(group));
  const std::size_t N = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
  const std::size_t Co = C / group, plane = H * W;
  std::vector<R> out(N * Co * plane, R(0));
  const R inv = R(1) / static_cast<R>(group);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t co = 0; co < Co; ++co) {
      R* yplane = out.data() + (n * Co + co) * plane;
      for (std::size_t k = 0; k < group; ++k) {
        const R* xplane = x->raw() + (n * C + co * group + k) * plane;
        for (std::size_t i = 0; i < plane; ++i) yplane[i] += xplane[i];
      }
      for (std::size_t i = 0; i < plane; ++i) yplane[i] *= inv;
    }
  auto y = Tensor<R>::create({N, Co, H, W}, std::move(out));
  Tensor<R>* yr = y.get();
  detail::wire(y, [x, yr, N, C, Co, plane, group, inv]() {
    const R* g = yr->grad_view().data();
    auto& gx = x->grad();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t co = 0; co < Co; ++co) {
        const R* gplane = g + (n * Co + co) * plane;
        for (std::size_t k = 0; k < group; ++k) {
          R* xgplane = gx.data() + (n * C + co * group + k) * plane;
          for (std::size_t i = 0; i < plane; ++i) xgplane[i] += gplane[i] * inv;
        }
      }
  }, x);
  return y;
}

// ---------------------------------------------------------------------------
// shape manipulation
// ---------------------------------------------------------------------------

template <class R>
TensorPtr<R> reshape(const TensorPtr<R>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x->numel())
    throw std::invalid_argument("reshape: cannot view " + shape_str(x->shape()) + " as " +
                                shape_str(new_shape));
  auto y = Tensor<R>::create(std::move(new_shape), x->data());
  Tensor<R>* yr = y.get();
  detail::wire(y, [x, yr]() {
    const auto& g = yr->grad_view();
    auto& gx = x->grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  }, x);
  return y;
}

/// [N, Da] ++ [N, Db] -> [N, Da+Db]
template <class R>
TensorPtr<R> concat_cols(const TensorPtr<R>& a, const TensorPtr<R>& b) {
  if (a->rank() != 2 || b->rank() != 2 || a->dim(0) != b->dim(0))
    throw std::invalid_argument("concat_cols: incompatible shapes " + shape_str(a->shape()) +
                                " and " + shape_str(b->shape()));
  const std::size_t N = a->dim(0), Da = a->dim(1), Db = b->dim(1);
  std::vector<R> out(N * (Da + Db));
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(a->raw() + n * Da, Da, out.data() + n * (Da + Db));
    std::copy_n(b->raw() + n * Db, Db, out.data() + n * (Da + Db) + Da);
  }
  auto y = Tensor<R>::create({N, Da + Db}, std::move(out));
  Tensor<R>* yr = y.get();
  detail::wire(y, [a, b, yr, N, Da, Db]() {
    const R* g = yr->grad_view().data();
    if (a->requires_grad()) {
      auto& ga = a->grad();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < Da; ++i) ga[n * Da + i] += g[n * (Da + Db) + i];
    }
    if (b->requires_grad()) {
      auto& gb = b->grad();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < Db; ++i) gb[n * Db + i] += g[n * (Da + Db) + Da + i];
    }
  }, a, b);
  return y;
}

/// [N,Ca,H,W] ++ [N,Cb,H,W] -> [N,Ca+Cb,H,W] (depth-wise concatenation)
template <class R>
TensorPtr<R> concat_depth(const TensorPtr<R>& a, const TensorPtr<R>& b) {
  if (a->rank() != 4 || b->rank() != 4 || a->dim(0) != b->dim(0) || a->dim(2) != b->dim(2) ||
      a->dim(3) != b->dim(3))
    throw std::invalid_argument("concat_depth: incompatible shapes " + shape_str(a->shape()) +
                                " and " + shape_str(b->shape()));
  const std::size_t N = a->dim(0), Ca = a->dim(1), Cb = b->dim(1);
  const std::size_t plane = a->dim(2) * a->dim(3);
  std::vector<R> out(N * (Ca + Cb) * plane);
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(a->raw() + n * Ca * plane, Ca * plane, out.data() + n * (Ca + Cb) * plane);
    std::copy_n(b->raw() + n * Cb * plane, Cb * plane,
                out.data() + n * (Ca + Cb) * plane + Ca * plane);
  }
  auto y = Tensor<R>::create({N, Ca + Cb, a->dim(2), a->dim(3)}, std::move(out));
  Tensor<R>* yr = y.get();
  detail::wire(y, [a, b, yr, N, Ca, Cb, plane]() {
    const R* g = yr->grad_view().data();
    if (a->requires_grad()) {
      auto& ga = a->grad();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < Ca * plane; ++i)
          ga[n * Ca * plane + i] += g[n * (Ca + Cb) * plane + i];
    }
    if (b->requires_grad()) {
      auto& gb = b->grad();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < Cb * plane; ++i)
          gb[n * Cb * plane + i] += g[n * (Ca + Cb) * plane + Ca * plane + i];
    }
  }, a, b);
  return y;
}

/// Gathers rows (first-dimension slices) by index; backward scatter-adds.
template <class R>
TensorPtr<R> index_select_rows(const TensorPtr<R>& x, std::vector<std::size_t> idx) {
  const std::size_t N = x->dim(0);
  const std::size_t stride = x->numel() / N;
  for (std::size_t i : idx)
    if (i >= N)
      throw std::invalid_argument("index_select_rows: index " + std::to_string(i) +
                                  " out of range for " + shape_str(x->shape()));
  Shape out_shape = x->shape();
  out_shape[0] = idx.size();
  std::vector<R> out(idx.size() * stride);
  for (std::size_t m = 0; m < idx.size(); ++m)
    std::copy_n(x->raw() + idx[m] * stride, stride, out.data() + m * stride);
  auto y = Tensor<R>::create(std::move(out_shape), std::move(out));
  Tensor<R>* yr = y.get();
  detail::wire(y, [x, yr, idx = std::move(idx), stride]() {
    const R* g = yr->grad_view().data();
    auto& gx = x->grad();
    for (std::size_t m = 0; m < idx.size(); ++m)
      for (std::size_t i = 0; i < stride; ++i) gx[idx[m] * stride + i] += g[m * stride + i];
  }, x);
  return y;
}

/// x[N,C] -> column c as [N]
template <class R>
TensorPtr<R> take_column(const TensorPtr<R>& x, std::size_t c) {
  if (x->rank() != 2 || c >= x->dim(1))
    throw std::invalid_argument("take_column: column " + std::to_string(c) +
                                " out of range for " + shape_str(x->shape()));
  const std::size_t N = x->dim(0), C = x->dim(1);
  std::vector<R> out(N);
  for (std::size_t n = 0; n < N; ++n) out[n] = x->data()[n * C + c];
  auto y = Tensor<R>::create({N}, std::move(out));
  Tensor<R>* yr = y.get();
  detail::wire(y, [x, yr, N, C, c]() {
    const auto& g = yr->grad_view();
    auto& gx = x->grad();
    for (std::size_t n = 0; n < N; ++n) gx[n * C + c] += g[n];
  }, x);
  return y;
}

// ---------------------------------------------------------------------------
// reductions and weighted combinations
// ---------------------------------------------------------------------------

template <class R>
TensorPtr<R> sum_all(const TensorPtr<R>& x) {
  R acc = R(0);
  for (R v : x->data()) acc += v;
  auto y = Tensor<R>::scalar(acc);
  Tensor<R>* yr = y.get();
  detail::wire(y, [x, yr]() {
    const R g = yr->grad_view()[0];
    auto& gx = x->grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  }, x);
  return y;
}

template <class R>
TensorPtr<R> mean_all(const TensorPtr<R>& x) {
  R acc = R(0);
  for (R v : x->data()) acc += v;
  const R inv = R(1) / static_cast<R>(x->numel());
  auto y = Tensor<R>::scalar(acc * inv);
  Tensor<R>* yr = y.get();
  detail::wire(y, [x, yr, inv]() {
    const R g = yr->grad_view()[0] * inv;
    auto& gx = x->grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  }, x);
  return y;
}

/// weights[N,J] against rows t[N,J,D]: out[n,d] = sum_j weights[n,j] * t[n,j,d]
template <class R>
TensorPtr<R> rows_weighted_sum(const TensorPtr<R>& weights, const TensorPtr<R>& t) {
  if (weights->rank() != 2 || t->rank() != 3 || weights->dim(0) != t->dim(0) ||
      weights->dim(1) != t->dim(1))
    throw std::invalid_argument("rows_weighted_sum: incompatible shapes " +
                                shape_str(weights->shape()) + " and " + shape_str(t->shape()));
  const std::size_t N = t->dim(0), J = t->dim(1), D = t->dim(2);
  std::vector<R> out(N * D, R(0));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t j = 0; j < J; ++j) {
      const R a = weights->data()[n * J + j];
      const R* trow = t->raw() + (n * J + j) * D;
      R* yrow = out.data() + n * D;
      for (std::size_t d = 0; d < D; ++d) yrow[d] += a * trow[d];
    }
  auto y = Tensor<R>::create({N, D}, std::move(out));
  Tensor<R>* yr = y.get();
  detail::wire(y, [weights, t, yr, N, J, D]() {
    const R* g = yr->grad_view().data();
    if (weights->requires_grad()) {
      auto& gw = weights->grad();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t j = 0; j < J; ++j) {
          const R* trow = t->raw() + (n * J + j) * D;
          const R* grow = g + n * D;
          R acc = R(0);
          for (std::size_t d = 0; d < D; ++d) acc += grow[d] * trow[d];
          gw[n * J + j] += acc;
        }
    }
    if (t->requires_grad()) {
      auto& gt = t->grad();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t j = 0; j < J; ++j) {
          const R a = weights->data()[n * J + j];
          R* gtrow = gt.data() + (n * J + j) * D;
          const R* grow = g + n * D;
          for (std::size_t d = 0; d < D; ++d) gtrow[d] += a * grow[d];
        }
    }
  }, weights, t);
  return y;
}

/// t[N,J,D] -> [N,D], arithmetic mean over the middle axis
template <class R>
TensorPtr<R> mean_rows(const TensorPtr<R>& t) {
  if (t->rank() != 3)
    throw std::invalid_argument("mean_rows: expected rank-3 tensor, got " +
                                shape_str(t->shape()));
  const std::size_t N = t->dim(0), J = t->dim(1), D = t->dim(2);
  const R inv = R(1) / static_cast<R>(J);
  std::vector<R> out(N * D, R(0));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t j = 0; j < J; ++j) {
      const R* trow = t->raw() + (n * J + j) * D;
      R* yrow = out.data() + n * D;
      for (std::size_t d = 0; d < D; ++d) yrow[d] += trow[d];
    }
  for (R& v : out) v *= inv;
  auto y = Tensor<R>::create({N, D}, std::move(out));
  Tensor<R>* yr = y.get();
  detail::wire(y, [t, yr, N, J, D, inv]() {
    const R* g = yr->grad_view().data();
    auto& gt = t->grad();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t j = 0; j < J; ++j) {
        R* gtrow = gt.data() + (n * J + j) * D;
        const R* grow = g + n * D;
        for (std::size_t d = 0; d < D; ++d) gtrow[d] += grow[d] * inv;
      }
  }, t);
  return y;
}

// ---------------------------------------------------------------------------
// softmax and cross-entropy
// ---------------------------------------------------------------------------

/// Softmax along the last axis, overflow-safe via max subtraction.
template <class R>
TensorPtr<R> softmax_lastdim(const TensorPtr<R>& x) {
  const std::size_t C = x->shape().back();
  const std::size_t N = x->numel() / C;
  std::vector<R> out(x->numel());
  for (std::size_t n = 0; n < N; ++n) {
    const R* row = x->raw() + n * C;
    R* yrow = out.data() + n * C;
    R m = row[0];
    for (std::size_t c = 1; c < C; ++c) m = std::max(m, row[c]);
    R z = R(0);
    for (std::size_t c = 0; c < C; ++c) {
      yrow[c] = std::exp(row[c] - m);
      z += yrow[c];
    }
    const R inv = R(1) / z;
    for (std::size_t c = 0; c < C; ++c) yrow[c] *= inv;
  }
  auto y = Tensor<R>::create(x->shape(), std::move(out));
  Tensor<R>* yr = y.get();
  detail::wire(y, [x, yr, N, C]() {
    const R* g = yr->grad_view().data();
    auto& gx = x->grad();
    for (std::size_t n = 0; n < N; ++n) {
      const R* yrow = yr->raw() + n * C;
      const R* grow = g + n * C;
      R dot = R(0);
      for (std::size_t c = 0; c < C; ++c) dot += grow[c] * yrow[c];
      for (std::size_t c = 0; c < C; ++c) gx[n * C + c] += yrow[c] * (grow[c] - dot);
    }
  }, x);
  return y;
}

/// Softmax along an arbitrary axis.
template <class R>
TensorPtr<R> softmax_axis(const TensorPtr<R>& x, std::size_t axis) {
  if (axis >= x->rank())
    throw std::invalid_argument("softmax_axis: axis " + std::to_string(axis) +
                                " out of range for " + shape_str(x->shape()));
  if (axis == x->rank() - 1) return softmax_lastdim(x);
  const std::size_t C = x->dim(axis);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x->dim(i);
  for (std::size_t i = axis + 1; i < x->rank(); ++i) inner *= x->dim(i);
  std::vector<R> out(x->numel());
  auto at = [C, inner](std::size_t o, std::size_t c, std::size_t i) {
    return (o * C + c) * inner + i;
  };
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      R m = x->data()[at(o, 0, i)];
      for (std::size_t c = 1; c < C; ++c) m = std::max(m, x->data()[at(o, c, i)]);
      R z = R(0);
      for (std::size_t c = 0; c < C; ++c) {
        out[at(o, c, i)] = std::exp(x->data()[at(o, c, i)] - m);
        z += out[at(o, c, i)];
      }
      for (std::size_t c = 0; c < C; ++c) out[at(o, c, i)] /= z;
    }
  auto y = Tensor<R>::create(x->shape(), std::move(out));
  Tensor<R>* yr = y.get();
  detail::wire(y, [x, yr, outer, C, inner, at]() {
    const R* g = yr->grad_view().data();
    auto& gx = x->grad();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        R dot = R(0);
        for (std::size_t c = 0; c < C; ++c) dot += g[at(o, c, i)] * yr->data()[at(o, c, i)];
        for (std::size_t c = 0; c < C; ++c)
          gx[at(o, c, i)] += yr->data()[at(o, c, i)] * (g[at(o, c, i)] - dot);
      }
  }, x);
  return y;
}

/// Mean softmax cross-entropy over rows: logits[N,C] against one-hot [N,C].
/// Numerically fused: L_n = logsumexp(z_n) - sum_c y_c z_c.
template <class R>
TensorPtr<R> softmax_cross_entropy_mean(const TensorPtr<R>& logits, const TensorPtr<R>& onehot) {
  detail::check_same_shape("softmax_cross_entropy_mean", logits, onehot);
  if (logits->rank() != 2)
    throw std::invalid_argument("softmax_cross_entropy_mean: expected [N,C], got " +
                                shape_str(logits->shape()));
  const std::size_t N = logits->dim(0), C = logits->dim(1);
  R total = R(0);
  for (std::size_t n = 0; n < N; ++n) {
    const R* z = logits->raw() + n * C;
    const R* y = onehot->raw() + n * C;
    R m = z[0];
    for (std::size_t c = 1; c < C; ++c) m = std::max(m, z[c]);
    R sum = R(0);
    for (std::size_t c = 0; c < C; ++c) sum += std::exp(z[c] - m);
    const R lse = m + std::log(sum);
    R dot = R(0);
    for (std::size_t c = 0; c < C; ++c) dot += y[c] * z[c];
    total += lse - dot;
  }
  const R invN = R(1) / static_cast<R>(N);
  auto out = Tensor<R>::scalar(total * invN);
  Tensor<R>* outr = out.get();
  detail::wire(out, [logits, onehot, outr, N, C, invN]() {
    const R g = outr->grad_view()[0] * invN;
    auto& gz = logits->grad();
    for (std::size_t n = 0; n < N; ++n) {
      const R* z = logits->raw() + n * C;
      const R* y = onehot->raw() + n * C;
      R m = z[0];
      for (std::size_t c = 1; c < C; ++c) m = std::max(m, z[c]);
      R sum = R(0);
      for (std::size_t c = 0; c < C; ++c) sum += std::exp(z[c] - m);
      for (std::size_t c = 0; c < C; ++c)
        gz[n * C + c] += g * (std::exp(z[c] - m) / sum - y[c]);
    }
  }, logits);
  return out;
}

}  // namespace ffcsn
