#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "ffcsn/ops.hpp"
#include "ffcsn/rng.hpp"
#include "ffcsn/tensor.hpp"

namespace ffcsn {

/// Named trainable tensor plus its SGD momentum buffer.
template <class R>
struct Parameter {
  std::string name;
  TensorPtr<R> value;
  std::vector<R> momentum;

  Parameter(std::string n, TensorPtr<R> v)
      : name(std::move(n)), value(std::move(v)), momentum(value->numel(), R(0)) {
    value->set_requires_grad(true);
  }
};

enum class InitScheme {
  kGaussian001,  // zero-mean Gaussian, std 0.01, zero biases
  kFanIn,        // zero-mean Gaussian, std sqrt(2/fan_in), zero biases
};

template <class R>
inline void init_gaussian(TensorPtr<R>& t, Rng& rng, double std_dev) {
  for (R& v : t->data()) v = static_cast<R>(rng.gaussian() * std_dev);
}

enum class LayerKind {
  kFullyConnected,
  kConv2d3x3,
  kBatchNorm,
  kRelu,
  kElu,
  kSigmoid,
  kSoftmax,
  kAveragePool,
  kDepthDownsample,
  kReshapePool,
};

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::kFullyConnected: return "fully-connected";
    case LayerKind::kConv2d3x3: return "conv2d-3x3";
    case LayerKind::kBatchNorm: return "batch-norm";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kElu: return "elu";
    case LayerKind::kSigmoid: return "sigmoid";
    case LayerKind::kSoftmax: return "softmax";
    case LayerKind::kAveragePool: return "average-pool";
    case LayerKind::kDepthDownsample: return "depth-downsample";
    case LayerKind::kReshapePool: return "reshape-pool";
  }
  return "?";
}

/// Declarative layer description; dims are kind-specific.
struct LayerSpec {
  LayerKind kind;
  std::size_t in = 0;     // fc input dim / conv input channels
  std::size_t out = 0;    // fc output dim / conv output channels
  std::size_t features = 0;  // batch-norm feature count
  std::size_t group = 0;  // depth-downsample group size
  std::size_t rows = 0;   // reshape-pool row count
  double alpha = 1.0;     // elu
  bool conv_bias = true;  // convolutions feeding batch-norm drop the bias

  static LayerSpec fc(std::size_t in, std::size_t out) {
    return {LayerKind::kFullyConnected, in, out, 0, 0, 0, 1.0};
  }
  static LayerSpec conv3x3(std::size_t in_ch, std::size_t out_ch, bool bias = true) {
    LayerSpec s{LayerKind::kConv2d3x3, in_ch, out_ch, 0, 0, 0, 1.0};
    s.conv_bias = bias;
    return s;
  }
  static LayerSpec batch_norm(std::size_t features) {
    return {LayerKind::kBatchNorm, 0, 0, features, 0, 0, 1.0};
  }
  static LayerSpec relu() { return {LayerKind::kRelu, 0, 0, 0, 0, 0, 1.0}; }
  static LayerSpec elu(double alpha = 1.0) { return {LayerKind::kElu, 0, 0, 0, 0, 0, alpha}; }
  static LayerSpec sigmoid() { return {LayerKind::kSigmoid, 0, 0, 0, 0, 0, 1.0}; }
  static LayerSpec softmax() { return {LayerKind::kSoftmax, 0, 0, 0, 0, 0, 1.0}; }
  static LayerSpec avg_pool() { return {LayerKind::kAveragePool, 0, 0, 0, 0, 0, 1.0}; }
  static LayerSpec depth_downsample(std::size_t group) {
    return {LayerKind::kDepthDownsample, 0, 0, 0, group, 0, 1.0};
  }
  static LayerSpec reshape_pool(std::size_t rows) {
    return {LayerKind::kReshapePool, 0, 0, 0, 0, rows, 1.0};
  }
};

namespace detail {
[[noreturn]] inline void layer_shape_error(const std::string& layer, const std::string& expected,
                                           const Shape& got) {
  throw std::invalid_argument(layer + ": expected input " + expected + ", got " +
                              shape_str(got));
}
}  // namespace detail

// ---------------------------------------------------------------------------
// concrete layers
// ---------------------------------------------------------------------------

template <class R>
class Linear {
 public:
  Linear(std::string name, std::size_t in, std::size_t out, Rng& rng, InitScheme scheme)
      : name_(std::move(name)), in_(in), out_(out),
        weight_(name_ + ".weight", Tensor<R>::zeros({in, out})),
        bias_(name_ + ".bias", Tensor<R>::zeros({out})) {
    const double std_dev =
        scheme == InitScheme::kFanIn ? std::sqrt(2.0 / static_cast<double>(in)) : 0.01;
    init_gaussian(weight_.value, rng, std_dev);
  }

  TensorPtr<R> forward(const TensorPtr<R>& x) const {
    TensorPtr<R> in = x;
    if (in->rank() != 2) in = reshape(in, {in->dim(0), in->numel() / in->dim(0)});
    if (in->dim(1) != in_)
      detail::layer_shape_error(name_ + " (fully-connected)",
                                "[N," + std::to_string(in_) + "]", x->shape());
    return add_rowvec(matmul(in, weight_.value), bias_.value);
  }

  void collect(std::vector<Parameter<R>*>& out) { out.push_back(&weight_); out.push_back(&bias_); }

  Parameter<R>& weight() { return weight_; }
  Parameter<R>& bias() { return bias_; }

 private:
  std::string name_;
  std::size_t in_, out_;
  Parameter<R> weight_, bias_;
};

template <class R>
class Conv3x3 {
 public:
  Conv3x3(std::string name, std::size_t in_ch, std::size_t out_ch, Rng& rng, InitScheme scheme,
          bool with_bias = true)
      : name_(std::move(name)), in_ch_(in_ch),
        weight_(name_ + ".weight", Tensor<R>::zeros({out_ch, in_ch, 3, 3})) {
    const double fan_in = static_cast<double>(in_ch) * 9.0;
    const double std_dev = scheme == InitScheme::kFanIn ? std::sqrt(2.0 / fan_in) : 0.01;
    init_gaussian(weight_.value, rng, std_dev);
    if (with_bias)
      bias_ = std::make_unique<Parameter<R>>(name_ + ".bias", Tensor<R>::zeros({out_ch}));
  }

  TensorPtr<R> forward(const TensorPtr<R>& x) const {
    if (x->rank() != 4 || x->dim(1) != in_ch_)
      detail::layer_shape_error(name_ + " (conv2d-3x3)",
                                "[N," + std::to_string(in_ch_) + ",H,W]", x->shape());
    return conv2d3x3(x, weight_.value, bias_ ? bias_->value : TensorPtr<R>{});
  }

  void collect(std::vector<Parameter<R>*>& out) {
    out.push_back(&weight_);
    if (bias_) out.push_back(bias_.get());
  }

 private:
  std::string name_;
  std::size_t in_ch_;
  Parameter<R> weight_;
  std::unique_ptr<Parameter<R>> bias_;
};

/// Batch normalization over the batch axis ([N,D]) or batch+spatial axes
/// ([N,C,H,W]). Training mode normalizes with batch statistics and updates
/// running estimates; eval mode applies the running estimates.
template <class R>
class BatchNorm {
 public:
  BatchNorm(std::string name, std::size_t features, double eps = 1e-5, double momentum = 0.1)
      : name_(std::move(name)), features_(features), eps_(static_cast<R>(eps)),
        momentum_(static_cast<R>(momentum)),
        gamma_(name_ + ".gamma", Tensor<R>::full({features}, R(1))),
        beta_(name_ + ".beta", Tensor<R>::zeros({features})),
        running_mean_(features, R(0)), running_var_(features, R(1)) {}

  TensorPtr<R> forward(const TensorPtr<R>& x, bool training) {
    std::size_t C, inner;
    if (x->rank() == 2 && x->dim(1) == features_) {
      C = features_;
      inner = 1;
    } else if (x->rank() == 4 && x->dim(1) == features_) {
      C = features_;
      inner = x->dim(2) * x->dim(3);
    } else {
      detail::layer_shape_error(name_ + " (batch-norm)",
                                "[N," + std::to_string(features_) + ",...]", x->shape());
    }
    const std::size_t N = x->dim(0);
    const std::size_t M = N * inner;  // elements per channel

    auto mean = std::make_shared<std::vector<R>>(C, R(0));
    auto var = std::make_shared<std::vector<R>>(C, R(0));
    if (training) {
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
          const R* p = x->raw() + (n * C + c) * inner;
          R acc = R(0);
          for (std::size_t i = 0; i < inner; ++i) acc += p[i];
          (*mean)[c] += acc;
        }
      for (std::size_t c = 0; c < C; ++c) (*mean)[c] /= static_cast<R>(M);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
          const R* p = x->raw() + (n * C + c) * inner;
          const R mc = (*mean)[c];
          R acc = R(0);
          for (std::size_t i = 0; i < inner; ++i) {
            const R d = p[i] - mc;
            acc += d * d;
          }
          (*var)[c] += acc;
        }
      for (std::size_t c = 0; c < C; ++c) (*var)[c] /= static_cast<R>(M);
      for (std::size_t c = 0; c < C; ++c) {
        running_mean_[c] = (R(1) - momentum_) * running_mean_[c] + momentum_ * (*mean)[c];
        running_var_[c] = (R(1) - momentum_) * running_var_[c] + momentum_ * (*var)[c];
      }
    } else {
      *mean = running_mean_;
      *var = running_var_;
    }

    std::vector<R> out(x->numel());
    const R* gp = gamma_.value->raw();
    const R* bp = beta_.value->raw();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        const R inv_std = R(1) / std::sqrt((*var)[c] + eps_);
        const R mc = (*mean)[c];
        const R* p = x->raw() + (n * C + c) * inner;
        R* q = out.data() + (n * C + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) q[i] = gp[c] * (p[i] - mc) * inv_std + bp[c];
      }
    auto y = Tensor<R>::create(x->shape(), std::move(out));
    Tensor<R>* yr = y.get();
    auto gamma = gamma_.value;
    auto beta = beta_.value;
    const R eps = eps_;
    ops_detail_wire(y, x, gamma, beta,
                    [x, gamma, beta, yr, mean, var, training, N, C, inner, M, eps]() {
      const R* g = yr->grad_view().data();
      const R* gp = gamma->raw();
      // per-channel reductions of g and g*xhat
      std::vector<R> sum_g(C, R(0)), sum_gx(C, R(0));
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
          const R inv_std = R(1) / std::sqrt((*var)[c] + eps);
          const R mc = (*mean)[c];
          const R* xp = x->raw() + (n * C + c) * inner;
          const R* grow = g + (n * C + c) * inner;
          R a = R(0), bacc = R(0);
          for (std::size_t i = 0; i < inner; ++i) {
            a += grow[i];
            bacc += grow[i] * (xp[i] - mc) * inv_std;
          }
          sum_g[c] += a;
          sum_gx[c] += bacc;
        }
      if (beta->requires_grad()) {
        auto& gb = beta->grad();
        for (std::size_t c = 0; c < C; ++c) gb[c] += sum_g[c];
      }
      if (gamma->requires_grad()) {
        auto& gg = gamma->grad();
        for (std::size_t c = 0; c < C; ++c) gg[c] += sum_gx[c];
      }
      if (x->requires_grad()) {
        auto& gx = x->grad();
        const R invM = R(1) / static_cast<R>(M);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c) {
            const R inv_std = R(1) / std::sqrt((*var)[c] + eps);
            const R mc = (*mean)[c];
            const R* xp = x->raw() + (n * C + c) * inner;
            const R* grow = g + (n * C + c) * inner;
            R* gxrow = gx.data() + (n * C + c) * inner;
            if (training) {
              for (std::size_t i = 0; i < inner; ++i) {
                const R xhat = (xp[i] - mc) * inv_std;
                gxrow[i] += gp[c] * inv_std *
                            (grow[i] - sum_g[c] * invM - xhat * sum_gx[c] * invM);
              }
            } else {
              for (std::size_t i = 0; i < inner; ++i) gxrow[i] += gp[c] * inv_std * grow[i];
            }
          }
      }
    });
    return y;
  }

  void collect(std::vector<Parameter<R>*>& out) { out.push_back(&gamma_); out.push_back(&beta_); }

  std::vector<R>& running_mean() { return running_mean_; }
  std::vector<R>& running_var() { return running_var_; }

 private:
  // manual wiring because the closure must see the saved batch statistics
  static void ops_detail_wire(TensorPtr<R>& y, const TensorPtr<R>& x, const TensorPtr<R>& gamma,
                              const TensorPtr<R>& beta, std::function<void()> fn) {
    if (!grad_enabled()) return;
    if (!x->requires_grad() && !gamma->requires_grad() && !beta->requires_grad()) return;
    y->set_edges({x, gamma, beta}, std::move(fn));
  }

  std::string name_;
  std::size_t features_;
  R eps_, momentum_;
  Parameter<R> gamma_, beta_;
  std::vector<R> running_mean_, running_var_;
};

// ---------------------------------------------------------------------------
// LayerSpec-driven sequential graph
// ---------------------------------------------------------------------------

/// A small sequential network assembled from LayerSpecs. Forward validates
/// shapes layer by layer and reports the offending layer on mismatch.
template <class R>
class Sequential {
 public:
  Sequential() = default;

  Sequential(const std::vector<LayerSpec>& specs, const std::string& prefix, Rng& rng,
             InitScheme scheme = InitScheme::kGaussian001) {
    std::size_t idx = 0;
    for (const auto& spec : specs) {
      const std::string name = prefix + "." + std::to_string(idx++);
      Entry e;
      e.spec = spec;
      switch (spec.kind) {
        case LayerKind::kFullyConnected:
          e.linear = std::make_unique<Linear<R>>(name, spec.in, spec.out, rng, scheme);
          break;
        case LayerKind::kConv2d3x3:
          e.conv = std::make_unique<Conv3x3<R>>(name, spec.in, spec.out, rng, scheme,
                                                spec.conv_bias);
          break;
        case LayerKind::kBatchNorm:
          e.bn = std::make_unique<BatchNorm<R>>(name, spec.features);
          break;
        default:
          break;
      }
      e.name = name;
      entries_.push_back(std::move(e));
    }
  }

  TensorPtr<R> forward(const TensorPtr<R>& x, bool training) {
    TensorPtr<R> h = x;
    for (auto& e : entries_) {
      switch (e.spec.kind) {
        case LayerKind::kFullyConnected: h = e.linear->forward(h); break;
        case LayerKind::kConv2d3x3: h = e.conv->forward(h); break;
        case LayerKind::kBatchNorm: h = e.bn->forward(h, training); break;
        case LayerKind::kRelu: h = relu(h); break;
        case LayerKind::kElu: h = elu(h, static_cast<R>(e.spec.alpha)); break;
        case LayerKind::kSigmoid: h = sigmoid(h); break;
        case LayerKind::kSoftmax: h = softmax_lastdim(h); break;
        case LayerKind::kAveragePool:
          if (h->rank() != 4)
            detail::layer_shape_error(e.name + " (average-pool)", "[N,C,H,W]", h->shape());
          h = avg_pool2x2(h);
          break;
        case LayerKind::kDepthDownsample:
          if (h->rank() != 4)
            detail::layer_shape_error(e.name + " (depth-downsample)", "[N,C,H,W]", h->shape());
          h = depth_group_mean(h, e.spec.group);
          break;
        case LayerKind::kReshapePool: {
          if (h->rank() != 2 || h->dim(0) % e.spec.rows != 0)
            detail::layer_shape_error(e.name + " (reshape-pool)",
                                      "[N*" + std::to_string(e.spec.rows) + ",D]", h->shape());
          h = reshape(h, {h->dim(0) / e.spec.rows, e.spec.rows, h->dim(1)});
          break;
        }
      }
    }
    return h;
  }

  void collect(std::vector<Parameter<R>*>& out) {
    for (auto& e : entries_) {
      if (e.linear) e.linear->collect(out);
      if (e.conv) e.conv->collect(out);
      if (e.bn) e.bn->collect(out);
    }
  }

  std::vector<Parameter<R>*> parameters() {
    std::vector<Parameter<R>*> out;
    collect(out);
    return out;
  }

  std::size_t size() const { return entries_.size(); }

  BatchNorm<R>* batch_norm_at(std::size_t i) { return entries_.at(i).bn.get(); }
  Linear<R>* linear_at(std::size_t i) { return entries_.at(i).linear.get(); }

 private:
  struct Entry {
    LayerSpec spec;
    std::string name;
    std::unique_ptr<Linear<R>> linear;
    std::unique_ptr<Conv3x3<R>> conv;
    std::unique_ptr<BatchNorm<R>> bn;
  };
  std::vector<Entry> entries_;
};

/// Applies a composed LayerSpec graph to an input (training-mode forward).
template <class R>
TensorPtr<R> forward(Sequential<R>& graph, const TensorPtr<R>& input, bool training = true) {
  return graph.forward(input, training);
}

}  // namespace ffcsn
