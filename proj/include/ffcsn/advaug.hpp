#pragma once

#include <array>
#include <vector>

#include "ffcsn/layers.hpp"
#include "ffcsn/ops.hpp"
#include "ffcsn/optim.hpp"
#include "ffcsn/rng.hpp"

// Feature-space adversarial augmentation: a generator maps Gaussian noise
// to fake bottleneck features and a discriminator learns to tell them from
// the real ones. Real features enter with gradients blocked, so the
// adversarial loss trains only G and D.

namespace ffcsn::advaug {

struct AlConfig {
  int noise_dim = 32;
  int feature_dim = 256;  // must match the classifier bottleneck
  int g_hidden = 64;
  std::array<int, 2> d_hidden = {64, 16};
  bool nonsaturating = false;

  void validate() const {
    if (noise_dim <= 0 || feature_dim <= 0 || g_hidden <= 0 || d_hidden[0] <= 0 ||
        d_hidden[1] <= 0)
      throw std::invalid_argument("al config: dimensions must be positive");
  }
};

/// G: noise -> fake feature. FC(noise_dim -> g_hidden) with ELU, then
/// FC(g_hidden -> feature_dim) with sigmoid, so outputs lie in (0,1).
template <class R>
class Generator {
 public:
  Generator(const AlConfig& cfg, Rng& rng)
      : fc1_("gan.g.fc1", cfg.noise_dim, cfg.g_hidden, rng, InitScheme::kFanIn),
        fc2_("gan.g.fc2", cfg.g_hidden, cfg.feature_dim, rng, InitScheme::kFanIn) {}

  TensorPtr<R> generate(const TensorPtr<R>& z) {
    return sigmoid(fc2_.forward(elu(fc1_.forward(z))));
  }

  void collect(std::vector<Parameter<R>*>& out) { fc1_.collect(out); fc2_.collect(out); }
  std::vector<Parameter<R>*> parameters() {
    std::vector<Parameter<R>*> out;
    collect(out);
    return out;
  }

 private:
  Linear<R> fc1_, fc2_;
};

/// D: three FC layers with ELU on the hidden layers and a sigmoid output,
/// the probability that the input is a real feature.
template <class R>
class Discriminator {
 public:
  Discriminator(const AlConfig& cfg, Rng& rng)
      : fc1_("gan.d.fc1", cfg.feature_dim, cfg.d_hidden[0], rng, InitScheme::kFanIn),
        fc2_("gan.d.fc2", cfg.d_hidden[0], cfg.d_hidden[1], rng, InitScheme::kFanIn),
        fc3_("gan.d.fc3", cfg.d_hidden[1], 1, rng, InitScheme::kFanIn) {}

  /// x: [N, feature_dim] -> probabilities [N].
  TensorPtr<R> discriminate(const TensorPtr<R>& x) {
    auto h = elu(fc1_.forward(x));
    h = elu(fc2_.forward(h));
    auto p = sigmoid(fc3_.forward(h));
    return reshape(p, {p->dim(0)});
  }

  void collect(std::vector<Parameter<R>*>& out) {
    fc1_.collect(out);
    fc2_.collect(out);
    fc3_.collect(out);
  }
  std::vector<Parameter<R>*> parameters() {
    std::vector<Parameter<R>*> out;
    collect(out);
    return out;
  }

 private:
  Linear<R> fc1_, fc2_, fc3_;
};

/// Discriminator objective (descent form of the max side):
///   d_loss = -mean[log D(x)] - mean[log(1 - D(G(z)))]
/// Probabilities are clamped to [1e-7, 1-1e-7] before the logs.
template <class R>
TensorPtr<R> d_loss(const TensorPtr<R>& real_probs, const TensorPtr<R>& fake_probs) {
  if (real_probs->numel() == 0 || fake_probs->numel() == 0)
    throw std::invalid_argument("d_loss: batches must be non-empty");
  auto pr = clamp(real_probs, R(1e-7), R(1) - R(1e-7));
  auto pf = clamp(fake_probs, R(1e-7), R(1) - R(1e-7));
  return neg(add(mean_all(log_t(pr)), mean_all(log_t(sub_from_scalar(pf, R(1))))));
}

/// Generator objective: descends mean[log(1 - D(G(z)))] exactly as the
/// min-max formulation states; the non-saturating variant -mean[log D(G(z))]
/// is available behind a flag.
template <class R>
TensorPtr<R> g_loss(const TensorPtr<R>& fake_probs, bool nonsaturating = false) {
  if (fake_probs->numel() == 0)
    throw std::invalid_argument("g_loss: batch must be non-empty");
  auto pf = clamp(fake_probs, R(1e-7), R(1) - R(1e-7));
  if (nonsaturating) return neg(mean_all(log_t(pf)));
  return mean_all(log_t(sub_from_scalar(pf, R(1))));
}

/// Both adversarial losses for a (real, fake) probability pair.
template <class R>
std::pair<TensorPtr<R>, TensorPtr<R>> loss_al(const TensorPtr<R>& real_probs,
                                              const TensorPtr<R>& fake_probs,
                                              bool nonsaturating = false) {
  return {d_loss(real_probs, fake_probs), g_loss(fake_probs, nonsaturating)};
}

template <class R>
struct AdversarialStepResult {
  R d_loss_value = R(0);
  R g_loss_value = R(0);
};

/// Generator/discriminator pair with the alternating update schedule.
template <class R>
class AdversarialModule {
 public:
  AdversarialModule(const AlConfig& cfg, Rng& rng) : cfg_(cfg), g_(cfg, rng), d_(cfg, rng) {
    cfg_.validate();
  }

  Generator<R>& generator() { return g_; }
  Discriminator<R>& discriminator() { return d_; }
  const AlConfig& config() const { return cfg_; }

  TensorPtr<R> sample_noise(std::size_t n, Rng& rng) const {
    std::vector<R> z(n * cfg_.noise_dim);
    for (auto& v : z) v = static_cast<R>(rng.gaussian());
    return Tensor<R>::create({n, static_cast<std::size_t>(cfg_.noise_dim)}, std::move(z));
  }

  /// One discriminator update on (real, fake), then one generator update on
  /// fresh noise. `real_features` must already be detached from the encoder;
  /// only G and D parameters change.
  AdversarialStepResult<R> adversarial_step(const TensorPtr<R>& real_features, Rng& rng, R lr,
                                            R momentum, R weight_decay) {
    if (real_features->requires_grad())
      throw std::invalid_argument("adversarial_step: real features must be detached");
    const std::size_t n = real_features->dim(0);
    auto d_params = d_.parameters();
    auto g_params = g_.parameters();
    AdversarialStepResult<R> out;

    {  // discriminator update; fake batch detached so G stays fixed
      auto fake = g_.generate(sample_noise(n, rng))->detach();
      auto loss = d_loss(d_.discriminate(real_features), d_.discriminate(fake));
      out.d_loss_value = loss->item();
      zero_grads(d_params);
      backward(loss);
      sgd_step(d_params, lr, momentum, weight_decay);
    }

    {  // generator update through the updated discriminator
      auto fake = g_.generate(sample_noise(n, rng));
      auto loss = g_loss(d_.discriminate(fake), cfg_.nonsaturating);
      out.g_loss_value = loss->item();
      zero_grads(g_params);
      zero_grads(d_params);
      backward(loss);
      sgd_step(g_params, lr, momentum, weight_decay);
      zero_grads(d_params);  // discard D gradients from the generator pass
    }
    return out;
  }

  std::vector<Parameter<R>*> parameters() {
    std::vector<Parameter<R>*> out;
    g_.collect(out);
    d_.collect(out);
    return out;
  }

 private:
  AlConfig cfg_;
  Generator<R> g_;
  Discriminator<R> d_;
};

}  // namespace ffcsn::advaug
