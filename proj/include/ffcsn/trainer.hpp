#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ffcsn/advaug.hpp"
#include "ffcsn/container.hpp"
#include "ffcsn/gradcheck.hpp"
#include "ffcsn/metalearn.hpp"
#include "ffcsn/model.hpp"
#include "ffcsn/optim.hpp"
#include "ffcsn/synthgen.hpp"

// End-to-end joint training: per batch the base consensus loss, the
// meta-learning pairwise loss and the adversarial step are combined per the
// configured ablation flags; one optimizer step per batch updates base and
// meta parameters jointly while G and D update inside the adversarial step.

namespace ffcsn::trainer {

using model::AblationFlags;
using model::ModelConfig;
using synthgen::AccessLoggedDataset;

struct TrainConfig {
  double beta1 = 1.0;
  double beta2 = 1.0;
  double base_lr = 0.0005;
  int lr_step = 10;
  double momentum = 0.9;
  double weight_decay = 0.01;
  int max_epochs = 100;
  int batch_size = 12;
  int k_segments = 3;
  AblationFlags flags;
  std::uint64_t seed = 0;
  int meta_pairs = 5;
  metalearn::PairwiseLoss pairwise_loss = metalearn::PairwiseLoss::kRelation;
  double pairwise_margin = 1.0;

  void validate() const {
    flags.validate();
    if (beta1 < 0 || beta2 < 0)
      throw std::invalid_argument("train config: beta weights must be non-negative");
    if (base_lr <= 0 || lr_step <= 0)
      throw std::invalid_argument("train config: base_lr and lr_step must be positive");
    if (max_epochs < 1) throw std::invalid_argument("train config: max_epochs must be >= 1");
    if (batch_size <= meta_pairs)
      throw std::invalid_argument("train config: batch_size must exceed meta task size P");
    if (k_segments < 1) throw std::invalid_argument("train config: K must be >= 1");
    if (meta_pairs < 1) throw std::invalid_argument("train config: meta task size must be >= 1");
  }
};

/// Step-decayed learning rate: base_lr * 10^-(epoch / lr_step).
inline double lr_at(const TrainConfig& cfg, int epoch) {
  if (epoch < 0) throw std::invalid_argument("lr_at: epoch must be >= 0");
  return cfg.base_lr * std::pow(10.0, -(epoch / cfg.lr_step));
}

/// Weighted sum of the enabled loss components. Disabled components must be
/// absent, not zero.
inline double total_loss(double l_base, std::optional<double> l_ml, std::optional<double> l_al,
                         double beta1, double beta2, const AblationFlags& flags) {
  if (flags.ml != l_ml.has_value())
    throw std::invalid_argument("total_loss: l_ml presence must match the ml flag");
  if (flags.al != l_al.has_value())
    throw std::invalid_argument("total_loss: l_al presence must match the al flag");
  double total = l_base;
  if (l_ml) total += beta1 * *l_ml;
  if (l_al) total += beta2 * *l_al;
  return total;
}

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  double l_base = 0;
  std::optional<double> l_ml;
  std::optional<double> l_al;
  double l_total = 0;
  double train_acc = 0;
};

inline std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct TrainHistory {
  std::vector<EpochRecord> records;

  std::string to_csv() const {
    std::string out = "epoch,lr,l_base,l_ml,l_al,l_total,train_acc\n";
    for (const auto& r : records) {
      out += std::to_string(r.epoch) + "," + format_g17(r.lr) + "," + format_g17(r.l_base) +
             "," + (r.l_ml ? format_g17(*r.l_ml) : "") + "," +
             (r.l_al ? format_g17(*r.l_al) : "") + "," + format_g17(r.l_total) + "," +
             format_g17(r.train_acc) + "\n";
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// full model bundle
// ---------------------------------------------------------------------------

template <class R>
struct FullModel {
  ModelConfig model_cfg;
  advaug::AlConfig al_cfg;
  TrainConfig train_cfg;
  std::unique_ptr<model::CrossStreamModel<R>> base;
  std::unique_ptr<metalearn::ComparisonNet<R>> meta;
  std::unique_ptr<advaug::AdversarialModule<R>> gan;

  FullModel(const ModelConfig& mcfg, const advaug::AlConfig& acfg, const TrainConfig& tcfg,
            Rng& rng)
      : model_cfg(mcfg), al_cfg(acfg), train_cfg(tcfg) {
    al_cfg.feature_dim = model_cfg.bottleneck;
    base = std::make_unique<model::CrossStreamModel<R>>(model_cfg, tcfg.flags, rng);
    if (tcfg.flags.ml && tcfg.pairwise_loss == metalearn::PairwiseLoss::kRelation)
      meta = std::make_unique<metalearn::ComparisonNet<R>>(
          2 * base->video_map_depth(), model_cfg.map_hw(),
          std::array<int, 2>{model_cfg.g_channels[0], model_cfg.g_channels[1]}, rng);
    if (tcfg.flags.al) gan = std::make_unique<advaug::AdversarialModule<R>>(al_cfg, rng);
  }

  /// Parameters updated by the joint per-batch optimizer step (G and D are
  /// stepped inside adversarial_step instead).
  std::vector<Parameter<R>*> base_meta_parameters() {
    auto out = base->parameters();
    if (meta) meta->collect(out);
    return out;
  }

  std::vector<Parameter<R>*> all_parameters() {
    auto out = base_meta_parameters();
    if (gan) gan->collect(out);
    return out;
  }
};

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

namespace detail {

inline double bits_to_f64(std::uint64_t u) {
  double d;
  std::memcpy(&d, &u, 8);
  return d;
}

inline std::uint64_t f64_to_bits(double d) {
  std::uint64_t u;
  std::memcpy(&u, &d, 8);
  return u;
}

template <class R>
void put_values(TensorContainer& c, const std::string& name, const Shape& dims,
                const std::vector<R>& values) {
  if constexpr (std::is_same_v<R, float>)
    c.put_f32(name, dims, values);
  else
    c.put_f64(name, dims, values);
}

template <class R>
std::vector<R> get_values(const TensorContainer& c, const std::string& name) {
  if constexpr (std::is_same_v<R, float>)
    return c.get_f32(name);
  else
    return c.get_f64(name);
}

inline void put_scalar(TensorContainer& c, const std::string& name, double v) {
  c.put_f64(name, {1}, {v});
}

}  // namespace detail

constexpr std::uint32_t kCheckpointVersion = 1;

/// Serializes configs, all named parameters, optimizer momentum buffers,
/// batch-norm running statistics, the rng state and the training identity
/// set into one container file.
template <class R>
void save_checkpoint(const std::string& path, FullModel<R>& m, int epoch, const Rng& rng,
                     const std::vector<int>& train_identities) {
  TensorContainer c;
  detail::put_scalar(c, "meta/checkpoint_version", kCheckpointVersion);
  detail::put_scalar(c, "meta/epoch", epoch);
  detail::put_scalar(c, "meta/dtype", std::is_same_v<R, float> ? 0 : 1);
  {
    std::vector<double> state(4);
    for (int i = 0; i < 4; ++i) state[i] = detail::bits_to_f64(rng.state()[i]);
    c.put_f64("meta/rng_state", {4}, state);
  }
  {
    std::vector<double> ids(train_identities.begin(), train_identities.end());
    if (ids.empty()) ids.push_back(-1.0);  // container entries cannot be empty
    c.put_f64("meta/train_identities", {ids.size()}, ids);
  }

  const TrainConfig& t = m.train_cfg;
  detail::put_scalar(c, "config/train.beta1", t.beta1);
  detail::put_scalar(c, "config/train.beta2", t.beta2);
  detail::put_scalar(c, "config/train.base_lr", t.base_lr);
  detail::put_scalar(c, "config/train.lr_step", t.lr_step);
  detail::put_scalar(c, "config/train.momentum", t.momentum);
  detail::put_scalar(c, "config/train.weight_decay", t.weight_decay);
  detail::put_scalar(c, "config/train.max_epochs", t.max_epochs);
  detail::put_scalar(c, "config/train.batch_size", t.batch_size);
  detail::put_scalar(c, "config/train.k_segments", t.k_segments);
  detail::put_scalar(c, "config/train.meta_pairs", t.meta_pairs);
  detail::put_scalar(c, "config/train.pairwise_loss", static_cast<int>(t.pairwise_loss));
  detail::put_scalar(c, "config/train.pairwise_margin", t.pairwise_margin);
  detail::put_scalar(c, "config/train.seed", detail::bits_to_f64(t.seed));
  detail::put_scalar(c, "config/flags.face", t.flags.face);
  detail::put_scalar(c, "config/flags.motion", t.flags.motion);
  detail::put_scalar(c, "config/flags.cl", t.flags.cl);
  detail::put_scalar(c, "config/flags.ml", t.flags.ml);
  detail::put_scalar(c, "config/flags.al", t.flags.al);

  const ModelConfig& mc = m.model_cfg;
  detail::put_scalar(c, "config/model.frame_hw", mc.frame_hw);
  detail::put_scalar(c, "config/model.face_channels", mc.face_channels);
  detail::put_scalar(c, "config/model.flow_channels", mc.flow_channels);
  for (int i = 0; i < 3; ++i) {
    detail::put_scalar(c, "config/model.s_ch" + std::to_string(i), mc.spatial_channels[i]);
    detail::put_scalar(c, "config/model.t_ch" + std::to_string(i), mc.temporal_channels[i]);
  }
  detail::put_scalar(c, "config/model.d_s", mc.d_s);
  detail::put_scalar(c, "config/model.d_t", mc.d_t);
  detail::put_scalar(c, "config/model.corr_hidden", mc.corr_hidden);
  detail::put_scalar(c, "config/model.bottleneck", mc.bottleneck);
  detail::put_scalar(c, "config/model.n_classes", mc.n_classes);
  detail::put_scalar(c, "config/model.g_ch0", mc.g_channels[0]);
  detail::put_scalar(c, "config/model.g_ch1", mc.g_channels[1]);

  const advaug::AlConfig& a = m.al_cfg;
  detail::put_scalar(c, "config/al.noise_dim", a.noise_dim);
  detail::put_scalar(c, "config/al.g_hidden", a.g_hidden);
  detail::put_scalar(c, "config/al.d_hidden0", a.d_hidden[0]);
  detail::put_scalar(c, "config/al.d_hidden1", a.d_hidden[1]);
  detail::put_scalar(c, "config/al.nonsaturating", a.nonsaturating);

  for (Parameter<R>* p : m.all_parameters()) {
    detail::put_values(c, "param/" + p->name, p->value->shape(), p->value->data());
    detail::put_values(c, "momentum/" + p->name, p->value->shape(), p->momentum);
  }
  auto bns = m.base->batch_norms();
  for (std::size_t i = 0; i < bns.size(); ++i) {
    detail::put_values(c, "bn/base." + std::to_string(i) + ".mean",
                       {bns[i]->running_mean().size()}, bns[i]->running_mean());
    detail::put_values(c, "bn/base." + std::to_string(i) + ".var",
                       {bns[i]->running_var().size()}, bns[i]->running_var());
  }
  if (m.meta) {
    auto mbns = m.meta->batch_norms();
    for (std::size_t i = 0; i < mbns.size(); ++i) {
      detail::put_values(c, "bn/meta." + std::to_string(i) + ".mean",
                         {mbns[i]->running_mean().size()}, mbns[i]->running_mean());
      detail::put_values(c, "bn/meta." + std::to_string(i) + ".var",
                         {mbns[i]->running_var().size()}, mbns[i]->running_var());
    }
  }
  c.write(path);
}

template <class R>
struct LoadedCheckpoint {
  std::unique_ptr<FullModel<R>> model;
  int epoch = 0;
  Rng::state_type rng_state{};
  std::vector<int> train_identities;
};

template <class R>
LoadedCheckpoint<R> load_checkpoint(const std::string& path) {
  TensorContainer c = TensorContainer::read(path);
  if (c.get_scalar("meta/checkpoint_version") != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version in '" + path + "'");
  const int want_dtype = std::is_same_v<R, float> ? 0 : 1;
  if (static_cast<int>(c.get_scalar("meta/dtype")) != want_dtype)
    throw std::runtime_error("checkpoint: precision mismatch in '" + path + "'");

  TrainConfig t;
  t.beta1 = c.get_scalar("config/train.beta1");
  t.beta2 = c.get_scalar("config/train.beta2");
  t.base_lr = c.get_scalar("config/train.base_lr");
  t.lr_step = static_cast<int>(c.get_scalar("config/train.lr_step"));
  t.momentum = c.get_scalar("config/train.momentum");
  t.weight_decay = c.get_scalar("config/train.weight_decay");
  t.max_epochs = static_cast<int>(c.get_scalar("config/train.max_epochs"));
  t.batch_size = static_cast<int>(c.get_scalar("config/train.batch_size"));
  t.k_segments = static_cast<int>(c.get_scalar("config/train.k_segments"));
  t.meta_pairs = static_cast<int>(c.get_scalar("config/train.meta_pairs"));
  t.pairwise_loss =
      static_cast<metalearn::PairwiseLoss>(static_cast<int>(c.get_scalar("config/train.pairwise_loss")));
  t.pairwise_margin = c.get_scalar("config/train.pairwise_margin");
  t.seed = detail::f64_to_bits(c.get_scalar("config/train.seed"));
  t.flags.face = c.get_scalar("config/flags.face") != 0;
  t.flags.motion = c.get_scalar("config/flags.motion") != 0;
  t.flags.cl = c.get_scalar("config/flags.cl") != 0;
  t.flags.ml = c.get_scalar("config/flags.ml") != 0;
  t.flags.al = c.get_scalar("config/flags.al") != 0;

  ModelConfig mc;
  mc.frame_hw = static_cast<int>(c.get_scalar("config/model.frame_hw"));
  mc.face_channels = static_cast<int>(c.get_scalar("config/model.face_channels"));
  mc.flow_channels = static_cast<int>(c.get_scalar("config/model.flow_channels"));
  for (int i = 0; i < 3; ++i) {
    mc.spatial_channels[i] =
        static_cast<int>(c.get_scalar("config/model.s_ch" + std::to_string(i)));
    mc.temporal_channels[i] =
        static_cast<int>(c.get_scalar("config/model.t_ch" + std::to_string(i)));
  }
  mc.d_s = static_cast<int>(c.get_scalar("config/model.d_s"));
  mc.d_t = static_cast<int>(c.get_scalar("config/model.d_t"));
  mc.corr_hidden = static_cast<int>(c.get_scalar("config/model.corr_hidden"));
  mc.bottleneck = static_cast<int>(c.get_scalar("config/model.bottleneck"));
  mc.n_classes = static_cast<int>(c.get_scalar("config/model.n_classes"));
  mc.g_channels[0] = static_cast<int>(c.get_scalar("config/model.g_ch0"));
  mc.g_channels[1] = static_cast<int>(c.get_scalar("config/model.g_ch1"));

  advaug::AlConfig a;
  a.noise_dim = static_cast<int>(c.get_scalar("config/al.noise_dim"));
  a.g_hidden = static_cast<int>(c.get_scalar("config/al.g_hidden"));
  a.d_hidden[0] = static_cast<int>(c.get_scalar("config/al.d_hidden0"));
  a.d_hidden[1] = static_cast<int>(c.get_scalar("config/al.d_hidden1"));
  a.nonsaturating = c.get_scalar("config/al.nonsaturating") != 0;
  a.feature_dim = mc.bottleneck;

  LoadedCheckpoint<R> out;
  Rng init_rng(0);  // all values are overwritten below
  out.model = std::make_unique<FullModel<R>>(mc, a, t, init_rng);

  for (Parameter<R>* p : out.model->all_parameters()) {
    const std::string key = "param/" + p->name;
    if (!c.has(key))
      throw std::runtime_error("checkpoint: missing parameter '" + p->name + "' in '" + path +
                               "'");
    const auto& entry = c.get(key);
    if (entry.dims != p->value->shape())
      throw std::runtime_error("checkpoint: shape mismatch for '" + p->name + "': file has " +
                               shape_str(entry.dims) + ", model expects " +
                               shape_str(p->value->shape()));
    p->value->data() = detail::get_values<R>(c, key);
    p->momentum = detail::get_values<R>(c, "momentum/" + p->name);
  }
  // reject parameters in the file that the rebuilt model does not know
  for (const auto& [name, entry] : c.entries())
    if (name.rfind("param/", 0) == 0) {
      const std::string pname = name.substr(6);
      bool known = false;
      for (Parameter<R>* p : out.model->all_parameters()) known |= p->name == pname;
      if (!known)
        throw std::runtime_error("checkpoint: unknown parameter '" + pname + "' in '" + path +
                                 "'");
    }

  auto bns = out.model->base->batch_norms();
  for (std::size_t i = 0; i < bns.size(); ++i) {
    bns[i]->running_mean() = detail::get_values<R>(c, "bn/base." + std::to_string(i) + ".mean");
    bns[i]->running_var() = detail::get_values<R>(c, "bn/base." + std::to_string(i) + ".var");
  }
  if (out.model->meta) {
    auto mbns = out.model->meta->batch_norms();
    for (std::size_t i = 0; i < mbns.size(); ++i) {
      mbns[i]->running_mean() =
          detail::get_values<R>(c, "bn/meta." + std::to_string(i) + ".mean");
      mbns[i]->running_var() = detail::get_values<R>(c, "bn/meta." + std::to_string(i) + ".var");
    }
  }

  out.epoch = static_cast<int>(c.get_scalar("meta/epoch"));
  const auto state = c.get_f64("meta/rng_state");
  for (int i = 0; i < 4; ++i) out.rng_state[i] = detail::f64_to_bits(state[i]);
  for (double v : c.get_f64("meta/train_identities"))
    if (v >= 0) out.train_identities.push_back(static_cast<int>(v));
  return out;
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

template <class R>
struct TrainHooks {
  std::function<void(int epoch, int batch, double lr)> before_step;
  std::vector<Parameter<R>*> extra_params;  // instrumentation probes
};

template <class R>
struct TrainResult {
  std::unique_ptr<FullModel<R>> model;
  TrainHistory history;
  Rng::state_type final_rng_state{};
  std::vector<int> train_identities;
};

/// Trains on the given sample indices. Resuming from a checkpoint restores
/// parameters, optimizer buffers, epoch and rng state.
template <class R = float>
TrainResult<R> train(const TrainConfig& tcfg, const ModelConfig& mcfg,
                     const advaug::AlConfig& acfg, AccessLoggedDataset& data,
                     const std::vector<std::size_t>& train_indices,
                     LoadedCheckpoint<R>* resume = nullptr, TrainHooks<R> hooks = {}) {
  tcfg.validate();
  mcfg.validate();
  if (train_indices.empty()) throw std::invalid_argument("train: empty train set");
  for (std::size_t i : train_indices)
    if (i >= data.size()) throw std::invalid_argument("train: sample index out of range");

  TrainResult<R> out;
  Rng rng(tcfg.seed);
  int start_epoch = 0;
  if (resume) {
    out.model = std::move(resume->model);
    rng.set_state(resume->rng_state);
    start_epoch = resume->epoch;
  } else {
    out.model = std::make_unique<FullModel<R>>(mcfg, acfg, tcfg, rng);
  }
  FullModel<R>& m = *out.model;
  const AblationFlags& flags = tcfg.flags;
  const bool use_relation =
      flags.ml && tcfg.pairwise_loss == metalearn::PairwiseLoss::kRelation;
  const bool use_pairwise = flags.ml && tcfg.pairwise_loss != metalearn::PairwiseLoss::kNone;

  {
    std::set<int> ids;
    for (std::size_t i : train_indices) ids.insert(data.identity(i));
    out.train_identities.assign(ids.begin(), ids.end());
  }

  auto step_params = m.base_meta_parameters();
  for (auto* p : hooks.extra_params) step_params.push_back(p);

  std::vector<std::size_t> order(train_indices);
  for (int epoch = start_epoch; epoch < tcfg.max_epochs; ++epoch) {
    const double lr = lr_at(tcfg, epoch);
    // Fisher-Yates shuffle from the training stream
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.uniform_int(i)]);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    if (flags.ml) rec.l_ml = 0.0;
    if (flags.al) rec.l_al = 0.0;
    std::size_t n_batches = 0, n_correct = 0, n_seen = 0;

    for (std::size_t batch_start = 0; batch_start < order.size();
         batch_start += tcfg.batch_size) {
      const std::size_t batch_end =
          std::min(order.size(), batch_start + static_cast<std::size_t>(tcfg.batch_size));
      const std::size_t b = batch_end - batch_start;
      if (b < 2) break;  // a single-sample tail cannot form batch statistics
      const int batch_index = static_cast<int>(batch_start / tcfg.batch_size);

      std::vector<const synthgen::VideoSample*> videos;
      std::vector<int> labels;
      std::vector<std::vector<int>> starts;
      for (std::size_t i = batch_start; i < batch_end; ++i) {
        const auto& v = data.get(order[i]);
        videos.push_back(&v);
        labels.push_back(v.label);
        starts.push_back(model::sample_snippets(v, tcfg.k_segments, rng, false));
      }

      auto [faces, flows] =
          model::gather_snippets<R>(videos, starts, flags.face, flags.motion);
      auto fwd = m.base->forward(faces, flows, b, tcfg.k_segments, true, use_relation);
      auto onehot = model::one_hot<R>(labels, m.model_cfg.n_classes);
      auto l_base = softmax_cross_entropy_mean(fwd.consensus_logits, onehot);
      auto loss = l_base;

      double l_ml_value = 0.0;
      if (use_pairwise) {
        const std::size_t p_eff =
            std::min<std::size_t>(tcfg.meta_pairs, b - 1);  // short tail batches shrink P
        auto task = metalearn::build_meta_task(labels, p_eff, rng);
        TensorPtr<R> l_ml;
        if (use_relation) {
          auto pairs = metalearn::pair_features(fwd.video_maps, task);
          l_ml = metalearn::loss_ml(task, m.meta->compare(pairs, true));
        } else {
          // video-level bottleneck features for the alternative pairwise losses
          auto vb = mean_rows(reshape(fwd.bottleneck,
                                      {b, static_cast<std::size_t>(tcfg.k_segments),
                                       static_cast<std::size_t>(m.model_cfg.bottleneck)}));
          if (tcfg.pairwise_loss == metalearn::PairwiseLoss::kSiamese) {
            TensorPtr<R> acc;
            for (std::size_t j = 0; j < task.train_indices.size(); ++j) {
              auto fa = reshape(index_select_rows(vb, {task.anchor}), {vb->dim(1)});
              auto fj = reshape(index_select_rows(vb, {task.train_indices[j]}), {vb->dim(1)});
              auto term = metalearn::loss_contrastive(fa, fj, task.targets[j],
                                                      static_cast<R>(tcfg.pairwise_margin));
              acc = acc ? add(acc, term) : term;
            }
            l_ml = mul_scalar(acc, R(1) / static_cast<R>(task.train_indices.size()));
          } else {  // triplet: first same-class and first different-class partner
            int pos = -1, neg = -1;
            for (std::size_t j = 0; j < task.targets.size(); ++j) {
              if (task.targets[j] == 1 && pos < 0) pos = static_cast<int>(task.train_indices[j]);
              if (task.targets[j] == 0 && neg < 0) neg = static_cast<int>(task.train_indices[j]);
            }
            if (pos >= 0 && neg >= 0) {
              auto fa = reshape(index_select_rows(vb, {task.anchor}), {vb->dim(1)});
              auto fp = reshape(index_select_rows(vb, {static_cast<std::size_t>(pos)}),
                                {vb->dim(1)});
              auto fn = reshape(index_select_rows(vb, {static_cast<std::size_t>(neg)}),
                                {vb->dim(1)});
              l_ml = metalearn::loss_triplet(fa, fp, fn, static_cast<R>(tcfg.pairwise_margin));
            } else {
              l_ml = Tensor<R>::scalar(R(0));  // task carries no valid triple
            }
          }
        }
        l_ml_value = static_cast<double>(l_ml->item());
        loss = add(loss, mul_scalar(l_ml, static_cast<R>(tcfg.beta1)));
      }

      const double l_base_value = static_cast<double>(l_base->item());
      if (!std::isfinite(l_base_value) || !std::isfinite(l_ml_value))
        throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                                 " batch " + std::to_string(batch_index));

      zero_grads(step_params);
      backward(loss);
      if (hooks.before_step) hooks.before_step(epoch, batch_index, lr);
      sgd_step(step_params, static_cast<R>(lr), static_cast<R>(tcfg.momentum),
               static_cast<R>(tcfg.weight_decay));

      double l_al_value = 0.0;
      if (flags.al) {
        auto real = fwd.bottleneck->detach();
        auto res = m.gan->adversarial_step(real, rng, static_cast<R>(lr),
                                           static_cast<R>(tcfg.momentum),
                                           static_cast<R>(tcfg.weight_decay));
        l_al_value = static_cast<double>(res.d_loss_value);
        if (!std::isfinite(l_al_value))
          throw std::runtime_error("train: non-finite adversarial loss at epoch " +
                                   std::to_string(epoch) + " batch " +
                                   std::to_string(batch_index));
      }

      // training accuracy from the consensus argmax
      for (std::size_t i = 0; i < b; ++i) {
        const R* e = fwd.consensus_logits->raw() + i * m.model_cfg.n_classes;
        int argmax = 0;
        for (int cidx = 1; cidx < m.model_cfg.n_classes; ++cidx)
          if (e[cidx] > e[argmax]) argmax = cidx;
        n_correct += argmax == labels[i];
        ++n_seen;
      }

      rec.l_base += l_base_value;
      if (rec.l_ml) *rec.l_ml += l_ml_value;
      if (rec.l_al) *rec.l_al += l_al_value;
      ++n_batches;
    }

    if (n_batches == 0) throw std::runtime_error("train: no full batches in epoch");
    rec.l_base /= static_cast<double>(n_batches);
    if (rec.l_ml) *rec.l_ml /= static_cast<double>(n_batches);
    if (rec.l_al) *rec.l_al /= static_cast<double>(n_batches);
    rec.l_total = total_loss(rec.l_base, rec.l_ml, rec.l_al, tcfg.beta1, tcfg.beta2, flags);
    rec.train_acc = static_cast<double>(n_correct) / static_cast<double>(n_seen);
    out.history.records.push_back(rec);
  }

  out.final_rng_state = rng.state();
  return out;
}

}  // namespace ffcsn::trainer
