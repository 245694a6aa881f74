#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "ffcsn/layers.hpp"
#include "ffcsn/ops.hpp"
#include "ffcsn/rng.hpp"
#include "ffcsn/synthgen.hpp"

// Cross-stream base network: a spatial encoder over face frames, a shared
// per-frame temporal encoder over flow frames, correlation-weighted fusion
// of the five face-motion pairs, a per-snippet classifier, and average
// consensus across snippets.

namespace ffcsn::model {

using synthgen::kSnippetLen;
using synthgen::VideoSample;

/// Which parts of the full model are active.
struct AblationFlags {
  bool face = true;
  bool motion = true;
  bool cl = true;
  bool ml = true;
  bool al = true;

  void validate() const {
    if (!face && !motion)
      throw std::invalid_argument("flags: at least one of face/motion must be enabled");
    if (cl && !(face && motion))
      throw std::invalid_argument("flags: cl requires both face and motion streams");
    if ((ml || al) && !(face || motion))
      throw std::invalid_argument("flags: ml/al require an active stream");
  }

  std::string name() const {
    std::string s;
    if (face) s += "Face";
    if (motion) s += s.empty() ? "Motion" : "+Motion";
    if (cl) s += "+CL";
    if (ml) s += "+ML";
    if (al) s += "+AL";
    return s;
  }
};

struct ModelConfig {
  int frame_hw = 32;
  int face_channels = 3;
  int flow_channels = 2;
  std::array<int, 3> spatial_channels = {16, 32, 64};
  std::array<int, 3> temporal_channels = {16, 32, 64};
  int d_s = 1024;
  int d_t = 512;
  int corr_hidden = 128;
  int bottleneck = 256;
  int n_classes = 2;
  std::array<int, 2> g_channels = {64, 32};  // comparison submodule conv filters

  void validate() const {
    if (frame_hw < 8 || frame_hw % 4 != 0)
      throw std::invalid_argument("model config: frame_hw must be a multiple of 4, >= 8");
    if (d_s <= 0 || d_t <= 0 || corr_hidden <= 0 || bottleneck <= 0 || n_classes < 2)
      throw std::invalid_argument("model config: dimensions must be positive");
  }

  int map_hw() const { return frame_hw / 4; }

  /// Desk-scale configuration used by the experiment suites.
  static ModelConfig tiny() {
    ModelConfig c;
    c.frame_hw = 16;
    c.spatial_channels = {8, 12, 16};
    c.temporal_channels = {8, 12, 16};
    c.d_s = 64;
    c.d_t = 32;
    c.g_channels = {32, 16};
    return c;
  }

  /// Smallest configuration that still exercises every path; sized so that
  /// finite-difference verification over all parameters stays fast.
  static ModelConfig gradcheck_tiny() {
    ModelConfig c;
    c.frame_hw = 8;
    c.spatial_channels = {3, 4, 4};
    c.temporal_channels = {3, 4, 4};
    c.d_s = 16;
    c.d_t = 8;
    c.corr_hidden = 8;
    c.bottleneck = 16;
    c.g_channels = {6, 4};
    return c;
  }
};

// ---------------------------------------------------------------------------
// snippet sampling
// ---------------------------------------------------------------------------

/// Start frames of the K snippets, one per equal-duration segment.
/// Training samples the start uniformly inside the segment; eval takes the
/// segment-center snippet deterministically.
inline std::vector<int> sample_snippets(const VideoSample& video, int k_segments, Rng& rng,
                                        bool eval_mode) {
  const int L = video.episode_len;
  if (k_segments < 1) throw std::invalid_argument("sample_snippets: K must be >= 1");
  if (L < 6 * k_segments)
    throw std::invalid_argument("sample_snippets: episode of length " + std::to_string(L) +
                                " too short for K=" + std::to_string(k_segments) +
                                " snippets (needs >= " + std::to_string(6 * k_segments) + ")");
  std::vector<int> starts(k_segments);
  const int snip = static_cast<int>(kSnippetLen);
  for (int k = 0; k < k_segments; ++k) {
    const int a = static_cast<int>(static_cast<long>(L) * k / k_segments);
    const int b = static_cast<int>(static_cast<long>(L) * (k + 1) / k_segments);
    const int lo = a, hi = b - snip;  // inclusive range of valid starts
    starts[k] = eval_mode ? lo + (b - a - snip) / 2
                          : lo + static_cast<int>(rng.uniform_int(hi - lo + 1));
  }
  return starts;
}

inline std::pair<int, int> segment_bounds(int episode_len, int k, int k_segments) {
  return {static_cast<int>(static_cast<long>(episode_len) * k / k_segments),
          static_cast<int>(static_cast<long>(episode_len) * (k + 1) / k_segments)};
}

// ---------------------------------------------------------------------------
// encoder trunk: 3 x (conv3x3 + BN + ReLU) with 2x average pooling between
// stages, then FC to the stream feature dimension
// ---------------------------------------------------------------------------

template <class R>
class EncoderTrunk {
 public:
  EncoderTrunk(const std::string& prefix, int in_channels, std::array<int, 3> channels,
               int frame_hw, int out_dim, Rng& rng, InitScheme scheme)
      : conv1_(prefix + ".conv1", in_channels, channels[0], rng, scheme, /*bias=*/false),
        bn1_(prefix + ".bn1", channels[0]),
        conv2_(prefix + ".conv2", channels[0], channels[1], rng, scheme, false),
        bn2_(prefix + ".bn2", channels[1]),
        conv3_(prefix + ".conv3", channels[1], channels[2], rng, scheme, false),
        bn3_(prefix + ".bn3", channels[2]),
        fc_(prefix + ".fc", static_cast<std::size_t>(channels[2]) * (frame_hw / 4) *
                                (frame_hw / 4),
            out_dim, rng, scheme) {}

  /// Returns the feature vector [N, out_dim]; optionally exposes the last
  /// conv feature maps [N, C3, H/4, W/4].
  TensorPtr<R> forward(const TensorPtr<R>& x, bool training, TensorPtr<R>* maps_out = nullptr) {
    auto h = relu(bn1_.forward(conv1_.forward(x), training));
    h = avg_pool2x2(h);
    h = relu(bn2_.forward(conv2_.forward(h), training));
    h = avg_pool2x2(h);
    h = relu(bn3_.forward(conv3_.forward(h), training));
    if (maps_out) *maps_out = h;
    return fc_.forward(h);
  }

  void collect(std::vector<Parameter<R>*>& out) {
    conv1_.collect(out);
    bn1_.collect(out);
    conv2_.collect(out);
    bn2_.collect(out);
    conv3_.collect(out);
    bn3_.collect(out);
    fc_.collect(out);
  }

  std::vector<BatchNorm<R>*> batch_norms() { return {&bn1_, &bn2_, &bn3_}; }

 private:
  Conv3x3<R> conv1_;
  BatchNorm<R> bn1_;
  Conv3x3<R> conv2_;
  BatchNorm<R> bn2_;
  Conv3x3<R> conv3_;
  BatchNorm<R> bn3_;
  Linear<R> fc_;
};

// ---------------------------------------------------------------------------
// cross-stream model
// ---------------------------------------------------------------------------

template <class R>
struct ForwardResult {
  TensorPtr<R> consensus_logits;  // [B, Nc]
  TensorPtr<R> snippet_logits;    // [B*K, Nc]
  TensorPtr<R> alpha;             // [B*K, 5]; uniform when cl is off
  TensorPtr<R> bottleneck;        // [B*K, bottleneck]
  TensorPtr<R> video_maps;        // [B, Cf, h, w] when requested, else null
};

template <class R>
class CrossStreamModel {
 public:
  CrossStreamModel(const ModelConfig& cfg, const AblationFlags& flags, Rng& rng)
      : cfg_(cfg), flags_(flags) {
    cfg_.validate();
    flags_.validate();
    if (flags_.face)
      spatial_ = std::make_unique<EncoderTrunk<R>>("spatial", cfg.face_channels,
                                                   cfg.spatial_channels, cfg.frame_hw, cfg.d_s,
                                                   rng, InitScheme::kGaussian001);
    if (flags_.motion)
      temporal_ = std::make_unique<EncoderTrunk<R>>("temporal", cfg.flow_channels,
                                                    cfg.temporal_channels, cfg.frame_hw,
                                                    cfg.d_t, rng, InitScheme::kGaussian001);
    if (flags_.cl) {
      corr_fc1_ = std::make_unique<Linear<R>>(
          "corr.fc1", cfg.d_s + kSnippetLen * static_cast<std::size_t>(cfg.d_t),
          cfg.corr_hidden, rng, InitScheme::kGaussian001);
      corr_fc2_ = std::make_unique<Linear<R>>("corr.fc2", cfg.corr_hidden, kSnippetLen, rng,
                                              InitScheme::kGaussian001);
    }
    head_fc1_ = std::make_unique<Linear<R>>("head.fc1", fused_dim(), cfg.bottleneck, rng,
                                            InitScheme::kGaussian001);
    head_fc2_ = std::make_unique<Linear<R>>("head.fc2", cfg.bottleneck, cfg.n_classes, rng,
                                            InitScheme::kGaussian001);
  }

  const ModelConfig& config() const { return cfg_; }
  const AblationFlags& flags() const { return flags_; }

  std::size_t fused_dim() const {
    std::size_t d = 0;
    if (flags_.face) d += cfg_.d_s;
    if (flags_.motion) d += cfg_.d_t;
    return d;
  }

  /// Depth of the per-video feature map fed to the comparison submodule.
  std::size_t video_map_depth() const {
    std::size_t d = 0;
    if (flags_.face) d += cfg_.spatial_channels[2];
    if (flags_.motion) d += cfg_.temporal_channels[2];
    return d;
  }

  TensorPtr<R> encode_spatial(const TensorPtr<R>& faces, bool training,
                              TensorPtr<R>* maps = nullptr) {
    if (!spatial_) throw std::runtime_error("model: face stream disabled");
    return spatial_->forward(faces, training, maps);
  }

  /// flows: [N*5, C, H, W] -> [N, 5, d_t] via shared per-frame encoding and
  /// reshape pooling.
  TensorPtr<R> encode_temporal(const TensorPtr<R>& flows, bool training,
                               TensorPtr<R>* maps = nullptr) {
    if (!temporal_) throw std::runtime_error("model: motion stream disabled");
    if (flows->dim(0) % kSnippetLen != 0)
      throw std::invalid_argument("encode_temporal: leading dim must be a multiple of 5, got " +
                                  shape_str(flows->shape()));
    auto flat = temporal_->forward(flows, training, maps);  // [N*5, d_t]
    return reshape(flat, {flat->dim(0) / kSnippetLen, kSnippetLen,
                          static_cast<std::size_t>(cfg_.d_t)});
  }

  /// Correlation weights from the concatenated streams:
  /// [s || flatten(t)] -> FC(corr_hidden) -> FC(5) -> softmax.
  TensorPtr<R> correlate(const TensorPtr<R>& s, const TensorPtr<R>& t) {
    if (!corr_fc1_) throw std::runtime_error("model: correlation block disabled");
    auto t_flat = reshape(t, {t->dim(0), t->dim(1) * t->dim(2)});
    auto h = corr_fc1_->forward(concat_cols(s, t_flat));
    return softmax_lastdim(corr_fc2_->forward(h));
  }

  static TensorPtr<R> uniform_alpha(std::size_t n) {
    return Tensor<R>::full({n, kSnippetLen}, R(1) / R(kSnippetLen));
  }

  /// Fused snippet feature per the ablation flags. With cl: [s || sum_j a_j t_j];
  /// without cl the weights are uniform; single-stream variants pass through.
  TensorPtr<R> fuse(const TensorPtr<R>& s, const TensorPtr<R>& t,
                    const TensorPtr<R>& alpha) const {
    if (flags_.face && flags_.motion) return concat_cols(s, rows_weighted_sum(alpha, t));
    if (flags_.face) return s;
    return rows_weighted_sum(alpha, t);
  }

  /// Snippet logits and the bottleneck vector the adversarial and
  /// meta-learning modules consume.
  std::pair<TensorPtr<R>, TensorPtr<R>> classify_snippet(const TensorPtr<R>& fused) {
    auto bottleneck = head_fc1_->forward(fused);
    auto logits = head_fc2_->forward(relu(bottleneck));
    return {logits, bottleneck};
  }

  /// Batched forward over B videos x K snippets.
  /// faces: [B*K, Cf, H, W]; flows: [B*K*5, Cm, H, W].
  ForwardResult<R> forward(const TensorPtr<R>& faces, const TensorPtr<R>& flows, std::size_t b,
                           std::size_t k, bool training, bool want_maps = false) {
    const std::size_t n = b * k;
    TensorPtr<R> s, t, s_maps, t_maps;
    if (flags_.face) {
      if (faces->dim(0) != n)
        throw std::invalid_argument("model forward: face batch " + shape_str(faces->shape()) +
                                    " does not match B*K=" + std::to_string(n));
      s = encode_spatial(faces, training, want_maps ? &s_maps : nullptr);
    }
    if (flags_.motion) {
      if (flows->dim(0) != n * kSnippetLen)
        throw std::invalid_argument("model forward: flow batch " + shape_str(flows->shape()) +
                                    " does not match B*K*5=" + std::to_string(n * kSnippetLen));
      t = encode_temporal(flows, training, want_maps ? &t_maps : nullptr);
    }

    ForwardResult<R> out;
    out.alpha = flags_.cl ? correlate(s, t) : uniform_alpha(n);
    auto fused = fuse(s, t, out.alpha);
    auto [logits, bottleneck] = classify_snippet(fused);
    out.snippet_logits = logits;
    out.bottleneck = bottleneck;
    out.consensus_logits = mean_rows(
        reshape(logits, {b, k, static_cast<std::size_t>(cfg_.n_classes)}));

    if (want_maps) {
      const std::size_t hw = cfg_.map_hw();
      TensorPtr<R> maps;
      if (flags_.face && flags_.motion) {
        auto tw = weighted_temporal_maps(t_maps, out.alpha, n, hw);
        maps = concat_depth(s_maps, tw);
      } else if (flags_.face) {
        maps = s_maps;
      } else {
        maps = weighted_temporal_maps(t_maps, out.alpha, n, hw);
      }
      // per-video map: mean over the K snippets
      const std::size_t depth = maps->dim(1);
      auto grouped = reshape(maps, {b, k, depth * hw * hw});
      out.video_maps = reshape(mean_rows(grouped), {b, depth, hw, hw});
    }
    return out;
  }

  std::vector<Parameter<R>*> parameters() {
    std::vector<Parameter<R>*> out;
    if (spatial_) spatial_->collect(out);
    if (temporal_) temporal_->collect(out);
    if (corr_fc1_) corr_fc1_->collect(out);
    if (corr_fc2_) corr_fc2_->collect(out);
    head_fc1_->collect(out);
    head_fc2_->collect(out);
    return out;
  }

  std::vector<BatchNorm<R>*> batch_norms() {
    std::vector<BatchNorm<R>*> out;
    if (spatial_)
      for (auto* bn : spatial_->batch_norms()) out.push_back(bn);
    if (temporal_)
      for (auto* bn : temporal_->batch_norms()) out.push_back(bn);
    return out;
  }

 private:
  TensorPtr<R> weighted_temporal_maps(const TensorPtr<R>& t_maps, const TensorPtr<R>& alpha,
                                      std::size_t n, std::size_t hw) const {
    const std::size_t depth = t_maps->dim(1);
    auto rows = reshape(t_maps, {n, kSnippetLen, depth * hw * hw});
    return reshape(rows_weighted_sum(alpha, rows), {n, depth, hw, hw});
  }

  ModelConfig cfg_;
  AblationFlags flags_;
  std::unique_ptr<EncoderTrunk<R>> spatial_, temporal_;
  std::unique_ptr<Linear<R>> corr_fc1_, corr_fc2_;
  std::unique_ptr<Linear<R>> head_fc1_, head_fc2_;
};

// ---------------------------------------------------------------------------
// batch assembly from episodes
// ---------------------------------------------------------------------------

/// Gathers face frames [B*K, Cf, H, W] and flow stacks [B*K*5, Cm, H, W] at
/// the given snippet starts.
template <class R>
std::pair<TensorPtr<R>, TensorPtr<R>> gather_snippets(
    const std::vector<const VideoSample*>& videos,
    const std::vector<std::vector<int>>& starts, bool want_face, bool want_flow) {
  if (videos.empty()) throw std::invalid_argument("gather_snippets: empty batch");
  const VideoSample& first = *videos.front();
  const std::size_t b = videos.size();
  const std::size_t k = starts.front().size();
  const std::size_t hw = first.frame_hw;
  const std::size_t face_size = static_cast<std::size_t>(first.face_channels) * hw * hw;
  const std::size_t flow_size = static_cast<std::size_t>(first.flow_channels) * hw * hw;

  TensorPtr<R> faces, flows;
  if (want_face) {
    std::vector<R> buf(b * k * face_size);
    std::size_t off = 0;
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t s = 0; s < k; ++s) {
        const float* src = videos[i]->face_frame(starts[i][s]);
        for (std::size_t j = 0; j < face_size; ++j) buf[off + j] = static_cast<R>(src[j]);
        off += face_size;
      }
    faces = Tensor<R>::create(
        {b * k, static_cast<std::size_t>(first.face_channels), hw, hw}, std::move(buf));
  }
  if (want_flow) {
    std::vector<R> buf(b * k * kSnippetLen * flow_size);
    std::size_t off = 0;
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t s = 0; s < k; ++s)
        for (std::size_t f = 0; f < kSnippetLen; ++f) {
          const float* src = videos[i]->flow_frame(starts[i][s] + static_cast<int>(f));
          for (std::size_t j = 0; j < flow_size; ++j) buf[off + j] = static_cast<R>(src[j]);
          off += flow_size;
        }
    flows = Tensor<R>::create(
        {b * k * kSnippetLen, static_cast<std::size_t>(first.flow_channels), hw, hw},
        std::move(buf));
  }
  return {faces, flows};
}

// ---------------------------------------------------------------------------
// consensus and base loss
// ---------------------------------------------------------------------------

/// Elementwise mean of per-snippet predictions: [K, Nc] -> [Nc].
template <class R>
TensorPtr<R> consensus(const TensorPtr<R>& per_snippet_logits) {
  if (per_snippet_logits->rank() != 2 || per_snippet_logits->dim(0) < 1)
    throw std::invalid_argument("consensus: expected [K,Nc] with K >= 1, got " +
                                shape_str(per_snippet_logits->shape()));
  const std::size_t k = per_snippet_logits->dim(0), c = per_snippet_logits->dim(1);
  return reshape(mean_rows(reshape(per_snippet_logits, {1, k, c})), {c});
}

/// Softmax cross-entropy of a one-hot target against consensus logits,
/// overflow-safe. Single-sample form of the training loss.
template <class R>
TensorPtr<R> loss_base(const std::vector<R>& onehot, const TensorPtr<R>& e) {
  if (e->rank() != 1 || onehot.size() != e->dim(0))
    throw std::invalid_argument("loss_base: target size mismatch");
  auto y = Tensor<R>::create({1, e->dim(0)}, onehot);
  auto logits = reshape(e, {std::size_t{1}, e->dim(0)});
  return softmax_cross_entropy_mean(logits, y);
}

/// One-hot batch targets [N, n_classes] from labels.
template <class R>
TensorPtr<R> one_hot(const std::vector<int>& labels, int n_classes) {
  std::vector<R> buf(labels.size() * n_classes, R(0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= n_classes)
      throw std::invalid_argument("one_hot: label out of range");
    buf[i * n_classes + labels[i]] = R(1);
  }
  return Tensor<R>::create({labels.size(), static_cast<std::size_t>(n_classes)},
                           std::move(buf));
}

}  // namespace ffcsn::model
