#pragma once

#include <string>
#include <vector>

#include "ffcsn/layers.hpp"
#include "ffcsn/ops.hpp"
#include "ffcsn/rng.hpp"

// Meta-learning pairwise comparison: a randomly chosen meta-validation
// anchor is paired with meta-train samples from the same mini-batch; the
// comparison submodule scores each pair's class similarity and the module
// is trained against the ground-truth same/different targets.

namespace ffcsn::metalearn {

enum class PairwiseLoss { kRelation, kSiamese, kTriplet, kNone };

inline const char* pairwise_loss_name(PairwiseLoss p) {
  switch (p) {
    case PairwiseLoss::kRelation: return "relation";
    case PairwiseLoss::kSiamese: return "siamese";
    case PairwiseLoss::kTriplet: return "triplet";
    case PairwiseLoss::kNone: return "none";
  }
  return "?";
}

inline PairwiseLoss parse_pairwise_loss(const std::string& s) {
  if (s == "relation") return PairwiseLoss::kRelation;
  if (s == "siamese") return PairwiseLoss::kSiamese;
  if (s == "triplet") return PairwiseLoss::kTriplet;
  if (s == "none") return PairwiseLoss::kNone;
  throw std::invalid_argument("pairwise_loss: unknown variant '" + s +
                              "' (expected relation|siamese|triplet|none)");
}

/// One sampled meta-task: an anchor from the meta-validation side and P
/// meta-train partners with same/different targets.
struct MetaTask {
  std::size_t anchor = 0;
  std::vector<std::size_t> train_indices;
  std::vector<int> targets;  // 1 iff partner shares the anchor's class
};

/// Targets are derived exactly from the labels: y_j = [label_j == label_a].
inline std::vector<int> pair_targets(std::size_t anchor,
                                     const std::vector<std::size_t>& train_indices,
                                     const std::vector<int>& labels) {
  std::vector<int> out;
  out.reserve(train_indices.size());
  for (std::size_t j : train_indices)
    out.push_back(labels.at(j) == labels.at(anchor) ? 1 : 0);
  return out;
}

/// Uniformly picks the anchor, then P partners without replacement from the
/// rest of the batch.
inline MetaTask build_meta_task(const std::vector<int>& batch_labels, std::size_t pairs,
                                Rng& rng) {
  if (pairs < 1) throw std::invalid_argument("build_meta_task: P must be >= 1");
  if (batch_labels.size() < pairs + 1)
    throw std::invalid_argument("build_meta_task: batch of " +
                                std::to_string(batch_labels.size()) +
                                " too small for P=" + std::to_string(pairs));
  MetaTask task;
  task.anchor = rng.uniform_int(batch_labels.size());
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < batch_labels.size(); ++i)
    if (i != task.anchor) pool.push_back(i);
  for (std::size_t p = 0; p < pairs; ++p) {
    const std::size_t pick = rng.uniform_int(pool.size());
    task.train_indices.push_back(pool[pick]);
    pool.erase(pool.begin() + static_cast<long>(pick));
  }
  task.targets = pair_targets(task.anchor, task.train_indices, batch_labels);
  return task;
}

// ---------------------------------------------------------------------------
// comparison submodule g
// ---------------------------------------------------------------------------

/// Two conv blocks (3x3 + BN + ReLU) followed by FC(8) and FC(2); the
/// pairwise score is the "same-class" probability of the 2-way softmax.
template <class R>
class ComparisonNet {
 public:
  ComparisonNet(std::size_t in_depth, std::size_t map_hw, std::array<int, 2> filters, Rng& rng)
      : conv1_("meta.conv1", in_depth, filters[0], rng, InitScheme::kGaussian001, false),
        bn1_("meta.bn1", filters[0]),
        conv2_("meta.conv2", filters[0], filters[1], rng, InitScheme::kGaussian001, false),
        bn2_("meta.bn2", filters[1]),
        fc1_("meta.fc1", static_cast<std::size_t>(filters[1]) * map_hw * map_hw, 8, rng,
             InitScheme::kGaussian001),
        fc2_("meta.fc2", 8, 2, rng, InitScheme::kGaussian001) {}

  /// pair_maps: [P, 2*C, h, w] depth-concatenated pair features -> scores [P].
  TensorPtr<R> compare(const TensorPtr<R>& pair_maps, bool training) {
    auto h = relu(bn1_.forward(conv1_.forward(pair_maps), training));
    h = relu(bn2_.forward(conv2_.forward(h), training));
    auto probs = softmax_lastdim(fc2_.forward(fc1_.forward(h)));
    return take_column(probs, 1);  // probability of the same-class output
  }

  void collect(std::vector<Parameter<R>*>& out) {
    conv1_.collect(out);
    bn1_.collect(out);
    conv2_.collect(out);
    bn2_.collect(out);
    fc1_.collect(out);
    fc2_.collect(out);
  }

  std::vector<Parameter<R>*> parameters() {
    std::vector<Parameter<R>*> out;
    collect(out);
    return out;
  }

  std::vector<BatchNorm<R>*> batch_norms() { return {&bn1_, &bn2_}; }

 private:
  Conv3x3<R> conv1_;
  BatchNorm<R> bn1_;
  Conv3x3<R> conv2_;
  BatchNorm<R> bn2_;
  Linear<R> fc1_;
  Linear<R> fc2_;
};

/// Depth-concatenates the anchor's feature map with each meta-train
/// partner's map: video_maps [B, C, h, w] -> [P, 2C, h, w].
template <class R>
TensorPtr<R> pair_features(const TensorPtr<R>& video_maps, const MetaTask& task) {
  std::vector<std::size_t> anchor_rep(task.train_indices.size(), task.anchor);
  auto anchors = index_select_rows(video_maps, anchor_rep);
  auto partners = index_select_rows(video_maps, task.train_indices);
  return concat_depth(anchors, partners);
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Binary cross-entropy of the pairwise scores against the same/different
/// targets, averaged over the P pairs.
template <class R>
TensorPtr<R> loss_ml(const MetaTask& task, const TensorPtr<R>& scores) {
  if (scores->rank() != 1 || scores->dim(0) != task.train_indices.size())
    throw std::invalid_argument("loss_ml: expected " +
                                std::to_string(task.train_indices.size()) + " scores, got " +
                                shape_str(scores->shape()));
  const std::size_t n_pairs = task.targets.size();
  std::vector<R> y(n_pairs);
  for (std::size_t i = 0; i < n_pairs; ++i) y[i] = static_cast<R>(task.targets[i]);
  auto yt = Tensor<R>::create({n_pairs}, std::move(y));
  auto r = clamp(scores, R(1e-7), R(1) - R(1e-7));
  auto term = add(mul(yt, log_t(r)), mul(sub_from_scalar(yt, R(1)),
                                         log_t(sub_from_scalar(r, R(1)))));
  return neg(mean_all(term));
}

template <class R>
TensorPtr<R> euclidean_distance(const TensorPtr<R>& a, const TensorPtr<R>& b) {
  return sqrt_t(sum_all(square(sub(a, b))));
}

/// Siamese contrastive loss: y*d^2 + (1-y)*max(0, margin-d)^2.
template <class R>
TensorPtr<R> loss_contrastive(const TensorPtr<R>& fa, const TensorPtr<R>& fb, int same,
                              R margin) {
  if (margin <= R(0)) throw std::invalid_argument("loss_contrastive: margin must be positive");
  auto d2 = sum_all(square(sub(fa, fb)));
  if (same) return d2;
  auto d = sqrt_t(d2);
  return square(relu(sub_from_scalar(d, margin)));
}

/// Triplet loss: max(0, d(a,p) - d(a,n) + margin).
template <class R>
TensorPtr<R> loss_triplet(const TensorPtr<R>& anchor, const TensorPtr<R>& positive,
                          const TensorPtr<R>& negative, R margin) {
  if (margin <= R(0)) throw std::invalid_argument("loss_triplet: margin must be positive");
  auto gap = add_scalar(sub(euclidean_distance(anchor, positive),
                            euclidean_distance(anchor, negative)),
                        margin);
  return relu(gap);
}

}  // namespace ffcsn::metalearn
