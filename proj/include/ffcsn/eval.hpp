#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "ffcsn/trainer.hpp"

// Evaluation protocol: identity-disjoint k-fold plans, classification
// accuracy, step-wise precision-recall area, per-fold evaluation with a
// train/test identity guard, the ablation suite, the correlation-weight
// report and the meta task-size sweep.

namespace ffcsn::eval {

using model::AblationFlags;
using synthgen::Dataset;
using trainer::TrainConfig;

// ---------------------------------------------------------------------------
// folds
// ---------------------------------------------------------------------------

struct FoldPlan {
  int k = 10;
  std::vector<std::vector<int>> identity_folds;          // disjoint, exhaustive
  std::vector<std::vector<std::size_t>> sample_folds;    // derived per-fold test sets

  std::vector<std::size_t> train_indices(std::size_t fold) const {
    std::vector<std::size_t> out;
    for (std::size_t f = 0; f < sample_folds.size(); ++f)
      if (f != fold)
        out.insert(out.end(), sample_folds[f].begin(), sample_folds[f].end());
    std::sort(out.begin(), out.end());
    return out;
  }
};

/// Shuffles the distinct identities by seed and deals them round-robin into
/// k folds, so no identity appears in two folds.
inline FoldPlan make_folds(const std::vector<int>& identity_per_sample, int k,
                           std::uint64_t seed) {
  std::vector<int> ids;
  {
    std::set<int> s(identity_per_sample.begin(), identity_per_sample.end());
    ids.assign(s.begin(), s.end());
  }
  if (k < 2 || k > static_cast<int>(ids.size()))
    throw std::invalid_argument("make_folds: k must lie in [2, #identities], got k=" +
                                std::to_string(k) + " with " + std::to_string(ids.size()) +
                                " identities");
  Rng rng(seed);
  for (std::size_t i = ids.size(); i > 1; --i)
    std::swap(ids[i - 1], ids[rng.uniform_int(i)]);

  FoldPlan plan;
  plan.k = k;
  plan.identity_folds.assign(k, {});
  for (std::size_t i = 0; i < ids.size(); ++i)
    plan.identity_folds[i % k].push_back(ids[i]);

  plan.sample_folds.assign(k, {});
  std::map<int, std::size_t> fold_of;
  for (int f = 0; f < k; ++f)
    for (int id : plan.identity_folds[f]) fold_of[id] = f;
  for (std::size_t i = 0; i < identity_per_sample.size(); ++i)
    plan.sample_folds[fold_of.at(identity_per_sample[i])].push_back(i);
  return plan;
}

/// Checks disjointness and exhaustiveness of a (possibly external) plan.
inline void validate_fold_plan(const FoldPlan& plan,
                               const std::vector<int>& identity_per_sample) {
  std::set<int> seen;
  std::size_t total = 0;
  for (const auto& fold : plan.identity_folds) {
    for (int id : fold) {
      if (!seen.insert(id).second)
        throw std::invalid_argument("fold plan: identity " + std::to_string(id) +
                                    " appears in two folds");
      ++total;
    }
  }
  for (int id : identity_per_sample)
    if (!seen.count(id))
      throw std::invalid_argument("fold plan: identity " + std::to_string(id) +
                                  " missing from every fold");
  (void)total;
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

inline double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.empty() || predicted.size() != truth.size())
    throw std::invalid_argument("accuracy: label vectors must be non-empty and equal-length");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) correct += predicted[i] == truth[i];
  return static_cast<double>(correct) / static_cast<double>(predicted.size());
}

/// Area under the precision-recall curve by step-wise summation over the
/// distinct score thresholds in descending order; tied scores share a
/// threshold. Requires at least one positive label.
inline double pr_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.empty() || scores.size() != labels.size())
    throw std::invalid_argument("pr_auc: scores/labels must be non-empty and equal-length");
  long npos = 0;
  for (int y : labels) npos += y == 1;
  if (npos == 0)
    throw std::invalid_argument("pr_auc: no positive labels; precision-recall undefined");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  double auc = 0.0, recall_prev = 0.0;
  long tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double threshold = scores[order[i]];
    while (i < order.size() && scores[order[i]] == threshold) {
      if (labels[order[i]] == 1)
        ++tp;
      else
        ++fp;
      ++i;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(npos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    auc += (recall - recall_prev) * precision;
    recall_prev = recall;
  }
  return auc;
}

// ---------------------------------------------------------------------------
// deterministic inference
// ---------------------------------------------------------------------------

struct SampleEval {
  std::size_t index = 0;
  int label = 0;
  int predicted = 0;
  double p_deceptive = 0;
  std::array<double, 5> alpha{};  // per-video mean over K snippets
};

/// Eval-mode forward over the given samples: running-statistic batch norm,
/// deterministic segment-center snippets. Pure function of (weights, input).
template <class R>
std::vector<SampleEval> eval_forward(trainer::FullModel<R>& m, const Dataset& data,
                                     const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("eval_forward: empty index set");
  NoGradGuard no_grad;
  const auto& flags = m.train_cfg.flags;
  const int k = m.train_cfg.k_segments;
  Rng unused(0);

  std::vector<const synthgen::VideoSample*> videos;
  std::vector<std::vector<int>> starts;
  for (std::size_t i : indices) {
    videos.push_back(&data.samples[i]);
    starts.push_back(model::sample_snippets(data.samples[i], k, unused, true));
  }
  auto [faces, flows] = model::gather_snippets<R>(videos, starts, flags.face, flags.motion);
  auto fwd = m.base->forward(faces, flows, indices.size(), k, false);

  std::vector<SampleEval> out;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    SampleEval e;
    e.index = indices[i];
    e.label = data.samples[indices[i]].label;
    const R* logits = fwd.consensus_logits->raw() + i * m.model_cfg.n_classes;
    const double a = static_cast<double>(logits[0]);
    const double b = static_cast<double>(logits[1]);
    // softmax(E)[1], overflow-safe
    const double mx = std::max(a, b);
    const double ea = std::exp(a - mx), eb = std::exp(b - mx);
    e.p_deceptive = eb / (ea + eb);
    e.predicted = b > a ? 1 : 0;
    for (int s = 0; s < k; ++s)
      for (std::size_t j = 0; j < 5; ++j)
        e.alpha[j] += static_cast<double>(fwd.alpha->data()[(i * k + s) * 5 + j]) / k;
    out.push_back(e);
  }
  return out;
}

// ---------------------------------------------------------------------------
// per-fold evaluation
// ---------------------------------------------------------------------------

struct FoldResult {
  double acc = 0;
  std::optional<double> auc;  // absent when the fold has no positive labels
  std::vector<SampleEval> samples;
};

/// Evaluates a trained model on held-out samples, first checking that the
/// test identities are disjoint from the model's training identities.
template <class R>
FoldResult evaluate_fold(trainer::FullModel<R>& m, const std::vector<int>& train_identities,
                         const Dataset& data, const std::vector<std::size_t>& test_indices) {
  std::set<int> train_ids(train_identities.begin(), train_identities.end());
  for (std::size_t i : test_indices)
    if (train_ids.count(data.identity(i)))
      throw std::invalid_argument("evaluate_fold: identity " +
                                  std::to_string(data.identity(i)) +
                                  " appears in both train and test sets");

  FoldResult r;
  r.samples = eval_forward(m, data, test_indices);
  std::vector<int> predicted, truth, labels;
  std::vector<double> scores;
  for (const auto& s : r.samples) {
    predicted.push_back(s.predicted);
    truth.push_back(s.label);
    scores.push_back(s.p_deceptive);
    labels.push_back(s.label);
  }
  r.acc = accuracy(predicted, truth);
  bool has_pos = std::any_of(labels.begin(), labels.end(), [](int y) { return y == 1; });
  if (has_pos) r.auc = pr_auc(scores, labels);
  return r;
}

// ---------------------------------------------------------------------------
// correlation-weight report
// ---------------------------------------------------------------------------

struct AlphaReport {
  std::array<double, 5> mean_truthful{};
  std::array<double, 5> mean_deceptive{};
  int n_truthful = 0;
  int n_deceptive = 0;
  double frac_deceptive_low_early = 0;  // fraction with alpha1 and alpha2 < 0.15

  double late_mass_gap() const {
    double dec = mean_deceptive[2] + mean_deceptive[3] + mean_deceptive[4];
    double tru = mean_truthful[2] + mean_truthful[3] + mean_truthful[4];
    return dec - tru;
  }
};

inline AlphaReport alpha_report_from_samples(const std::vector<SampleEval>& samples) {
  AlphaReport rep;
  int low_early = 0;
  for (const auto& s : samples) {
    if (s.label == 0) {
      ++rep.n_truthful;
      for (int j = 0; j < 5; ++j) rep.mean_truthful[j] += s.alpha[j];
    } else {
      ++rep.n_deceptive;
      for (int j = 0; j < 5; ++j) rep.mean_deceptive[j] += s.alpha[j];
      if (s.alpha[0] < 0.15 && s.alpha[1] < 0.15) ++low_early;
    }
  }
  for (int j = 0; j < 5; ++j) {
    if (rep.n_truthful) rep.mean_truthful[j] /= rep.n_truthful;
    if (rep.n_deceptive) rep.mean_deceptive[j] /= rep.n_deceptive;
  }
  if (rep.n_deceptive)
    rep.frac_deceptive_low_early = static_cast<double>(low_early) / rep.n_deceptive;
  return rep;
}

/// Per-class mean correlation weights over the given samples plus the
/// fraction of deceptive samples with both early weights below 0.15.
template <class R>
AlphaReport alpha_report(trainer::FullModel<R>& m, const Dataset& data,
                         const std::vector<std::size_t>& indices) {
  if (!m.train_cfg.flags.cl)
    throw std::invalid_argument("alpha_report: checkpoint was trained without cl");
  return alpha_report_from_samples(eval_forward(m, data, indices));
}

// ---------------------------------------------------------------------------
// parallel task runner
// ---------------------------------------------------------------------------

inline void run_parallel(int jobs, std::size_t n_tasks,
                         const std::function<void(std::size_t)>& task) {
  if (jobs < 1) jobs = 1;
  if (jobs == 1 || n_tasks <= 1) {
    for (std::size_t i = 0; i < n_tasks; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(jobs);
  for (int w = 0; w < jobs; ++w)
    pool.emplace_back([&, w]() {
      try {
        for (std::size_t i = next.fetch_add(1); i < n_tasks; i = next.fetch_add(1)) task(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// ablation suite
// ---------------------------------------------------------------------------

/// The six flag combinations in canonical row order.
inline std::vector<AblationFlags> table1_variants() {
  return {
      {true, false, false, false, false},  // Face
      {false, true, false, false, false},  // Motion
      {true, true, false, false, false},   // Face+Motion
      {true, true, true, false, false},    // Face+Motion+CL
      {true, true, true, true, false},     // Face+Motion+CL+ML
      {true, true, true, true, true},      // Face+Motion+CL+ML+AL
  };
}

struct RunOutput {
  std::size_t variant = 0;
  std::size_t seed_index = 0;
  std::size_t fold = 0;
  double acc = 0;
  std::optional<double> auc;
  AlphaReport alpha;
  trainer::TrainHistory history;
};

struct AblationRow {
  std::string name;
  double median_acc_pct = 0;   // median over seeds of the fold-mean ACC
  double median_auc_pct = 0;   // same for PR-AUC (folds without positives excluded)
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::vector<RunOutput> runs;  // every (variant, seed, fold) cell

  std::string to_csv() const {
    std::string out = "model,acc,auc\n";
    char buf[64];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof(buf), "%s,%.2f,%.2f\n", r.name.c_str(), r.median_acc_pct,
                    r.median_auc_pct);
      out += buf;
    }
    return out;
  }
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Trains and evaluates flag variants across all folds and seeds; retrains
/// from scratch per cell with seeds shared across variants. Fold tasks are
/// independent and run on the worker pool.
inline AblationResult ablation_suite(const TrainConfig& base_cfg,
                                     const model::ModelConfig& mcfg,
                                     const advaug::AlConfig& acfg, const Dataset& data,
                                     const FoldPlan& plan,
                                     const std::vector<std::uint64_t>& seeds, int jobs,
                                     std::vector<AblationFlags> variants = table1_variants()) {
  validate_fold_plan(plan, [&] {
    std::vector<int> ids;
    for (std::size_t i = 0; i < data.size(); ++i) ids.push_back(data.identity(i));
    return ids;
  }());

  const std::size_t n_tasks = variants.size() * seeds.size() * plan.sample_folds.size();
  AblationResult result;
  result.runs.resize(n_tasks);

  run_parallel(jobs, n_tasks, [&](std::size_t t) {
    const std::size_t folds_n = plan.sample_folds.size();
    const std::size_t variant = t / (seeds.size() * folds_n);
    const std::size_t seed_index = (t / folds_n) % seeds.size();
    const std::size_t fold = t % folds_n;

    TrainConfig cfg = base_cfg;
    cfg.flags = variants[variant];
    cfg.seed = seeds[seed_index];

    synthgen::AccessLoggedDataset view(data);
    const auto train_idx = plan.train_indices(fold);
    auto trained = trainer::train<float>(cfg, mcfg, acfg, view, train_idx);

    // protocol integrity: training must never have read a test-fold sample
    for (std::size_t i : plan.sample_folds[fold])
      if (view.was_accessed(i))
        throw std::runtime_error("ablation_suite: training accessed test sample " +
                                 std::to_string(i));

    auto fold_result = evaluate_fold(*trained.model, trained.train_identities, data,
                                     plan.sample_folds[fold]);
    RunOutput run;
    run.variant = variant;
    run.seed_index = seed_index;
    run.fold = fold;
    run.acc = fold_result.acc;
    run.auc = fold_result.auc;
    run.alpha = alpha_report_from_samples(fold_result.samples);
    run.history = std::move(trained.history);
    result.runs[t] = std::move(run);
  });

  for (std::size_t v = 0; v < variants.size(); ++v) {
    std::vector<double> acc_by_seed, auc_by_seed;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      double acc_sum = 0, auc_sum = 0;
      int n_folds = 0, n_auc = 0;
      for (const auto& run : result.runs)
        if (run.variant == v && run.seed_index == s) {
          acc_sum += run.acc;
          ++n_folds;
          if (run.auc) {
            auc_sum += *run.auc;
            ++n_auc;
          }
        }
      acc_by_seed.push_back(acc_sum / n_folds);
      if (n_auc) auc_by_seed.push_back(auc_sum / n_auc);
    }
    AblationRow row;
    row.name = variants[v].name();
    row.median_acc_pct = 100.0 * median(acc_by_seed);
    row.median_auc_pct = auc_by_seed.empty() ? 0.0 : 100.0 * median(auc_by_seed);
    result.rows.push_back(row);
  }
  return result;
}

// ---------------------------------------------------------------------------
// meta task-size sweep
// ---------------------------------------------------------------------------

struct PairSweepRow {
  int pairs = 0;
  double median_acc_pct = 0;
};

/// Trains ml-enabled models for each task size P with identical seeds and
/// reports the fold-mean accuracy (median over seeds).
inline std::vector<PairSweepRow> pair_sweep(const TrainConfig& base_cfg,
                                            const model::ModelConfig& mcfg,
                                            const advaug::AlConfig& acfg, const Dataset& data,
                                            const FoldPlan& plan,
                                            const std::vector<int>& sizes,
                                            const std::vector<std::uint64_t>& seeds,
                                            int jobs) {
  for (int p : sizes)
    if (p < 1 || p >= base_cfg.batch_size)
      throw std::invalid_argument("pair_sweep: every P must lie in [1, batch_size)");

  struct Cell {
    double acc = 0;
  };
  const std::size_t folds_n = plan.sample_folds.size();
  const std::size_t n_tasks = sizes.size() * seeds.size() * folds_n;
  std::vector<Cell> cells(n_tasks);

  run_parallel(jobs, n_tasks, [&](std::size_t t) {
    const std::size_t size_idx = t / (seeds.size() * folds_n);
    const std::size_t seed_index = (t / folds_n) % seeds.size();
    const std::size_t fold = t % folds_n;
    TrainConfig cfg = base_cfg;
    cfg.flags = {true, true, true, true, false};
    cfg.meta_pairs = sizes[size_idx];
    cfg.seed = seeds[seed_index];
    synthgen::AccessLoggedDataset view(data);
    auto trained = trainer::train<float>(cfg, mcfg, acfg, view, plan.train_indices(fold));
    cells[t].acc = evaluate_fold(*trained.model, trained.train_identities, data,
                                 plan.sample_folds[fold])
                       .acc;
  });

  std::vector<PairSweepRow> rows;
  for (std::size_t si = 0; si < sizes.size(); ++si) {
    std::vector<double> acc_by_seed;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      double sum = 0;
      for (std::size_t f = 0; f < folds_n; ++f) sum += cells[(si * seeds.size() + s) * folds_n + f].acc;
      acc_by_seed.push_back(sum / folds_n);
    }
    rows.push_back({sizes[si], 100.0 * median(acc_by_seed)});
  }
  return rows;
}

}  // namespace ffcsn::eval
