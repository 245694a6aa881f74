#include <gtest/gtest.h>

#include <cmath>

#include "ffcsn/gradcheck.hpp"
#include "ffcsn/model.hpp"

using namespace ffcsn;
using namespace ffcsn::model;

using TD = Tensor<double>;

namespace {

TensorPtr<double> randn(Shape shape, Rng& rng, double scale = 1.0) {
  auto t = TD::zeros(shape);
  for (auto& v : t->data()) v = rng.gaussian() * scale;
  return t;
}

synthgen::VideoSample dummy_video(int len = 45, int hw = 16) {
  synthgen::VideoSample v;
  v.episode_len = len;
  v.frame_hw = hw;
  v.face_channels = 3;
  v.flow_channels = 2;
  v.face_frames.assign(static_cast<std::size_t>(len) * 3 * hw * hw, 0.0f);
  v.flow_frames.assign(static_cast<std::size_t>(len) * 2 * hw * hw, 0.0f);
  return v;
}

void zero_params_with_prefix(std::vector<Parameter<double>*> params, const std::string& prefix) {
  for (auto* p : params)
    if (p->name.rfind(prefix, 0) == 0)
      for (auto& v : p->value->data()) v = 0.0;
}

ModelConfig test_config() {
  ModelConfig c = ModelConfig::gradcheck_tiny();
  c.frame_hw = 16;
  c.spatial_channels = {2, 3, 3};
  c.temporal_channels = {2, 3, 3};
  c.d_s = 32;
  c.d_t = 16;
  c.corr_hidden = 16;
  c.bottleneck = 32;
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// snippet sampling
// ---------------------------------------------------------------------------

TEST(SampleSnippets, EqualDurationSegments) {
  auto video = dummy_video(45);
  Rng rng(1);
  auto starts = sample_snippets(video, 3, rng, false);
  ASSERT_EQ(starts.size(), 3u);
  EXPECT_GE(starts[0], 0);
  EXPECT_LE(starts[0], 10);
  EXPECT_GE(starts[1], 15);
  EXPECT_LE(starts[1], 25);
  EXPECT_GE(starts[2], 30);
  EXPECT_LE(starts[2], 40);
  EXPECT_EQ(segment_bounds(45, 0, 3), (std::pair<int, int>{0, 15}));
  EXPECT_EQ(segment_bounds(45, 1, 3), (std::pair<int, int>{15, 30}));
  EXPECT_EQ(segment_bounds(45, 2, 3), (std::pair<int, int>{30, 45}));
}

TEST(SampleSnippets, SingleSegmentCoversEpisode) {
  auto video = dummy_video(45);
  Rng rng(2);
  auto starts = sample_snippets(video, 1, rng, false);
  ASSERT_EQ(starts.size(), 1u);
  EXPECT_GE(starts[0], 0);
  EXPECT_LE(starts[0], 40);
}

TEST(SampleSnippets, EvalModeDeterministic) {
  auto video = dummy_video(45);
  Rng r1(3), r2(99);
  auto a = sample_snippets(video, 3, r1, true);
  auto b = sample_snippets(video, 3, r2, true);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a[0], 5);  // segment-center snippet of [0,15)
}

TEST(SampleSnippets, TooShortEpisodeThrows) {
  auto video = dummy_video(17);
  Rng rng(4);
  EXPECT_THROW(sample_snippets(video, 3, rng, false), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// encoders
// ---------------------------------------------------------------------------

TEST(EncodeSpatial, ZeroInputZeroParamsGivesZeroVector) {
  Rng rng(5);
  auto cfg = test_config();
  CrossStreamModel<double> m(cfg, {true, true, true, false, false}, rng);
  zero_params_with_prefix(m.parameters(), "spatial.");
  auto x = TD::zeros({2, 3, 16, 16});
  auto s = m.encode_spatial(x, true);
  for (double v : s->data()) EXPECT_EQ(v, 0.0);
}

TEST(EncodeSpatial, OutputLengthMatchesConfiguredDims) {
  for (int hw : {16, 32, 64}) {
    Rng rng(6);
    auto cfg = test_config();
    cfg.frame_hw = hw;
    CrossStreamModel<double> m(cfg, {true, false, false, false, false}, rng);
    auto x = randn({2, 3, static_cast<std::size_t>(hw), static_cast<std::size_t>(hw)}, rng);
    auto s = m.encode_spatial(x, true);
    EXPECT_EQ(s->shape(), (Shape{2, static_cast<std::size_t>(cfg.d_s)}));
  }
}

TEST(EncodeSpatial, GradCheckThroughEncoder) {
  Rng rng(7);
  auto cfg = ModelConfig::gradcheck_tiny();
  CrossStreamModel<double> m(cfg, {true, false, false, false, false}, rng);
  auto x = randn({2, 3, 8, 8}, rng);
  std::vector<Parameter<double>*> params;
  for (auto* p : m.parameters())
    if (p->name.rfind("spatial.", 0) == 0) params.push_back(p);
  randomize_for_gradcheck(params, rng);
  auto objective = [&]() { return mean_all(square(m.encode_spatial(x, true))); };
  auto report = grad_check_fn<double>(params, objective, 1e-5);
  EXPECT_LE(report.max_relative_error, 1e-4) << report.worst_parameter;
}

TEST(EncodeTemporal, PermutingFramesPermutesRows) {
  Rng rng(8);
  auto cfg = test_config();
  CrossStreamModel<double> m(cfg, {false, true, false, false, false}, rng);
  auto frames = randn({5, 2, 16, 16}, rng);
  auto t = m.encode_temporal(frames, true);
  ASSERT_EQ(t->shape(), (Shape{1, 5, static_cast<std::size_t>(cfg.d_t)}));

  const std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
  auto permuted = index_select_rows(frames, perm);
  auto t2 = m.encode_temporal(permuted, true);
  // batch-norm statistics are permutation-invariant, so rows permute
  // identically (up to summation order)
  for (std::size_t j = 0; j < 5; ++j)
    for (int d = 0; d < cfg.d_t; ++d)
      EXPECT_NEAR(t2->data()[j * cfg.d_t + d], t->data()[perm[j] * cfg.d_t + d], 1e-12);
}

TEST(EncodeTemporal, ZeroFramesZeroHeadGivesZeroMatrix) {
  Rng rng(9);
  auto cfg = test_config();
  CrossStreamModel<double> m(cfg, {false, true, false, false, false}, rng);
  zero_params_with_prefix(m.parameters(), "temporal.");
  auto t = m.encode_temporal(TD::zeros({10, 2, 16, 16}), true);
  EXPECT_EQ(t->shape(), (Shape{2, 5, static_cast<std::size_t>(cfg.d_t)}));
  for (double v : t->data()) EXPECT_EQ(v, 0.0);
}

// ---------------------------------------------------------------------------
// correlate / fuse / classify
// ---------------------------------------------------------------------------

TEST(Correlate, ZeroInitGivesUniformAlpha) {
  Rng rng(10);
  auto cfg = test_config();
  CrossStreamModel<double> m(cfg, {true, true, true, false, false}, rng);
  zero_params_with_prefix(m.parameters(), "corr.");
  auto s = randn({3, static_cast<std::size_t>(cfg.d_s)}, rng);
  auto t = randn({3, 5, static_cast<std::size_t>(cfg.d_t)}, rng);
  auto alpha = m.correlate(s, t);
  for (double v : alpha->data()) EXPECT_NEAR(v, 0.2, 1e-12);
}

TEST(Correlate, SimplexForRandomInputs) {
  Rng rng(11);
  auto cfg = test_config();
  CrossStreamModel<double> m(cfg, {true, true, true, false, false}, rng);
  for (int trial = 0; trial < 50; ++trial) {
    auto s = randn({2, static_cast<std::size_t>(cfg.d_s)}, rng, 3.0);
    auto t = randn({2, 5, static_cast<std::size_t>(cfg.d_t)}, rng, 3.0);
    auto alpha = m.correlate(s, t);
    for (std::size_t n = 0; n < 2; ++n) {
      double sum = 0;
      for (std::size_t j = 0; j < 5; ++j) {
        const double a = alpha->data()[n * 5 + j];
        EXPECT_GE(a, 0.0);
        sum += a;
      }
      EXPECT_NEAR(sum, 1.0, 1e-6);
    }
  }
}

TEST(Correlate, LogitShiftLeavesAlphaUnchanged) {
  Rng rng(12);
  auto cfg = test_config();
  CrossStreamModel<double> m(cfg, {true, true, true, false, false}, rng);
  auto s = randn({1, static_cast<std::size_t>(cfg.d_s)}, rng);
  auto t = randn({1, 5, static_cast<std::size_t>(cfg.d_t)}, rng);
  auto a1 = m.correlate(s, t);
  for (auto* p : m.parameters())
    if (p->name == "corr.fc2.bias")
      for (auto& v : p->value->data()) v += 7.5;
  auto a2 = m.correlate(s, t);
  for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(a1->data()[j], a2->data()[j], 1e-9);
}

TEST(Fuse, OneHotAlphaSelectsSingleFrame) {
  Rng rng(13);
  auto cfg = test_config();
  CrossStreamModel<double> m(cfg, {true, true, true, false, false}, rng);
  auto s = randn({1, static_cast<std::size_t>(cfg.d_s)}, rng);
  auto t = randn({1, 5, static_cast<std::size_t>(cfg.d_t)}, rng);
  auto alpha = TD::create({1, 5}, {0, 0, 1, 0, 0});
  auto fused = m.fuse(s, t, alpha);
  ASSERT_EQ(fused->shape(), (Shape{1, static_cast<std::size_t>(cfg.d_s + cfg.d_t)}));
  for (int d = 0; d < cfg.d_t; ++d)
    EXPECT_DOUBLE_EQ(fused->data()[cfg.d_s + d], t->data()[2 * cfg.d_t + d]);
}

TEST(Fuse, UniformAlphaMatchesMeanPath) {
  Rng rng(14);
  auto cfg = test_config();
  CrossStreamModel<double> m(cfg, {true, true, true, false, false}, rng);
  auto s = randn({1, static_cast<std::size_t>(cfg.d_s)}, rng);
  auto t = randn({1, 5, static_cast<std::size_t>(cfg.d_t)}, rng);
  auto fused = m.fuse(s, t, CrossStreamModel<double>::uniform_alpha(1));
  for (int d = 0; d < cfg.d_t; ++d) {
    double manual = 0;
    for (int j = 0; j < 5; ++j) manual += 0.2 * t->data()[j * cfg.d_t + d];
    EXPECT_NEAR(fused->data()[cfg.d_s + d], manual, 1e-12);
  }
}

TEST(Fuse, FaceOnlyDimension) {
  Rng rng(15);
  auto cfg = test_config();
  CrossStreamModel<double> m(cfg, {true, false, false, false, false}, rng);
  EXPECT_EQ(m.fused_dim(), static_cast<std::size_t>(cfg.d_s));
  auto s = randn({2, static_cast<std::size_t>(cfg.d_s)}, rng);
  auto fused = m.fuse(s, nullptr, nullptr);
  EXPECT_EQ(fused->shape(), (Shape{2, static_cast<std::size_t>(cfg.d_s)}));
}

TEST(ClassifySnippet, ShapesAndZeroInit) {
  Rng rng(16);
  auto cfg = ModelConfig::tiny();
  CrossStreamModel<double> m(cfg, {true, true, true, false, false}, rng);
  auto fused = randn({3, m.fused_dim()}, rng);
  auto [logits, bottleneck] = m.classify_snippet(fused);
  EXPECT_EQ(logits->shape(), (Shape{3, 2}));
  EXPECT_EQ(bottleneck->shape(), (Shape{3, 256}));  // 256-d by default

  zero_params_with_prefix(m.parameters(), "head.");
  auto [logits0, b0] = m.classify_snippet(fused);
  for (double v : logits0->data()) EXPECT_EQ(v, 0.0);
}

// ---------------------------------------------------------------------------
// consensus and base loss
// ---------------------------------------------------------------------------

TEST(Consensus, SingleSnippetIdentity) {
  auto logits = TD::create({1, 2}, {0.3, -0.7});
  auto e = consensus(logits);
  EXPECT_DOUBLE_EQ(e->data()[0], 0.3);
  EXPECT_DOUBLE_EQ(e->data()[1], -0.7);
}

TEST(Consensus, ArithmeticMean) {
  auto logits = TD::create({3, 2}, {1, 0, 0, 1, 2, -1});
  auto e = consensus(logits);
  EXPECT_DOUBLE_EQ(e->data()[0], 1.0);
  EXPECT_DOUBLE_EQ(e->data()[1], 0.0);
}

TEST(Consensus, IdenticalSnippets) {
  auto logits = TD::create({4, 2}, {0.5, 1.5, 0.5, 1.5, 0.5, 1.5, 0.5, 1.5});
  auto e = consensus(logits);
  EXPECT_DOUBLE_EQ(e->data()[0], 0.5);
  EXPECT_DOUBLE_EQ(e->data()[1], 1.5);
}

TEST(LossBase, UniformCase) {
  auto e = TD::create({2}, {0.0, 0.0});
  auto loss = loss_base<double>({1, 0}, e);
  EXPECT_NEAR(loss->item(), std::log(2.0), 1e-12);
}

TEST(LossBase, SaturatedCase) {
  auto e = TD::create({2}, {30.0, -30.0});
  auto loss = loss_base<double>({1, 0}, e);
  EXPECT_LE(loss->item(), 1e-9);
}

// Direct naive evaluation of the loss formula as an independent oracle.
TEST(LossBase, MatchesNaiveFormulaOn100RandomInputs) {
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t nc = 2 + rng.uniform_int(4);
    std::vector<double> e_vals(nc);
    for (auto& v : e_vals) v = rng.gaussian() * 3.0;
    std::vector<double> y(nc, 0.0);
    y[rng.uniform_int(nc)] = 1.0;

    double z = 0.0;
    for (double v : e_vals) z += std::exp(v);
    double naive = 0.0;
    for (std::size_t i = 0; i < nc; ++i) naive -= y[i] * (e_vals[i] - std::log(z));

    auto e = TD::create({nc}, e_vals);
    auto loss = loss_base<double>(y, e);
    EXPECT_NEAR(loss->item(), naive, 1e-10);
  }
}

TEST(LossBase, InvariantToConstantShift) {
  Rng rng(18);
  auto e_vals = std::vector<double>{0.4, -1.2};
  auto e = TD::create({2}, e_vals);
  auto shifted = TD::create({2}, {e_vals[0] + 100.0, e_vals[1] + 100.0});
  EXPECT_NEAR(loss_base<double>({0, 1}, e)->item(),
              loss_base<double>({0, 1}, shifted)->item(), 1e-9);
}

// ---------------------------------------------------------------------------
// full forward
// ---------------------------------------------------------------------------

TEST(ModelForward, EvalModeDeterministic) {
  Rng rng(19);
  auto cfg = test_config();
  CrossStreamModel<double> m(cfg, {true, true, true, false, false}, rng);
  Rng drng(20);
  auto faces = randn({6, 3, 16, 16}, drng);
  auto flows = randn({30, 2, 16, 16}, drng);
  NoGradGuard no_grad;
  auto r1 = m.forward(faces, flows, 2, 3, false);
  auto r2 = m.forward(faces, flows, 2, 3, false);
  EXPECT_EQ(r1.consensus_logits->data(), r2.consensus_logits->data());
}

TEST(ModelForward, FusedDimExactUnderClAndNoCl) {
  for (bool cl : {true, false}) {
    Rng rng(21);
    auto cfg = test_config();
    CrossStreamModel<double> m(cfg, {true, true, cl, false, false}, rng);
    EXPECT_EQ(m.fused_dim(), static_cast<std::size_t>(cfg.d_s + cfg.d_t));
  }
}

// End-to-end gradient check: encoders -> correlate -> fuse -> classify ->
// consensus -> base loss, on the tiny configuration.
TEST(ModelForward, EndToEndGradCheck) {
  Rng rng(22);
  auto cfg = test_config();  // H=W=16, d_s=32, d_t=16
  CrossStreamModel<double> m(cfg, {true, true, true, false, false}, rng);
  Rng drng(23);
  auto faces = randn({2, 3, 16, 16}, drng);
  auto flows = randn({10, 2, 16, 16}, drng);
  auto onehot = one_hot<double>({1}, 2);
  auto params = m.parameters();
  randomize_for_gradcheck(params, rng);
  auto objective = [&]() {
    auto r = m.forward(faces, flows, 1, 2, true);
    return softmax_cross_entropy_mean(r.consensus_logits, onehot);
  };
  auto report = grad_check_fn<double>(params, objective, 1e-5);
  EXPECT_LE(report.max_relative_error, 1e-4) << report.worst_parameter;
}

TEST(GatherSnippets, ShapesAndContent) {
  auto v1 = dummy_video();
  auto v2 = dummy_video();
  v1.face_frames[0] = 3.5f;                      // frame 0, channel 0, pixel 0
  v2.flow_frames[2 * 2 * 16 * 16 + 5] = -1.5f;   // frame 2, channel 0, pixel 5
  std::vector<const synthgen::VideoSample*> vids = {&v1, &v2};
  std::vector<std::vector<int>> starts = {{0, 20}, {2, 30}};
  auto [faces, flows] = gather_snippets<double>(vids, starts, true, true);
  EXPECT_EQ(faces->shape(), (Shape{4, 3, 16, 16}));
  EXPECT_EQ(flows->shape(), (Shape{20, 2, 16, 16}));
  EXPECT_DOUBLE_EQ(faces->data()[0], 3.5);
  // video 2, snippet 0 starts at frame 2 -> its first flow frame is frame 2
  EXPECT_DOUBLE_EQ(flows->data()[(2 * 5 + 0) * 2 * 256 + 5], -1.5);
}
