#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "ffcsn/synthgen.hpp"

using namespace ffcsn;
using namespace ffcsn::synthgen;
namespace fs = std::filesystem;

namespace {

GenConfig tiny_config() {
  GenConfig cfg;
  cfg.frame_hw = 16;
  return cfg;
}

// Test-side cue detector, independent of the generator internals: the cue
// frame of each episode third is the frame with maximal pixel energy.
int argmax_energy_frame(const VideoSample& s, bool face, int from, int to) {
  int best = from;
  double best_e = -1.0;
  const int hw = s.frame_hw;
  const int ch = face ? s.face_channels : s.flow_channels;
  for (int t = from; t < to; ++t) {
    const float* f = face ? s.face_frame(t) : s.flow_frame(t);
    double e = 0.0;
    for (int i = 0; i < ch * hw * hw; ++i) e += static_cast<double>(f[i]) * f[i];
    if (e > best_e) {
      best_e = e;
      best = t;
    }
  }
  return best;
}

std::vector<std::pair<int, int>> detect_cue_frames(const VideoSample& s) {
  std::vector<std::pair<int, int>> out;
  for (int k = 0; k < 3; ++k) {
    const int a = s.episode_len * k / 3;
    const int b = s.episode_len * (k + 1) / 3;
    out.emplace_back(argmax_energy_frame(s, true, a, b), argmax_energy_frame(s, false, a, b));
  }
  return out;
}

// Anisotropy statistic of the face cue blob: ratio of second moments along
// y and x around the peak pixel, averaged over channels.
double face_cue_anisotropy(const VideoSample& s, int frame) {
  const int hw = s.frame_hw;
  const float* f = s.face_frame(frame);
  // peak pixel on channel 0
  int py = 0, px = 0;
  float best = -1e30f;
  for (int y = 0; y < hw; ++y)
    for (int x = 0; x < hw; ++x)
      if (f[y * hw + x] > best) {
        best = f[y * hw + x];
        py = y;
        px = x;
      }
  double my = 0, mx = 0, w = 0;
  for (int y = std::max(0, py - 3); y <= std::min(hw - 1, py + 3); ++y)
    for (int x = std::max(0, px - 3); x <= std::min(hw - 1, px + 3); ++x) {
      const double v = std::max(0.0f, f[y * hw + x]);
      my += v * (y - py) * (y - py);
      mx += v * (x - px) * (x - px);
      w += v;
    }
  return (my + 1e-9) / (mx + 1e-9);
}

}  // namespace

TEST(RenderEpisode, TruthfulCuesShareFrameIndex) {
  GenConfig cfg = tiny_config();
  for (int trial = 0; trial < 8; ++trial) {
    Rng rng(100 + trial);
    auto s = render_episode(cfg, 3, 0, rng);
    for (auto [face_t, flow_t] : detect_cue_frames(s)) EXPECT_EQ(face_t, flow_t);
  }
}

TEST(RenderEpisode, DeceptiveLagAlwaysInConfiguredSet) {
  GenConfig cfg = tiny_config();
  std::set<int> seen;
  for (int trial = 0; trial < 20; ++trial) {
    Rng rng(200 + trial);
    auto s = render_episode(cfg, 5, 1, rng);
    for (auto [face_t, flow_t] : detect_cue_frames(s)) {
      const int lag = flow_t - face_t;
      EXPECT_TRUE(lag == 2 || lag == 3) << "lag " << lag;
      seen.insert(lag);
    }
  }
  // support is exactly {2,3}
  EXPECT_EQ(seen, (std::set<int>{2, 3}));
}

TEST(RenderEpisode, DeterministicGivenSeed) {
  GenConfig cfg = tiny_config();
  Rng r1(42), r2(42);
  auto a = render_episode(cfg, 7, 1, r1);
  auto b = render_episode(cfg, 7, 1, r2);
  EXPECT_EQ(a.face_frames, b.face_frames);
  EXPECT_EQ(a.flow_frames, b.flow_frames);
}

TEST(RenderEpisode, LagExceedingSegmentBoundsThrows) {
  GenConfig cfg = tiny_config();
  cfg.episode_len = 18;  // thirds of 6: anchor 0, lag up to 5 fits, 9 rejected by validate
  cfg.lag_deceptive = {9};
  Rng rng(1);
  EXPECT_THROW(render_episode(cfg, 0, 1, rng), std::invalid_argument);
}

TEST(RenderEpisode, InvalidIdentityThrows) {
  GenConfig cfg = tiny_config();
  Rng rng(1);
  EXPECT_THROW(render_episode(cfg, cfg.n_identities, 0, rng), std::invalid_argument);
}

TEST(RenderEpisode, FaceMarginalMatchesAcrossClassesWithoutLeak) {
  GenConfig cfg = tiny_config();
  cfg.leak_prob = 0.0;
  double sum_t = 0, sum_d = 0;
  const int n = 40;
  for (int i = 0; i < n; ++i) {
    Rng rt(1000 + i), rd(5000 + i);
    auto st = render_episode(cfg, 1, 0, rt);
    auto sd = render_episode(cfg, 1, 1, rd);
    for (auto [ft, lt] : detect_cue_frames(st)) sum_t += face_cue_anisotropy(st, ft);
    for (auto [fd, ld] : detect_cue_frames(sd)) sum_d += face_cue_anisotropy(sd, fd);
  }
  const double mean_t = sum_t / (3 * n), mean_d = sum_d / (3 * n);
  // cue-shape statistics match across classes when the leak is disabled
  EXPECT_NEAR(mean_t, mean_d, 0.1);
  EXPECT_NEAR(mean_t, 1.0, 0.15);
}

TEST(RenderEpisode, LeakSeparatesFaceCueShapes) {
  GenConfig cfg = tiny_config();
  cfg.leak_prob = 1.0;
  double sum_t = 0, sum_d = 0;
  const int n = 30;
  for (int i = 0; i < n; ++i) {
    Rng rt(2000 + i), rd(7000 + i);
    auto st = render_episode(cfg, 1, 0, rt);
    auto sd = render_episode(cfg, 1, 1, rd);
    for (auto [ft, lt] : detect_cue_frames(st)) sum_t += face_cue_anisotropy(st, ft);
    for (auto [fd, ld] : detect_cue_frames(sd)) sum_d += face_cue_anisotropy(sd, fd);
  }
  EXPECT_GT(sum_t / (3 * n), 1.3);
  EXPECT_LT(sum_d / (3 * n), 0.8);
}

TEST(GenerateDataset, DefaultSplitAndIdentities) {
  GenConfig cfg = tiny_config();
  const std::string dir = (fs::temp_directory_path() / "ffcsn_gen_default").string();
  fs::remove_all(dir);
  auto manifest = generate_dataset(cfg, 7, dir);
  ASSERT_EQ(manifest.records.size(), 104u);
  int truthful = 0;
  std::set<int> identities;
  std::map<int, std::set<int>> classes_by_identity;
  for (const auto& r : manifest.records) {
    truthful += r.label == 0;
    identities.insert(r.identity_id);
    classes_by_identity[r.identity_id].insert(r.label);
  }
  EXPECT_EQ(truthful, 50);
  EXPECT_EQ(identities.size(), 58u);
  int both = 0;
  for (const auto& [id, cls] : classes_by_identity) both += cls.size() == 2;
  EXPECT_GT(both, 0);  // same identity appears in both classes
  fs::remove_all(dir);
}

TEST(GenerateDataset, TwoVideosTwoIdentities) {
  GenConfig cfg = tiny_config();
  cfg.n_videos = 2;
  cfg.n_identities = 2;
  cfg.n_truthful = 1;
  const std::string dir = (fs::temp_directory_path() / "ffcsn_gen_two").string();
  fs::remove_all(dir);
  auto manifest = generate_dataset(cfg, 3, dir);
  ASSERT_EQ(manifest.records.size(), 2u);
  EXPECT_NE(manifest.records[0].identity_id, manifest.records[1].identity_id);
  fs::remove_all(dir);
}

TEST(GenerateDataset, SameSeedSameBytes) {
  GenConfig cfg = tiny_config();
  cfg.n_videos = 6;
  cfg.n_identities = 4;
  cfg.n_truthful = 3;
  const std::string d1 = (fs::temp_directory_path() / "ffcsn_gen_a").string();
  const std::string d2 = (fs::temp_directory_path() / "ffcsn_gen_b").string();
  fs::remove_all(d1);
  fs::remove_all(d2);
  generate_dataset(cfg, 11, d1);
  generate_dataset(cfg, 11, d2);
  for (const auto& entry : fs::directory_iterator(d1)) {
    const auto name = entry.path().filename();
    std::ifstream a(entry.path(), std::ios::binary), b(fs::path(d2) / name, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    EXPECT_EQ(sa, sb) << name;
  }
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST(ReadDataset, RoundTripsBitExactly) {
  GenConfig cfg = tiny_config();
  cfg.n_videos = 4;
  cfg.n_identities = 3;
  cfg.n_truthful = 2;
  const std::string dir = (fs::temp_directory_path() / "ffcsn_gen_rt").string();
  fs::remove_all(dir);
  generate_dataset(cfg, 5, dir);
  auto ds = read_dataset(dir + "/manifest.json");
  ASSERT_EQ(ds.samples.size(), 4u);

  // regenerate in memory and compare bit patterns
  Rng master(5);
  auto labels = assign_labels(cfg);
  for (int i = 0; i < 4; ++i) {
    Rng sample_rng = master.derive(0x5A, static_cast<std::uint64_t>(i));
    auto s = render_episode(cfg, i % cfg.n_identities, labels[i], sample_rng);
    EXPECT_EQ(ds.samples[i].face_frames, s.face_frames);
    EXPECT_EQ(ds.samples[i].flow_frames, s.flow_frames);
  }
  fs::remove_all(dir);
}

TEST(ReadDataset, TruncatedFileNamesFile) {
  GenConfig cfg = tiny_config();
  cfg.n_videos = 2;
  cfg.n_identities = 2;
  cfg.n_truthful = 1;
  const std::string dir = (fs::temp_directory_path() / "ffcsn_gen_trunc").string();
  fs::remove_all(dir);
  generate_dataset(cfg, 9, dir);
  const std::string victim = dir + "/sample_0001.ffcs";
  const auto size = fs::file_size(victim);
  fs::resize_file(victim, size / 2);
  try {
    read_dataset(dir + "/manifest.json");
    FAIL() << "expected truncation error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("sample_0001.ffcs"), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

TEST(ReadDataset, MissingManifestThrows) {
  EXPECT_THROW(read_dataset("/nonexistent/manifest.json"), std::runtime_error);
}

TEST(GenerateDataset, UnwritableDirectoryThrows) {
  GenConfig cfg = tiny_config();
  EXPECT_THROW(generate_dataset(cfg, 1, "/proc/nope/out"), std::runtime_error);
}

TEST(AccessLog, RecordsTouchedSamples) {
  GenConfig cfg = tiny_config();
  cfg.n_videos = 3;
  cfg.n_identities = 3;
  cfg.n_truthful = 2;
  const std::string dir = (fs::temp_directory_path() / "ffcsn_gen_log").string();
  fs::remove_all(dir);
  generate_dataset(cfg, 2, dir);
  auto ds = read_dataset(dir + "/manifest.json");
  AccessLoggedDataset view(ds);
  view.get(1);
  EXPECT_FALSE(view.was_accessed(0));
  EXPECT_TRUE(view.was_accessed(1));
  EXPECT_FALSE(view.was_accessed(2));
  fs::remove_all(dir);
}

TEST(Container, ScalarAndRoundTrip) {
  TensorContainer c;
  c.put_f64("meta/epoch", {1}, {42.0});
  c.put_f32("w", {2, 2}, {1, 2, 3, 4});
  const std::string path = (fs::temp_directory_path() / "ffcsn_container.ffcs").string();
  c.write(path);
  auto c2 = TensorContainer::read(path);
  EXPECT_EQ(c2.get_scalar("meta/epoch"), 42.0);
  EXPECT_EQ(c2.get_f32("w"), (std::vector<float>{1, 2, 3, 4}));
  EXPECT_THROW(c2.get("missing"), std::runtime_error);
  // save -> load -> save is byte-identical
  const std::string path2 = (fs::temp_directory_path() / "ffcsn_container2.ffcs").string();
  c2.write(path2);
  std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
  EXPECT_EQ(sa, sb);
  fs::remove(path);
  fs::remove(path2);
}
