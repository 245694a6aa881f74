#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ffcsn/container.hpp"
#include "ffcsn/rng.hpp"

// Synthetic episode generator. Each episode carries one face-cue / flow-cue
// event per third of the episode; truthful samples fire both cues on the
// same frame while deceptive samples delay the flow cue by the configured
// lag. An optional weak content perturbation on the cues (gated by
// leak_prob) gives the individual streams a readable signal so stream
// fusion has something to combine; with leak_prob = 0 the only class signal
// is the cross-stream lag.

namespace ffcsn::synthgen {

constexpr std::size_t kSnippetLen = 5;  // flow frames matched to one face frame
constexpr float kCueAmplitude = 1.0f;
constexpr float kCueSigma = 1.5f;       // blob of ~3 px radius
constexpr int kCueRadius = 3;
constexpr float kTextureAmplitude = 0.05f;
constexpr float kFaceLeakStretch = 0.5f;     // anisotropy of leaked face cues
constexpr float kFlowLeakChannelSkew = 0.5f; // channel imbalance of leaked flow cues

struct GenConfig {
  int n_identities = 58;
  int n_videos = 104;
  int n_truthful = 50;
  int episode_len = 45;
  int frame_hw = 32;
  int face_channels = 3;
  int flow_channels = 2;
  int lag_truthful = 0;  // fixed by construction
  std::vector<int> lag_deceptive = {2, 3};
  double leak_prob = 0.65;
  double noise_std = 0.1;

  void validate() const {
    if (n_identities <= 0 || n_videos <= 0 || episode_len <= 0 || frame_hw <= 0)
      throw std::invalid_argument("gen config: sizes must be positive");
    if (n_videos < n_identities)
      throw std::invalid_argument("gen config: n_videos must be >= n_identities");
    if (n_truthful < 0 || n_truthful > n_videos)
      throw std::invalid_argument("gen config: n_truthful out of range");
    if (leak_prob < 0.0 || leak_prob > 1.0)
      throw std::invalid_argument("gen config: leak_prob must lie in [0,1]");
    if (lag_deceptive.empty())
      throw std::invalid_argument("gen config: lag_deceptive must be non-empty");
    const int seg = episode_len / 3;
    for (int lag : lag_deceptive)
      if (lag <= 0 || lag >= seg)
        throw std::invalid_argument("gen config: deceptive lag " + std::to_string(lag) +
                                    " exceeds segment bounds (segment length " +
                                    std::to_string(seg) + ")");
    if (frame_hw < 2 * kCueRadius + 2)
      throw std::invalid_argument("gen config: frame too small for cue blobs");
  }

  int n_deceptive() const { return n_videos - n_truthful; }
  std::size_t face_frame_size() const {
    return static_cast<std::size_t>(face_channels) * frame_hw * frame_hw;
  }
  std::size_t flow_frame_size() const {
    return static_cast<std::size_t>(flow_channels) * frame_hw * frame_hw;
  }
};

inline void to_json(nlohmann::json& j, const GenConfig& c) {
  j = nlohmann::json{{"n_identities", c.n_identities}, {"n_videos", c.n_videos},
                     {"n_truthful", c.n_truthful},     {"episode_len", c.episode_len},
                     {"frame_hw", c.frame_hw},         {"face_channels", c.face_channels},
                     {"flow_channels", c.flow_channels}, {"lag_truthful", c.lag_truthful},
                     {"lag_deceptive", c.lag_deceptive}, {"leak_prob", c.leak_prob},
                     {"noise_std", c.noise_std}};
}

inline void from_json(const nlohmann::json& j, GenConfig& c) {
  j.at("n_identities").get_to(c.n_identities);
  j.at("n_videos").get_to(c.n_videos);
  j.at("n_truthful").get_to(c.n_truthful);
  j.at("episode_len").get_to(c.episode_len);
  j.at("frame_hw").get_to(c.frame_hw);
  j.at("face_channels").get_to(c.face_channels);
  j.at("flow_channels").get_to(c.flow_channels);
  j.at("lag_truthful").get_to(c.lag_truthful);
  j.at("lag_deceptive").get_to(c.lag_deceptive);
  j.at("leak_prob").get_to(c.leak_prob);
  j.at("noise_std").get_to(c.noise_std);
}

/// One synthetic episode. Frames are stored flat, frame-major:
/// face_frames[L * face_channels * H * W], flow_frames[L * flow_channels * H * W].
struct VideoSample {
  int identity_id = 0;
  int label = 0;  // 0 = truthful, 1 = deceptive
  int episode_len = 0;
  int frame_hw = 0;
  int face_channels = 0;
  int flow_channels = 0;
  std::vector<float> face_frames;
  std::vector<float> flow_frames;

  const float* face_frame(int t) const {
    return face_frames.data() +
           static_cast<std::size_t>(t) * face_channels * frame_hw * frame_hw;
  }
  const float* flow_frame(int t) const {
    return flow_frames.data() +
           static_cast<std::size_t>(t) * flow_channels * frame_hw * frame_hw;
  }
};

namespace detail {

inline void stamp_blob(float* plane, int hw, int cy, int cx, float amp, float sig_y,
                       float sig_x) {
  for (int y = std::max(0, cy - kCueRadius); y <= std::min(hw - 1, cy + kCueRadius); ++y)
    for (int x = std::max(0, cx - kCueRadius); x <= std::min(hw - 1, cx + kCueRadius); ++x) {
      const float dy = static_cast<float>(y - cy) / sig_y;
      const float dx = static_cast<float>(x - cx) / sig_x;
      plane[y * hw + x] += amp * std::exp(-0.5f * (dy * dy + dx * dx));
    }
}

/// Segment boundary of the i-th third (or, generally, k-th of K segments).
inline int segment_start(int episode_len, int k, int n_segments) {
  return static_cast<int>((static_cast<long>(episode_len) * k) / n_segments);
}

// Cue anchor frame of a segment: the start of the centered length-5 window,
// so deterministic center snippets observe the cues. A one-frame jitter
// keeps the position from being constant.
inline int cue_anchor(int seg_start, int seg_len) {
  return seg_start + (seg_len - static_cast<int>(kSnippetLen)) / 2;
}

constexpr std::uint64_t kTagIdentity = 0x1D;
constexpr std::uint64_t kTagSample = 0x5A;

}  // namespace detail

/// Fixed per-identity texture pattern added to every face frame; a pure
/// function of the identity id so identity leakage across folds is testable.
inline std::vector<float> identity_texture(const GenConfig& cfg, int identity_id) {
  Rng rng = Rng(0x7e87).derive(detail::kTagIdentity, static_cast<std::uint64_t>(identity_id));
  std::vector<float> tex(cfg.face_frame_size());
  for (auto& v : tex) v = static_cast<float>(rng.gaussian()) * kTextureAmplitude;
  return tex;
}

/// Renders one labeled episode. Per third: a face-cue blob at frame t and a
/// flow-cue blob at t + lag (lag 0 for truthful, drawn from lag_deceptive
/// otherwise); with probability leak_prob each cue carries a weak
/// class-dependent perturbation; identity texture and Gaussian pixel noise
/// are added throughout.
inline VideoSample render_episode(const GenConfig& cfg, int identity_id, int label, Rng& rng) {
  cfg.validate();
  if (identity_id < 0 || identity_id >= cfg.n_identities)
    throw std::invalid_argument("render_episode: identity_id out of range");
  if (label != 0 && label != 1)
    throw std::invalid_argument("render_episode: label must be 0 or 1");

  const int L = cfg.episode_len, hw = cfg.frame_hw;
  VideoSample s;
  s.identity_id = identity_id;
  s.label = label;
  s.episode_len = L;
  s.frame_hw = hw;
  s.face_channels = cfg.face_channels;
  s.flow_channels = cfg.flow_channels;
  s.face_frames.assign(static_cast<std::size_t>(L) * cfg.face_frame_size(), 0.0f);
  s.flow_frames.assign(static_cast<std::size_t>(L) * cfg.flow_frame_size(), 0.0f);

  for (int k = 0; k < 3; ++k) {
    const int seg_start = detail::segment_start(L, k, 3);
    const int seg_end = detail::segment_start(L, k + 1, 3);
    const int seg_len = seg_end - seg_start;
    if (seg_len < static_cast<int>(kSnippetLen))
      throw std::invalid_argument("render_episode: segment shorter than a snippet");
    const int anchor = detail::cue_anchor(seg_start, seg_len);
    const int t = anchor + static_cast<int>(rng.uniform_int(2));
    const int lag =
        label == 0 ? cfg.lag_truthful
                   : cfg.lag_deceptive[rng.uniform_int(cfg.lag_deceptive.size())];
    if (t + lag >= seg_end)
      throw std::invalid_argument("render_episode: lag " + std::to_string(lag) +
                                  " exceeds segment bounds");

    const int margin = kCueRadius;
    const int cy_f = margin + static_cast<int>(rng.uniform_int(hw - 2 * margin));
    const int cx_f = margin + static_cast<int>(rng.uniform_int(hw - 2 * margin));
    const int cy_m = margin + static_cast<int>(rng.uniform_int(hw - 2 * margin));
    const int cx_m = margin + static_cast<int>(rng.uniform_int(hw - 2 * margin));
    const bool face_leak = rng.uniform() < cfg.leak_prob;
    const bool flow_leak = rng.uniform() < cfg.leak_prob;

    // face cue: isotropic blob, anisotropic (axis by class) when leaked
    float sig_y = kCueSigma, sig_x = kCueSigma;
    if (face_leak) {
      const float stretch = 1.0f + kFaceLeakStretch;
      if (label == 0) {
        sig_y = kCueSigma * stretch;
        sig_x = kCueSigma / stretch;
      } else {
        sig_y = kCueSigma / stretch;
        sig_x = kCueSigma * stretch;
      }
    }
    for (int c = 0; c < cfg.face_channels; ++c) {
      float* plane =
          s.face_frames.data() + (static_cast<std::size_t>(t) * cfg.face_channels + c) * hw * hw;
      detail::stamp_blob(plane, hw, cy_f, cx_f, kCueAmplitude, sig_y, sig_x);
    }

    // flow cue: equal-channel blob, channel-skewed (sign by class) when leaked
    for (int c = 0; c < cfg.flow_channels; ++c) {
      float amp = kCueAmplitude;
      if (flow_leak && cfg.flow_channels >= 2) {
        const float skew = (c % 2 == 0) ? kFlowLeakChannelSkew : -kFlowLeakChannelSkew;
        amp *= label == 0 ? 1.0f + skew : 1.0f - skew;
      }
      float* plane = s.flow_frames.data() +
                     (static_cast<std::size_t>(t + lag) * cfg.flow_channels + c) * hw * hw;
      detail::stamp_blob(plane, hw, cy_m, cx_m, amp, kCueSigma, kCueSigma);
    }
  }

  // identity texture on every face frame
  const auto tex = identity_texture(cfg, identity_id);
  for (int t = 0; t < L; ++t) {
    float* frame = s.face_frames.data() + static_cast<std::size_t>(t) * cfg.face_frame_size();
    for (std::size_t i = 0; i < tex.size(); ++i) frame[i] += tex[i];
  }

  // background noise throughout
  const float noise = static_cast<float>(cfg.noise_std);
  for (auto& v : s.face_frames) v += static_cast<float>(rng.gaussian()) * noise;
  for (auto& v : s.flow_frames) v += static_cast<float>(rng.gaussian()) * noise;
  return s;
}

struct SampleRecord {
  std::string file;
  int identity_id = 0;
  int label = 0;
};

struct DatasetManifest {
  int version = 1;
  GenConfig gen_config;
  std::uint64_t seed = 0;
  std::vector<SampleRecord> records;
};

/// Deterministic label assignment: alternate classes and flip parity each
/// identity cycle so identities own videos of both classes, then adjust the
/// tail to hit the declared truthful/deceptive split.
inline std::vector<int> assign_labels(const GenConfig& cfg) {
  const int n = cfg.n_videos;
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) labels[i] = (i + i / cfg.n_identities) % 2;
  int ones = 0;
  for (int v : labels) ones += v;
  const int target = cfg.n_deceptive();
  for (int i = n - 1; i >= 0 && ones != target; --i) {
    if (ones < target && labels[i] == 0) {
      labels[i] = 1;
      ++ones;
    } else if (ones > target && labels[i] == 1) {
      labels[i] = 0;
      --ones;
    }
  }
  return labels;
}

inline std::string sample_file_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "sample_%04d.ffcs", index);
  return buf;
}

/// Renders and writes the whole dataset under `out_dir`: one container file
/// per sample plus manifest.json. A pure function of (cfg, seed).
inline DatasetManifest generate_dataset(const GenConfig& cfg, std::uint64_t seed,
                                        const std::string& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (!fs::is_directory(out_dir))
    throw std::runtime_error("generate_dataset: cannot create output directory '" + out_dir +
                             "'");

  DatasetManifest manifest;
  manifest.gen_config = cfg;
  manifest.seed = seed;

  const auto labels = assign_labels(cfg);
  Rng master(seed);
  for (int i = 0; i < cfg.n_videos; ++i) {
    const int identity = i % cfg.n_identities;
    Rng sample_rng = master.derive(detail::kTagSample, static_cast<std::uint64_t>(i));
    VideoSample s = render_episode(cfg, identity, labels[i], sample_rng);

    TensorContainer c;
    c.put_f32("face_frames",
              {static_cast<std::size_t>(cfg.episode_len),
               static_cast<std::size_t>(cfg.face_channels),
               static_cast<std::size_t>(cfg.frame_hw), static_cast<std::size_t>(cfg.frame_hw)},
              s.face_frames);
    c.put_f32("flow_frames",
              {static_cast<std::size_t>(cfg.episode_len),
               static_cast<std::size_t>(cfg.flow_channels),
               static_cast<std::size_t>(cfg.frame_hw), static_cast<std::size_t>(cfg.frame_hw)},
              s.flow_frames);
    const std::string file = sample_file_name(i);
    c.write((fs::path(out_dir) / file).string());
    manifest.records.push_back({file, identity, labels[i]});
  }

  nlohmann::json j;
  j["version"] = manifest.version;
  j["seed"] = manifest.seed;
  j["gen_config"] = cfg;
  auto& recs = j["records"] = nlohmann::json::array();
  for (const auto& r : manifest.records)
    recs.push_back({{"file", r.file}, {"identity_id", r.identity_id}, {"label", r.label}});
  std::ofstream out(fs::path(out_dir) / "manifest.json");
  if (!out) throw std::runtime_error("generate_dataset: cannot write manifest.json");
  out << j.dump(2) << "\n";
  return manifest;
}

/// In-memory dataset with its manifest.
struct Dataset {
  DatasetManifest manifest;
  std::vector<VideoSample> samples;

  const GenConfig& config() const { return manifest.gen_config; }
  std::size_t size() const { return samples.size(); }
  int label(std::size_t i) const { return samples[i].label; }
  int identity(std::size_t i) const { return samples[i].identity_id; }
};

/// Loads a dataset back; round-trips bit-exactly with generate_dataset.
inline Dataset read_dataset(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("read_dataset: missing manifest '" + manifest_path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("read_dataset: cannot parse '" + manifest_path +
                             "': " + e.what());
  }

  Dataset ds;
  ds.manifest.version = j.at("version").get<int>();
  if (ds.manifest.version != 1)
    throw std::runtime_error("read_dataset: unsupported manifest version " +
                             std::to_string(ds.manifest.version) + " in '" + manifest_path +
                             "'");
  ds.manifest.seed = j.at("seed").get<std::uint64_t>();
  ds.manifest.gen_config = j.at("gen_config").get<GenConfig>();
  const GenConfig& cfg = ds.manifest.gen_config;

  const fs::path dir = fs::path(manifest_path).parent_path();
  int truthful = 0;
  for (const auto& rj : j.at("records")) {
    SampleRecord r{rj.at("file").get<std::string>(), rj.at("identity_id").get<int>(),
                   rj.at("label").get<int>()};
    const std::string path = (dir / r.file).string();
    TensorContainer c = TensorContainer::read(path);

    VideoSample s;
    s.identity_id = r.identity_id;
    s.label = r.label;
    s.episode_len = cfg.episode_len;
    s.frame_hw = cfg.frame_hw;
    s.face_channels = cfg.face_channels;
    s.flow_channels = cfg.flow_channels;

    const auto& face_entry = c.get("face_frames");
    const Shape want_face = {static_cast<std::size_t>(cfg.episode_len),
                             static_cast<std::size_t>(cfg.face_channels),
                             static_cast<std::size_t>(cfg.frame_hw),
                             static_cast<std::size_t>(cfg.frame_hw)};
    if (face_entry.dims != want_face)
      throw std::runtime_error("read_dataset: face frame shape mismatch in '" + path + "'");
    s.face_frames = c.get_f32("face_frames");

    const auto& flow_entry = c.get("flow_frames");
    const Shape want_flow = {static_cast<std::size_t>(cfg.episode_len),
                             static_cast<std::size_t>(cfg.flow_channels),
                             static_cast<std::size_t>(cfg.frame_hw),
                             static_cast<std::size_t>(cfg.frame_hw)};
    if (flow_entry.dims != want_flow)
      throw std::runtime_error("read_dataset: flow frame shape mismatch in '" + path + "'");
    s.flow_frames = c.get_f32("flow_frames");

    for (float v : s.face_frames)
      if (!std::isfinite(v))
        throw std::runtime_error("read_dataset: non-finite value in '" + path + "'");
    for (float v : s.flow_frames)
      if (!std::isfinite(v))
        throw std::runtime_error("read_dataset: non-finite value in '" + path + "'");

    truthful += r.label == 0 ? 1 : 0;
    ds.manifest.records.push_back(std::move(r));
    ds.samples.push_back(std::move(s));
  }

  if (static_cast<int>(ds.samples.size()) != cfg.n_videos || truthful != cfg.n_truthful)
    throw std::runtime_error("read_dataset: label counts do not match gen_config in '" +
                             manifest_path + "'");
  return ds;
}

/// Read-only dataset view that records which samples were touched.
/// Used to prove training never reads test-fold samples.
class AccessLoggedDataset {
 public:
  explicit AccessLoggedDataset(const Dataset& ds)
      : ds_(ds), accessed_(ds.size(), false) {}

  const VideoSample& get(std::size_t i) {
    accessed_.at(i) = true;
    return ds_.samples[i];
  }

  std::size_t size() const { return ds_.size(); }
  int label(std::size_t i) const { return ds_.label(i); }       // metadata, not logged
  int identity(std::size_t i) const { return ds_.identity(i); }
  const GenConfig& config() const { return ds_.config(); }

  const std::vector<bool>& access_log() const { return accessed_; }
  bool was_accessed(std::size_t i) const { return accessed_.at(i); }

 private:
  const Dataset& ds_;
  std::vector<bool> accessed_;
};

}  // namespace ffcsn::synthgen
