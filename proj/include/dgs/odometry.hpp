#pragma once

#include "dgs/camera.hpp"
#include "dgs/image_io.hpp"
#include "dgs/scene.hpp"
#include "dgs/synthdata.hpp"
#include "dgs/trajectory.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>

namespace dgs {

/// One timestamped observation as produced by the odometry provider.
struct Frame {
  ImageRGB image;
  double timestamp = 0;
  ImageF depth;          // provider depth estimate, camera-frame z; <= 0 marks invalid
  ImageU8 motion_mask;   // 1 = dynamic; may be empty when the provider has no masks
  CameraPose rel_pose;   // T_{t -> t-1}; identity for the first frame

  bool has_mask() const { return !motion_mask.px.empty(); }
};

struct NoiseSpec {
  double sigma_rot_deg = 0;     // per-axis rotation noise on relative poses
  double sigma_trans_frac = 0;  // translation noise as a fraction of the step length
  double depth_noise_std = 0;   // multiplicative depth noise
  double mask_flip_rate = 0;    // per-pixel bit-flip probability

  bool any() const {
    return sigma_rot_deg > 0 || sigma_trans_frac > 0 || depth_noise_std > 0 ||
           mask_flip_rate > 0;
  }
};

/// Behavioral contract: depths and poses share one metric scale across
/// the sequence.
class OdometryProvider {
 public:
  virtual ~OdometryProvider() = default;
  virtual size_t size() const = 0;
  virtual const Frame& frame(size_t i) const = 0;
  virtual CameraIntrinsics intrinsics() const = 0;

  std::vector<Frame> all_frames() const {
    std::vector<Frame> out;
    out.reserve(size());
    for (size_t i = 0; i < size(); ++i) out.push_back(frame(i));
    return out;
  }
};

// --------------------------------------------------------------- noise model

/// Corrupts provider outputs in place: relative-pose perturbation,
/// multiplicative depth noise, mask bit flips. Deterministic for a seed.
inline void apply_noise(std::vector<Frame>& frames, const NoiseSpec& spec, uint64_t seed) {
  if (!spec.any()) return;
  Rng rng(seed);
  std::normal_distribution<double> gauss(0, 1);
  std::uniform_real_distribution<double> uni(0, 1);
  for (size_t i = 0; i < frames.size(); ++i) {
    Frame& f = frames[i];
    if (i > 0 && (spec.sigma_rot_deg > 0 || spec.sigma_trans_frac > 0)) {
      const Vec3 w = Vec3(gauss(rng), gauss(rng), gauss(rng)) * deg_to_rad(spec.sigma_rot_deg);
      const double step = f.rel_pose.t.norm();
      const Vec3 dt = Vec3(gauss(rng), gauss(rng), gauss(rng)) * (spec.sigma_trans_frac * step);
      f.rel_pose.r = (f.rel_pose.r * Quat(so3_exp(w))).normalized();
      f.rel_pose.t += dt;
    }
    if (spec.depth_noise_std > 0)
      for (auto& d : f.depth.px)
        if (d > 0) d *= std::max(0.05, 1.0 + spec.depth_noise_std * gauss(rng));
    if (spec.mask_flip_rate > 0 && f.has_mask())
      for (auto& m : f.motion_mask.px)
        if (uni(rng) < spec.mask_flip_rate) m = m ? 0 : 1;
  }
}

// ------------------------------------------------------------ oracle provider

/// Frames straight from the synthetic generator's ground truth,
/// optionally corrupted by the noise model.
inline std::vector<Frame> oracle_frames(const SyntheticDataset& ds, const NoiseSpec& noise,
                                        uint64_t seed = 0) {
  if (ds.size() < 2) throw EmptyDataset("oracle provider: need at least 2 frames");
  std::vector<Frame> frames;
  frames.reserve(ds.size());
  for (size_t i = 0; i < ds.size(); ++i) {
    Frame f;
    f.image = ds.rgb[i];
    f.depth = ds.depth[i];
    f.motion_mask = ds.mask[i];
    f.timestamp = ds.gt_poses[i].timestamp;
    if (i > 0) f.rel_pose = ds.gt_poses[i - 1].inverse().compose(ds.gt_poses[i]);
    f.rel_pose.timestamp = f.timestamp;
    frames.push_back(std::move(f));
  }
  apply_noise(frames, noise, seed);
  return frames;
}

class OracleProvider : public OdometryProvider {
 public:
  OracleProvider(const SyntheticDataset& ds, const NoiseSpec& noise, uint64_t seed = 0)
      : K_(ds.K), frames_(oracle_frames(ds, noise, seed)) {}

  size_t size() const override { return frames_.size(); }
  const Frame& frame(size_t i) const override { return frames_[i]; }
  CameraIntrinsics intrinsics() const override { return K_; }

 private:
  CameraIntrinsics K_;
  std::vector<Frame> frames_;
};

// -------------------------------------------------------------- disk provider

/// Reads the exported layout: rgb/%06d.png, depth/%06d.pfm, mask/%06d.png,
/// rel_poses.tum, intrinsics.json. The mask folder is optional.
class DiskProvider : public OdometryProvider {
 public:
  explicit DiskProvider(const std::string& dir) : dir_(dir) {
    namespace fs = std::filesystem;
    const fs::path root(dir);
    if (!fs::exists(root / "intrinsics.json"))
      throw IoError("disk provider: missing " + (root / "intrinsics.json").string());
    {
      std::ifstream in(root / "intrinsics.json");
      nlohmann::json j;
      in >> j;
      K_.fx = j.at("fx");
      K_.fy = j.at("fy");
      K_.cx = j.at("cx");
      K_.cy = j.at("cy");
      K_.width = j.at("width");
      K_.height = j.at("height");
      K_.validate();
    }
    const Trajectory rel = load_tum((root / "rel_poses.tum").string());
    if (rel.size() < 2) throw EmptyDataset("disk provider: fewer than 2 frames in " + dir);
    has_masks_ = fs::exists(root / "mask");
    char name[32];
    for (size_t i = 0; i < rel.size(); ++i) {
      std::snprintf(name, sizeof(name), "%06zu", i);
      Frame f;
      f.image = load_png_rgb((root / "rgb" / (std::string(name) + ".png")).string());
      f.depth = load_pfm((root / "depth" / (std::string(name) + ".pfm")).string());
      if (has_masks_) {
        const ImageU8 raw =
            load_png_gray((root / "mask" / (std::string(name) + ".png")).string());
        f.motion_mask = ImageU8(raw.width, raw.height, 0);
        for (size_t p = 0; p < raw.px.size(); ++p) f.motion_mask.px[p] = raw.px[p] > 127;
      }
      f.rel_pose = rel[i];
      f.timestamp = rel[i].timestamp;
      frames_.push_back(std::move(f));
    }
  }

  size_t size() const override { return frames_.size(); }
  const Frame& frame(size_t i) const override { return frames_[i]; }
  CameraIntrinsics intrinsics() const override { return K_; }
  bool has_masks() const { return has_masks_; }
  const std::string& dir() const { return dir_; }

 private:
  std::string dir_;
  CameraIntrinsics K_;
  std::vector<Frame> frames_;
  bool has_masks_ = false;
};

// -------------------------------------------------------------- pose chaining

/// Absolute pose of frame i as the running composition of relative poses,
/// anchored at the identity for frame 0.
inline Trajectory chain_poses(const std::vector<Frame>& frames) {
  if (frames.empty()) throw EmptyDataset("chain_poses: no frames");
  if (frames[0].rel_pose.t.norm() > 1e-9 ||
      frames[0].rel_pose.r.angularDistance(Quat::Identity()) > 1e-9)
    throw Error("chain_poses: frame 0 relative pose must be the identity");
  Trajectory traj;
  CameraPose abs;
  abs.timestamp = frames[0].timestamp;
  traj.poses.push_back(abs);
  for (size_t i = 1; i < frames.size(); ++i) {
    abs = compose_relative(abs, frames[i].rel_pose);
    abs.timestamp = frames[i].timestamp;
    traj.poses.push_back(abs);
  }
  return traj;
}

// ---------------------------------------------------------- time normalization

/// Affine map from raw frame timestamps to [0,1] across the sequence.
struct TimeMap {
  double t0 = 0, span = 1;
  double normalize(double t) const { return (t - t0) / span; }
  double denormalize(double u) const { return t0 + u * span; }
};

inline TimeMap make_time_map(const std::vector<Frame>& frames) {
  if (frames.empty()) throw EmptyDataset("make_time_map: no frames");
  double lo = frames.front().timestamp, hi = lo;
  for (const auto& f : frames) {
    lo = std::min(lo, f.timestamp);
    hi = std::max(hi, f.timestamp);
  }
  TimeMap m;
  m.t0 = lo;
  m.span = (hi > lo) ? (hi - lo) : 1.0;
  return m;
}

// ------------------------------------------------------- scene initialization

struct InitParams {
  int stride = 4;              // spawn grid stride in pixels
  double init_opacity = 0.1;
  double init_beta = 0.3;
  double scale_clamp_min = 1e-4;
  double scale_clamp_max = 1.0;
};

/// Back-projects a stride grid of each frame's depth map into world space and
/// spawns one Gaussian per valid pixel: SH DC from the pixel color, zero
/// velocity, life peak at the frame's normalized timestamp, isotropic scale
/// from the mean distance to the 3 nearest points spawned by the same frame.
inline GaussianScene init_scene_from_frames(const std::vector<Frame>& frames,
                                            const Trajectory& trajectory,
                                            const CameraIntrinsics& K, const InitParams& params,
                                            const SceneConfig& scene_cfg, const TimeMap& tmap) {
  if (frames.empty()) throw EmptyDataset("init_scene_from_frames: no frames");
  if (frames.size() != trajectory.size())
    throw LengthMismatch("init_scene_from_frames: frames vs trajectory");

  GaussianScene scene(scene_cfg);
  auto& gs = scene.mutable_gaussians();
  const int K_sh = scene_cfg.sh_coeff_count();

  for (size_t fi = 0; fi < frames.size(); ++fi) {
    const Frame& f = frames[fi];
    const CameraPose& pose = trajectory[fi];
    std::vector<Vec3> points;
    std::vector<Vec3> colors;
    for (int y = 0; y < K.height; y += params.stride)
      for (int x = 0; x < K.width; x += params.stride) {
        const double d = f.depth.at(x, y);
        if (!(d > 0) || !std::isfinite(d)) continue;
        points.push_back(pixel_to_world(Vec2(x + 0.5, y + 0.5), d, pose, K));
        colors.push_back(f.image.at(x, y));
      }
    if (points.empty())
      throw DegenerateDepth("init_scene_from_frames: frame " + std::to_string(fi) +
                            " has no valid depth pixels");

    // mean distance to the 3 nearest neighbors within this frame's spawn set
    const size_t n = points.size();
    for (size_t i = 0; i < n; ++i) {
      std::array<double, 3> best{std::numeric_limits<double>::infinity(),
                                 std::numeric_limits<double>::infinity(),
                                 std::numeric_limits<double>::infinity()};
      for (size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double d2 = (points[i] - points[j]).squaredNorm();
        if (d2 < best[2]) {
          best[2] = d2;
          if (best[2] < best[1]) std::swap(best[1], best[2]);
          if (best[1] < best[0]) std::swap(best[0], best[1]);
        }
      }
      double mean_dist = 0;
      int cnt = 0;
      for (double b : best)
        if (std::isfinite(b)) {
          mean_dist += std::sqrt(b);
          ++cnt;
        }
      mean_dist = cnt ? mean_dist / cnt : params.scale_clamp_max;
      const double s =
          std::clamp(mean_dist, params.scale_clamp_min, params.scale_clamp_max);

      DynamicGaussian g;
      g.mu = points[i];
      g.log_scale = Vec3::Constant(std::log(s));
      g.logit_opacity = logit(params.init_opacity);
      g.sh.assign(K_sh, Vec3::Zero());
      g.sh[0] = (colors[i] - Vec3::Constant(0.5)) / kShC0;
      g.v = Vec3::Zero();
      g.tau = tmap.normalize(f.timestamp);
      g.log_beta = std::log(params.init_beta);
      gs.push_back(std::move(g));
    }
  }
  return scene;
}

}  // namespace dgs
