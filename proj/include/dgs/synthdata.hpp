#pragma once

#include "dgs/camera.hpp"
#include "dgs/core.hpp"
#include "dgs/image_io.hpp"
#include "dgs/trajectory.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>

namespace dgs {

// Ray-cast ground-truth generator. World frame: x right, y down, z forward
// (the first camera looks along +z). Depth maps store camera-frame z.

struct CheckerTexture {
  double period = 1.0;
  Vec3 color_a{0.85, 0.82, 0.78};
  Vec3 color_b{0.25, 0.24, 0.22};

  Vec3 sample(const Vec3& p) const {
    const int parity = int(std::floor(p.x() / period)) + int(std::floor(p.y() / period)) +
                       int(std::floor(p.z() / period));
    return (parity & 1) ? color_b : color_a;
  }
};

struct PlaneSpec {  // axis-aligned infinite plane
  int axis = 1;     // 0=x, 1=y, 2=z
  double offset = 1.5;
  CheckerTexture tex;
};

struct BoxSpec {
  Vec3 center{0, 0, 0};
  Vec3 half{0.5, 0.5, 0.5};
  CheckerTexture tex;
  bool dynamic = false;
  Vec3 velocity{0, 0, 0};  // world units / second
};

struct BillboardSpec {  // axis-aligned rectangle
  int axis = 2;         // normal axis
  double offset = 10.0;
  Vec2 center2{0, 0};   // coordinates on the two remaining axes, ascending order
  Vec2 half2{1, 1};
  CheckerTexture tex;
  bool dynamic = false;
  Vec3 velocity{0, 0, 0};
};

struct SceneSpec {
  std::vector<PlaneSpec> planes;
  std::vector<BoxSpec> boxes;
  std::vector<BillboardSpec> billboards;
  std::vector<CameraPose> camera_keys;  // keyframes, timestamps ascending
  int frame_count = 30;
  double fps = 10.0;
  int width = 96, height = 96;
  double focal = 96.0;

  void validate() const {
    size_t static_count = planes.size();
    for (const auto& b : boxes) static_count += !b.dynamic;
    for (const auto& b : billboards) static_count += !b.dynamic;
    if (static_count == 0) throw EmptyScene("scene spec: need at least one static primitive");
    for (const auto& b : boxes)
      if (!b.velocity.allFinite()) throw Error("scene spec: non-finite box velocity");
    for (const auto& b : billboards)
      if (!b.velocity.allFinite()) throw Error("scene spec: non-finite billboard velocity");
    if (frame_count < 1 || fps <= 0 || width < 1 || height < 1 || focal <= 0)
      throw Error("scene spec: bad camera/frame parameters");
    if (camera_keys.empty()) throw Error("scene spec: need at least one camera keyframe");
  }

  CameraIntrinsics intrinsics() const {
    return CameraIntrinsics{focal, focal, width / 2.0, height / 2.0, width, height};
  }
};

struct ObjectTrack {  // per dynamic primitive
  int primitive_id = 0;
  Vec3 velocity{0, 0, 0};
};

struct SyntheticDataset {
  CameraIntrinsics K;
  std::vector<ImageRGB> rgb;
  std::vector<ImageF> depth;      // camera-frame z; 0 marks no hit
  std::vector<ImageU8> mask;      // 1 where the front-most surface is dynamic
  Trajectory gt_poses;
  std::vector<ObjectTrack> tracks;

  size_t size() const { return rgb.size(); }
};

namespace synth_detail {

struct Hit {
  double t = std::numeric_limits<double>::infinity();  // ray parameter == camera z
  Vec3 color{0, 0, 0};
  bool dynamic = false;
  bool valid() const { return std::isfinite(t); }
};

inline void hit_plane(const PlaneSpec& pl, const Vec3& origin, const Vec3& dir, Hit& best) {
  if (std::abs(dir[pl.axis]) < 1e-12) return;
  const double t = (pl.offset - origin[pl.axis]) / dir[pl.axis];
  if (t <= 1e-6 || t >= best.t) return;
  best.t = t;
  best.color = pl.tex.sample(origin + t * dir);
  best.dynamic = false;
}

inline void hit_box(const Vec3& lo, const Vec3& hi, const CheckerTexture& tex, bool dynamic,
                    const Vec3& origin, const Vec3& dir, Hit& best) {
  double tmin = 1e-6, tmax = best.t;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(dir[a]) < 1e-12) {
      if (origin[a] < lo[a] || origin[a] > hi[a]) return;
      continue;
    }
    double t0 = (lo[a] - origin[a]) / dir[a];
    double t1 = (hi[a] - origin[a]) / dir[a];
    if (t0 > t1) std::swap(t0, t1);
    tmin = std::max(tmin, t0);
    tmax = std::min(tmax, t1);
    if (tmin > tmax) return;
  }
  best.t = tmin;
  best.color = tex.sample(origin + tmin * dir);
  best.dynamic = dynamic;
}

inline void hit_billboard(const BillboardSpec& bb, const Vec3& shift, const Vec3& origin,
                          const Vec3& dir, Hit& best) {
  const int a = bb.axis;
  const double offset = bb.offset + shift[a];
  if (std::abs(dir[a]) < 1e-12) return;
  const double t = (offset - origin[a]) / dir[a];
  if (t <= 1e-6 || t >= best.t) return;
  const Vec3 p = origin + t * dir;
  const int u = (a + 1) % 3, v = (a + 2) % 3;
  const int lo_ax = std::min(u, v), hi_ax = std::max(u, v);
  if (std::abs(p[lo_ax] - (bb.center2[0] + shift[lo_ax])) > bb.half2[0]) return;
  if (std::abs(p[hi_ax] - (bb.center2[1] + shift[hi_ax])) > bb.half2[1]) return;
  best.t = t;
  best.color = bb.tex.sample(p - shift);  // texture rides along with the object
  best.dynamic = bb.dynamic;
}

inline CameraPose interpolate_keys(const std::vector<CameraPose>& keys, double time) {
  if (keys.size() == 1) return keys.front();
  if (time <= keys.front().timestamp) return keys.front();
  if (time >= keys.back().timestamp) return keys.back();
  size_t hi = 1;
  while (keys[hi].timestamp < time) ++hi;
  const auto& a = keys[hi - 1];
  const auto& b = keys[hi];
  const double span = b.timestamp - a.timestamp;
  const double w = span > 0 ? (time - a.timestamp) / span : 0.0;
  CameraPose out;
  out.t = (1.0 - w) * a.t + w * b.t;
  out.r = a.r.slerp(w, b.r).normalized();
  out.timestamp = time;
  return out;
}

}  // namespace synth_detail

/// Deterministic z-buffered rasterization of the spec's primitives.
/// The seed is recorded for provenance but the generator itself is
/// noise-free; all randomness lives in the odometry noise models.
inline SyntheticDataset generate(const SceneSpec& spec, uint64_t /*seed*/ = 0) {
  spec.validate();
  SyntheticDataset ds;
  ds.K = spec.intrinsics();
  const double t0 = 0.0;

  int prim_id = 0;
  for (const auto& b : spec.boxes) {
    if (b.dynamic) ds.tracks.push_back({prim_id, b.velocity});
    ++prim_id;
  }
  for (const auto& b : spec.billboards) {
    if (b.dynamic) ds.tracks.push_back({prim_id, b.velocity});
    ++prim_id;
  }

  for (int f = 0; f < spec.frame_count; ++f) {
    const double time = f / spec.fps;
    CameraPose pose = synth_detail::interpolate_keys(spec.camera_keys, time);
    pose.timestamp = time;
    ds.gt_poses.poses.push_back(pose);

    ImageRGB rgb(spec.width, spec.height, Vec3::Zero());
    ImageF depth(spec.width, spec.height, 0.0);
    ImageU8 mask(spec.width, spec.height, 0);

    const Mat3 R = pose.rotation();
    for (int y = 0; y < spec.height; ++y) {
      for (int x = 0; x < spec.width; ++x) {
        // unnormalized ray with unit camera z: the ray parameter is z-depth
        const Vec3 dir_cam((x + 0.5 - ds.K.cx) / ds.K.fx, (y + 0.5 - ds.K.cy) / ds.K.fy, 1.0);
        const Vec3 dir = R * dir_cam;
        synth_detail::Hit hit;
        for (const auto& pl : spec.planes) synth_detail::hit_plane(pl, pose.t, dir, hit);
        for (const auto& b : spec.boxes) {
          const Vec3 shift = b.dynamic ? Vec3(b.velocity * (time - t0)) : Vec3::Zero();
          synth_detail::hit_box(b.center + shift - b.half, b.center + shift + b.half, b.tex,
                                b.dynamic, pose.t, dir, hit);
        }
        for (const auto& bb : spec.billboards) {
          const Vec3 shift = bb.dynamic ? Vec3(bb.velocity * (time - t0)) : Vec3::Zero();
          synth_detail::hit_billboard(bb, shift, pose.t, dir, hit);
        }
        if (hit.valid()) {
          rgb.at(x, y) = hit.color;
          depth.at(x, y) = hit.t;
          mask.at(x, y) = hit.dynamic ? 1 : 0;
        }
      }
    }
    ds.rgb.push_back(std::move(rgb));
    ds.depth.push_back(std::move(depth));
    ds.mask.push_back(std::move(mask));
  }
  return ds;
}

// ------------------------------------------------------------------ presets

/// Forward camera run down a textured street: ground plane, box buildings
/// on both sides, a far wall so every pixel carries depth.
inline SceneSpec preset_static_street() {
  SceneSpec s;
  s.frame_count = 30;
  s.fps = 10;
  s.width = 96;
  s.height = 96;
  s.focal = 96;

  // forward run with a gentle lateral sway: keeps the trajectory away from
  // the collinear degeneracy of Sim(3) alignment and adds parallax
  CameraPose start, mid, end;
  start.timestamp = 0.0;
  mid.timestamp = 0.5 * (s.frame_count - 1) / s.fps;
  mid.t = Vec3(0.15, -0.03, 1.5);
  end.timestamp = (s.frame_count - 1) / s.fps;
  end.t = Vec3(0, 0, 3.0);
  s.camera_keys = {start, mid, end};

  PlaneSpec ground;
  ground.axis = 1;
  ground.offset = 1.5;
  ground.tex.period = 1.0;
  s.planes.push_back(ground);

  BillboardSpec wall;  // backdrop closing the street, so every ray hits
  wall.axis = 2;
  wall.offset = 26.0;
  wall.center2 = Vec2(0, -4);  // (x, y) center
  wall.half2 = Vec2(60, 30);
  wall.tex.period = 4.0;
  wall.tex.color_a = Vec3(0.55, 0.65, 0.8);
  wall.tex.color_b = Vec3(0.35, 0.45, 0.6);
  s.billboards.push_back(wall);

  auto building = [](double x, double z, double w, double h, double d, Vec3 ca, Vec3 cb) {
    BoxSpec b;
    b.half = Vec3(w / 2, h / 2, d / 2);
    b.center = Vec3(x, 1.5 - h / 2, z);  // sits on the ground (y points down)
    b.tex.period = 0.8;
    b.tex.color_a = ca;
    b.tex.color_b = cb;
    return b;
  };
  s.boxes.push_back(building(-4.0, 7.0, 2.0, 2.8, 2.0, {0.8, 0.5, 0.4}, {0.5, 0.3, 0.25}));
  s.boxes.push_back(building(4.2, 9.0, 2.2, 3.2, 2.2, {0.45, 0.6, 0.45}, {0.3, 0.4, 0.3}));
  s.boxes.push_back(building(-4.5, 13.0, 2.4, 3.6, 2.4, {0.7, 0.7, 0.5}, {0.45, 0.45, 0.3}));
  s.boxes.push_back(building(4.0, 16.0, 2.0, 2.6, 2.0, {0.6, 0.5, 0.7}, {0.4, 0.32, 0.45}));
  s.boxes.push_back(building(-3.8, 19.0, 2.2, 3.0, 2.2, {0.75, 0.6, 0.45}, {0.5, 0.4, 0.3}));
  s.boxes.push_back(building(3.6, 22.0, 2.4, 3.4, 2.4, {0.5, 0.65, 0.7}, {0.33, 0.43, 0.47}));
  // low curb boxes close to the path for near-field parallax
  s.boxes.push_back(building(-1.8, 5.5, 0.7, 0.7, 0.7, {0.85, 0.8, 0.3}, {0.55, 0.5, 0.2}));
  s.boxes.push_back(building(1.9, 11.0, 0.8, 0.8, 0.8, {0.4, 0.75, 0.75}, {0.25, 0.5, 0.5}));
  return s;
}

/// static-street plus one box crossing the road left to right.
inline SceneSpec preset_one_mover() {
  SceneSpec s = preset_static_street();
  BoxSpec mover;
  mover.center = Vec3(-6.0, 0.9, 10.0);
  mover.half = Vec3(0.75, 0.6, 0.75);
  mover.dynamic = true;
  mover.velocity = Vec3(4.0, 0, 0);
  mover.tex.period = 0.5;
  mover.tex.color_a = Vec3(0.9, 0.15, 0.1);
  mover.tex.color_b = Vec3(0.95, 0.8, 0.2);
  s.boxes.push_back(mover);
  return s;
}

/// Three independently moving boxes.
inline SceneSpec preset_multi_mover() {
  SceneSpec s = preset_one_mover();
  BoxSpec oncoming;
  oncoming.center = Vec3(5.5, 0.8, 16.0);
  oncoming.half = Vec3(0.8, 0.7, 0.8);
  oncoming.dynamic = true;
  oncoming.velocity = Vec3(-3.0, 0, 0);
  oncoming.tex.period = 0.5;
  oncoming.tex.color_a = Vec3(0.15, 0.3, 0.9);
  oncoming.tex.color_b = Vec3(0.8, 0.85, 0.95);
  s.boxes.push_back(oncoming);

  BoxSpec walker;
  walker.center = Vec3(-2.2, 1.1, 7.5);
  walker.half = Vec3(0.25, 0.4, 0.25);
  walker.dynamic = true;
  walker.velocity = Vec3(0.6, 0, 0.5);
  walker.tex.period = 0.3;
  walker.tex.color_a = Vec3(0.2, 0.85, 0.3);
  walker.tex.color_b = Vec3(0.1, 0.4, 0.15);
  s.boxes.push_back(walker);
  return s;
}

inline SceneSpec preset_by_name(const std::string& name) {
  if (name == "static-street") return preset_static_street();
  if (name == "one-mover") return preset_one_mover();
  if (name == "multi-mover") return preset_multi_mover();
  throw ParseError("unknown preset: " + name +
                   " (expected static-street, one-mover or multi-mover)");
}

// ------------------------------------------------------------------- export

/// Writes the disk-provider layout: rgb/%06d.png, depth/%06d.pfm,
/// mask/%06d.png, rel_poses.tum, intrinsics.json, plus gt_poses.tum.
inline void export_dataset(const SyntheticDataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "rgb", ec);
  fs::create_directories(fs::path(dir) / "depth", ec);
  fs::create_directories(fs::path(dir) / "mask", ec);
  if (ec) throw IoError("cannot create dataset directories under " + dir);

  char name[32];
  for (size_t i = 0; i < ds.size(); ++i) {
    std::snprintf(name, sizeof(name), "%06zu", i);
    save_png(ds.rgb[i], (fs::path(dir) / "rgb" / (std::string(name) + ".png")).string());
    save_pfm(ds.depth[i], (fs::path(dir) / "depth" / (std::string(name) + ".pfm")).string());
    ImageU8 m = ds.mask[i];
    for (auto& p : m.px) p = p ? 255 : 0;
    save_png(m, (fs::path(dir) / "mask" / (std::string(name) + ".png")).string());
  }

  Trajectory rel;
  for (size_t i = 0; i < ds.gt_poses.size(); ++i) {
    CameraPose r;  // identity for the first frame
    if (i > 0) r = ds.gt_poses[i - 1].inverse().compose(ds.gt_poses[i]);
    r.timestamp = ds.gt_poses[i].timestamp;
    rel.poses.push_back(r);
  }
  save_tum(rel, (fs::path(dir) / "rel_poses.tum").string());
  save_tum(ds.gt_poses, (fs::path(dir) / "gt_poses.tum").string());

  nlohmann::json j;
  j["fx"] = ds.K.fx;
  j["fy"] = ds.K.fy;
  j["cx"] = ds.K.cx;
  j["cy"] = ds.K.cy;
  j["width"] = ds.K.width;
  j["height"] = ds.K.height;
  std::ofstream out(fs::path(dir) / "intrinsics.json");
  if (!out) throw IoError("cannot write intrinsics.json under " + dir);
  out << j.dump(2) << "\n";
}

}  // namespace dgs
