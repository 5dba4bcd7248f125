#pragma once

#include "dgs/camera.hpp"
#include "dgs/scene.hpp"

#include <algorithm>
#include <memory>
#include <numeric>
#include <thread>

namespace dgs {

struct RasterConfig {
  int tile_size = 16;
  double early_stop_T = 1e-4;        // per-pixel transmittance cutoff; 0 disables
  double contrib_cutoff = 1.0 / 255; // skip contributions with alpha*G below; 0 disables
  double sigma_bound = 3.0;          // screen-bounds multiplier; <= 0 uses the full image
  double lowpass = 0.3;              // px^2 added to the cov2d diagonal
  double alpha_norm_eps = 1e-8;      // depth/velocity normalization floor
  int threads = 1;
};

/// A Gaussian after temporal evaluation and perspective projection.
struct ProjectedGaussian {
  Vec2 mu2d;          // projected mean, pixels
  Mat2 cov2d;         // projected covariance after low-pass
  double depth = 0;   // camera-frame z of the time-shifted mean
  Vec3 color;         // SH color along the view ray, clamped to [0,1]
  double alpha_t = 0; // time-modulated opacity
  double vel_scalar = 0;
  int source_id = -1;

  // derived quantities used by the tile walk
  Mat2 conic;         // cov2d^{-1}
  Vec3 color_raw;     // pre-clamp color (gates the clamp gradient)
  int x0 = 0, x1 = 0, y0 = 0, y1 = 0;  // pixel bounds [x0,x1) x [y0,y1)
  double q_skip = 0;  // Mahalanobis threshold equivalent to the contribution cutoff
};

/// Per-parameter-class gradients for a whole scene plus the pose delta.
struct SceneGrads {
  std::vector<Vec3> mu, log_scale, v;
  std::vector<Vec4> rot_q;  // (w, x, y, z)
  std::vector<double> logit_opacity, tau, log_beta;
  std::vector<std::vector<Vec3>> sh;
  Vec6 pose_delta = Vec6::Zero();  // (omega, upsilon)

  void resize(size_t n, int sh_coeffs) {
    mu.assign(n, Vec3::Zero());
    log_scale.assign(n, Vec3::Zero());
    v.assign(n, Vec3::Zero());
    rot_q.assign(n, Vec4::Zero());
    logit_opacity.assign(n, 0.0);
    tau.assign(n, 0.0);
    log_beta.assign(n, 0.0);
    sh.assign(n, std::vector<Vec3>(sh_coeffs, Vec3::Zero()));
    pose_delta.setZero();
  }

  SceneGrads& operator+=(const SceneGrads& o) {
    for (size_t i = 0; i < mu.size(); ++i) {
      mu[i] += o.mu[i];
      log_scale[i] += o.log_scale[i];
      v[i] += o.v[i];
      rot_q[i] += o.rot_q[i];
      logit_opacity[i] += o.logit_opacity[i];
      tau[i] += o.tau[i];
      log_beta[i] += o.log_beta[i];
      for (size_t k = 0; k < sh[i].size(); ++k) sh[i][k] += o.sh[i][k];
    }
    pose_delta += o.pose_delta;
    return *this;
  }

  bool all_finite() const {
    auto ok3 = [](const Vec3& x) { return x.allFinite(); };
    for (size_t i = 0; i < mu.size(); ++i) {
      if (!ok3(mu[i]) || !ok3(log_scale[i]) || !ok3(v[i]) || !rot_q[i].allFinite()) return false;
      if (!std::isfinite(logit_opacity[i]) || !std::isfinite(tau[i]) ||
          !std::isfinite(log_beta[i]))
        return false;
      for (const auto& s : sh[i])
        if (!ok3(s)) return false;
    }
    return pose_delta.allFinite();
  }
};

namespace raster_detail {

// real spherical harmonics constants, degrees 0..3
constexpr double kSH0 = kShC0;
constexpr double kSH1 = 0.4886025119029199;
constexpr double kSH2[5] = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                            -1.0925484305920792, 0.5462742152960396};
constexpr double kSH3[7] = {-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
                            0.3731763325901154, -0.4570457994644658, 1.445305721320277,
                            -0.5900435899266435};

/// Basis values for a unit direction, and optionally d(basis)/d(dir).
inline void sh_basis(const Vec3& d, int degree, double* basis, Vec3* dbasis) {
  const double x = d.x(), y = d.y(), z = d.z();
  basis[0] = kSH0;
  if (dbasis) dbasis[0].setZero();
  if (degree < 1) return;
  basis[1] = -kSH1 * y;
  basis[2] = kSH1 * z;
  basis[3] = -kSH1 * x;
  if (dbasis) {
    dbasis[1] = Vec3(0, -kSH1, 0);
    dbasis[2] = Vec3(0, 0, kSH1);
    dbasis[3] = Vec3(-kSH1, 0, 0);
  }
  if (degree < 2) return;
  basis[4] = kSH2[0] * x * y;
  basis[5] = kSH2[1] * y * z;
  basis[6] = kSH2[2] * (2 * z * z - x * x - y * y);
  basis[7] = kSH2[3] * x * z;
  basis[8] = kSH2[4] * (x * x - y * y);
  if (dbasis) {
    dbasis[4] = kSH2[0] * Vec3(y, x, 0);
    dbasis[5] = kSH2[1] * Vec3(0, z, y);
    dbasis[6] = kSH2[2] * Vec3(-2 * x, -2 * y, 4 * z);
    dbasis[7] = kSH2[3] * Vec3(z, 0, x);
    dbasis[8] = kSH2[4] * Vec3(2 * x, -2 * y, 0);
  }
  if (degree < 3) return;
  basis[9] = kSH3[0] * y * (3 * x * x - y * y);
  basis[10] = kSH3[1] * x * y * z;
  basis[11] = kSH3[2] * y * (4 * z * z - x * x - y * y);
  basis[12] = kSH3[3] * z * (2 * z * z - 3 * x * x - 3 * y * y);
  basis[13] = kSH3[4] * x * (4 * z * z - x * x - y * y);
  basis[14] = kSH3[5] * z * (x * x - y * y);
  basis[15] = kSH3[6] * x * (x * x - 3 * y * y);
  if (dbasis) {
    dbasis[9] = kSH3[0] * Vec3(6 * x * y, 3 * x * x - 3 * y * y, 0);
    dbasis[10] = kSH3[1] * Vec3(y * z, x * z, x * y);
    dbasis[11] = kSH3[2] * Vec3(-2 * x * y, 4 * z * z - x * x - 3 * y * y, 8 * y * z);
    dbasis[12] = kSH3[3] * Vec3(-6 * x * z, -6 * y * z, 6 * z * z - 3 * x * x - 3 * y * y);
    dbasis[13] = kSH3[4] * Vec3(4 * z * z - 3 * x * x - y * y, -2 * x * y, 8 * x * z);
    dbasis[14] = kSH3[5] * Vec3(2 * x * z, -2 * y * z, x * x - y * y);
    dbasis[15] = kSH3[6] * Vec3(3 * x * x - 3 * y * y, -6 * x * y, 0);
  }
}

template <typename F>
void parallel_chunks(int n, int threads, F&& fn) {
  if (threads <= 1 || n <= 1) {
    fn(0, n, 0);
    return;
  }
  const int workers = std::min(threads, n);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    const int begin = int(int64_t(n) * w / workers);
    const int end = int(int64_t(n) * (w + 1) / workers);
    pool.emplace_back([&fn, begin, end, w] { fn(begin, end, w); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace raster_detail

/// Everything the backward pass needs, captured by the forward pass.
struct BackwardState {
  uint64_t scene_revision = 0;
  CameraPose pose;
  PoseDelta delta;
  CameraIntrinsics K;
  double time = 0;
  RasterConfig rcfg;
  std::vector<ProjectedGaussian> projected;  // depth-sorted
  int sh_degree = 1;
  SceneConfig scene_cfg;
  bool has_scene_chain = true;  // false when built from a bare projected list

  // per-tile contributor lists, pixels row-major within each tile
  struct TileData {
    std::vector<int32_t> idx;        // contributor index into `projected`
    std::vector<double> a;           // blend weight alpha_t * G at that pixel
    std::vector<uint32_t> start;     // per-pixel slice start into idx/a
    std::vector<uint32_t> count;     // per-pixel slice length
  };
  int tiles_x = 0, tiles_y = 0;
  std::vector<TileData> tiles;

  ImageF weighted_depth;  // unnormalized accumulators (pre division)
  ImageF weighted_vel;
};

struct RenderOutput {
  ImageRGB color;     // [0,1]
  ImageF depth;       // alpha-weighted expected depth
  ImageF velocity;    // [0,1]
  ImageF alpha_acc;   // [0,1]
  std::shared_ptr<BackwardState> state;
};

// ----------------------------------------------------------------- project

namespace raster_detail {

struct ProjectionFrame {
  Mat3 W;        // camera-from-world rotation
  Vec3 cam_pos;  // camera position in world
};

inline ProjectionFrame projection_frame(const CameraPose& pose, const PoseDelta& delta) {
  const CameraPose eff = apply_delta(pose, delta);
  return {eff.rotation().transpose(), eff.t};
}

/// Projects one Gaussian; returns false when culled.
inline bool project_one(const DynamicGaussian& g, int source_id, const ProjectionFrame& fr,
                        const CameraIntrinsics& K, double t, const SceneConfig& cfg,
                        const RasterConfig& rcfg, ProjectedGaussian& out) {
  const TimeState ts = eval_at_time(g, t, cfg);
  if (ts.alpha_t <= 0) return false;  // temporal envelope underflow
  if (rcfg.contrib_cutoff > 0 && ts.alpha_t < rcfg.contrib_cutoff) return false;

  const Vec3 pc = fr.W * (ts.mu_t - fr.cam_pos);
  const double z = pc.z();
  if (z <= K.znear) return false;

  out.depth = z;
  out.mu2d = Vec2(K.fx * pc.x() / z + K.cx, K.fy * pc.y() / z + K.cy);

  Eigen::Matrix<double, 2, 3> J;
  J << K.fx / z, 0, -K.fx * pc.x() / (z * z),
       0, K.fy / z, -K.fy * pc.y() / (z * z);
  const Eigen::Matrix<double, 2, 3> U = J * fr.W;
  out.cov2d = U * g.covariance() * U.transpose();
  out.cov2d(0, 0) += rcfg.lowpass;
  out.cov2d(1, 1) += rcfg.lowpass;

  // screen bounds from the larger eigenvalue of cov2d
  if (rcfg.sigma_bound > 0) {
    const double mid = 0.5 * (out.cov2d(0, 0) + out.cov2d(1, 1));
    const double det = out.cov2d(0, 0) * out.cov2d(1, 1) - sq(out.cov2d(0, 1));
    const double lmax = mid + std::sqrt(std::max(0.0, mid * mid - det));
    const double r = rcfg.sigma_bound * std::sqrt(lmax);
    out.x0 = std::max(0, int(std::floor(out.mu2d.x() - r)));
    out.x1 = std::min(K.width, int(std::ceil(out.mu2d.x() + r)));
    out.y0 = std::max(0, int(std::floor(out.mu2d.y() - r)));
    out.y1 = std::min(K.height, int(std::ceil(out.mu2d.y() + r)));
    if (out.x0 >= out.x1 || out.y0 >= out.y1) return false;
  } else {
    out.x0 = 0;
    out.x1 = K.width;
    out.y0 = 0;
    out.y1 = K.height;
  }

  const double det = out.cov2d(0, 0) * out.cov2d(1, 1) - sq(out.cov2d(0, 1));
  out.conic << out.cov2d(1, 1) / det, -out.cov2d(0, 1) / det,
               -out.cov2d(0, 1) / det, out.cov2d(0, 0) / det;

  const Vec3 dir = (ts.mu_t - fr.cam_pos).normalized();
  double basis[16];
  sh_basis(dir, cfg.sh_degree, basis, nullptr);
  Vec3 c = Vec3::Constant(0.5);
  const int K_sh = cfg.sh_coeff_count();
  for (int k = 0; k < K_sh; ++k) c += basis[k] * g.sh[k];
  out.color_raw = c;
  out.color = c.cwiseMax(0.0).cwiseMin(1.0);

  out.alpha_t = ts.alpha_t;
  out.vel_scalar = velocity_scalar(g, cfg);
  out.source_id = source_id;
  out.q_skip = rcfg.contrib_cutoff > 0
                   ? 2.0 * std::log(std::max(ts.alpha_t, 1e-300) / rcfg.contrib_cutoff)
                   : 500.0;  // exp underflows to 0 well before this
  return true;
}

}  // namespace raster_detail

/// Projects the whole scene (or a subset of indices) at time t through
/// pose * exp(delta). Culled Gaussians are simply absent from the output.
inline std::vector<ProjectedGaussian> project_subset(
    const GaussianScene& scene, const std::vector<int>& ids, const CameraPose& pose,
    const PoseDelta& delta, const CameraIntrinsics& K, double t,
    const RasterConfig& rcfg = {}) {
  const auto fr = raster_detail::projection_frame(pose, delta);
  std::vector<ProjectedGaussian> out;
  out.reserve(ids.size());
  for (int id : ids) {
    ProjectedGaussian p;
    if (raster_detail::project_one(scene.gaussians()[id], id, fr, K, t, scene.config, rcfg, p))
      out.push_back(p);
  }
  return out;
}

inline std::vector<ProjectedGaussian> project(const GaussianScene& scene,
                                              const CameraPose& pose, const PoseDelta& delta,
                                              const CameraIntrinsics& K, double t,
                                              const RasterConfig& rcfg = {}) {
  std::vector<int> ids(scene.size());
  std::iota(ids.begin(), ids.end(), 0);
  return project_subset(scene, ids, pose, delta, K, t, rcfg);
}

// ---------------------------------------------------------------- rasterize

namespace raster_detail {

/// Depth-ascending order; ties broken by source id so the blend is
/// invariant to input permutations.
inline void sort_by_depth(std::vector<ProjectedGaussian>& projected) {
  std::sort(projected.begin(), projected.end(), [](const auto& a, const auto& b) {
    if (a.depth != b.depth) return a.depth < b.depth;
    return a.source_id < b.source_id;
  });
}

inline void rasterize_core(const CameraIntrinsics& K, const RasterConfig& rcfg,
                           RenderOutput& out, BackwardState* state) {
  const int W = K.width, H = K.height, T = rcfg.tile_size;
  const int tiles_x = (W + T - 1) / T, tiles_y = (H + T - 1) / T;
  const auto& projected = state->projected;

  out.color = ImageRGB(W, H, Vec3::Zero());
  out.depth = ImageF(W, H, 0.0);
  out.velocity = ImageF(W, H, 0.0);
  out.alpha_acc = ImageF(W, H, 0.0);
  state->tiles_x = tiles_x;
  state->tiles_y = tiles_y;
  state->tiles.assign(size_t(tiles_x) * tiles_y, {});
  state->weighted_depth = ImageF(W, H, 0.0);
  state->weighted_vel = ImageF(W, H, 0.0);

  // per-tile gaussian lists; `projected` is depth-sorted so lists are too
  std::vector<std::vector<int32_t>> tile_gaussians(state->tiles.size());
  for (int32_t i = 0; i < int32_t(projected.size()); ++i) {
    const auto& p = projected[i];
    const int tx0 = p.x0 / T, tx1 = (p.x1 - 1) / T;
    const int ty0 = p.y0 / T, ty1 = (p.y1 - 1) / T;
    for (int ty = ty0; ty <= ty1; ++ty)
      for (int tx = tx0; tx <= tx1; ++tx)
        tile_gaussians[size_t(ty) * tiles_x + tx].push_back(i);
  }

  raster_detail::parallel_chunks(int(state->tiles.size()), rcfg.threads,
      [&](int tile_begin, int tile_end, int) {
    for (int tile = tile_begin; tile < tile_end; ++tile) {
      const auto& list = tile_gaussians[tile];
      const int tx = tile % tiles_x, ty = tile / tiles_x;
      const int px0 = tx * T, px1 = std::min(W, px0 + T);
      const int py0 = ty * T, py1 = std::min(H, py0 + T);
      auto& td = state->tiles[tile];
      const int n_px = (px1 - px0) * (py1 - py0);
      td.start.assign(n_px, 0);
      td.count.assign(n_px, 0);
      if (list.empty()) continue;

      int local = 0;
      for (int y = py0; y < py1; ++y) {
        for (int x = px0; x < px1; ++x, ++local) {
          const double cxp = x + 0.5, cyp = y + 0.5;
          double Tcur = 1.0;
          Vec3 color = Vec3::Zero();
          double wsum = 0, dsum = 0, vsum = 0;
          td.start[local] = uint32_t(td.idx.size());
          for (int32_t gi : list) {
            const auto& p = projected[gi];
            if (cxp < p.x0 || cxp >= p.x1 || cyp < p.y0 || cyp >= p.y1) continue;
            const double dx = cxp - p.mu2d.x(), dy = cyp - p.mu2d.y();
            const double q = p.conic(0, 0) * dx * dx + 2.0 * p.conic(0, 1) * dx * dy +
                             p.conic(1, 1) * dy * dy;
            if (q > p.q_skip || q > 500.0) continue;
            const double a = p.alpha_t * std::exp(-0.5 * q);
            if (rcfg.contrib_cutoff > 0 && a < rcfg.contrib_cutoff) continue;
            const double w = a * Tcur;
            color += w * p.color;
            wsum += w;
            dsum += w * p.depth;
            vsum += w * p.vel_scalar;
            td.idx.push_back(gi);
            td.a.push_back(a);
            Tcur *= (1.0 - a);
            if (rcfg.early_stop_T > 0 && Tcur < rcfg.early_stop_T) break;
          }
          td.count[local] = uint32_t(td.idx.size()) - td.start[local];
          out.color.at(x, y) = color;
          out.alpha_acc.at(x, y) = wsum;
          state->weighted_depth.at(x, y) = dsum;
          state->weighted_vel.at(x, y) = vsum;
          const double norm = std::max(wsum, rcfg.alpha_norm_eps);
          out.depth.at(x, y) = dsum / norm;
          out.velocity.at(x, y) = vsum / norm;
        }
      }
    }
  });
}

}  // namespace raster_detail

/// Stand-alone rasterization of an explicit projected list (sorts by depth
/// internally). The result carries state for the pixel-space backward but
/// no scene chain, so rasterize_backward on it requires a render() output.
inline RenderOutput rasterize(std::vector<ProjectedGaussian> projected,
                              const CameraIntrinsics& K, const RasterConfig& rcfg = {}) {
  RenderOutput out;
  out.state = std::make_shared<BackwardState>();
  out.state->K = K;
  out.state->rcfg = rcfg;
  out.state->has_scene_chain = false;
  raster_detail::sort_by_depth(projected);
  out.state->projected = std::move(projected);
  raster_detail::rasterize_core(K, rcfg, out, out.state.get());
  return out;
}

/// Full differentiable forward pass: project + rasterize with state retained.
inline RenderOutput render(const GaussianScene& scene, const CameraPose& pose,
                           const PoseDelta& delta, const CameraIntrinsics& K, double t,
                           const RasterConfig& rcfg = {}) {
  RenderOutput out;
  out.state = std::make_shared<BackwardState>();
  out.state->scene_revision = scene.revision();
  out.state->pose = pose;
  out.state->delta = delta;
  out.state->K = K;
  out.state->time = t;
  out.state->rcfg = rcfg;
  out.state->sh_degree = scene.config.sh_degree;
  out.state->scene_cfg = scene.config;
  auto projected = project(scene, pose, delta, K, t, rcfg);
  raster_detail::sort_by_depth(projected);
  out.state->projected = std::move(projected);
  raster_detail::rasterize_core(K, rcfg, out, out.state.get());
  return out;
}

/// Renders only the static partition (velocity_scalar <= v_thr).
inline RenderOutput render_static_only(const GaussianScene& scene, const CameraPose& pose,
                                       const PoseDelta& delta, const CameraIntrinsics& K,
                                       double t, const RasterConfig& rcfg = {}) {
  const auto [static_ids, dynamic_ids] = split_static_dynamic(scene);
  (void)dynamic_ids;
  RenderOutput out;
  out.state = std::make_shared<BackwardState>();
  out.state->scene_revision = scene.revision();
  out.state->pose = pose;
  out.state->delta = delta;
  out.state->K = K;
  out.state->time = t;
  out.state->rcfg = rcfg;
  out.state->sh_degree = scene.config.sh_degree;
  out.state->scene_cfg = scene.config;
  auto projected = project_subset(scene, static_ids, pose, delta, K, t, rcfg);
  raster_detail::sort_by_depth(projected);
  out.state->projected = std::move(projected);
  raster_detail::rasterize_core(K, rcfg, out, out.state.get());
  return out;
}

// ----------------------------------------------------------------- backward

namespace raster_detail {

/// Gradients in projected (screen) space, accumulated over pixels.
struct ProjGrad {
  Vec2 d_mu2d = Vec2::Zero();
  Vec3 d_conic = Vec3::Zero();  // (l00, l01, l11) of the symmetric conic
  double d_alpha_t = 0;
  Vec3 d_color = Vec3::Zero();
  double d_depth = 0;
  double d_vel = 0;
};

}  // namespace raster_detail

/// Analytic backward pass. grad_* are dL/d(output buffer); any may be
/// all-zero. Returns gradients for every Gaussian field and the pose delta.
inline SceneGrads rasterize_backward(const GaussianScene& scene, const RenderOutput& out,
                                     const ImageRGB& grad_color, const ImageF& grad_depth,
                                     const ImageF& grad_velocity) {
  using namespace raster_detail;
  if (!out.state) throw StaleState("rasterize_backward: output carries no backward state");
  const BackwardState& st = *out.state;
  if (!st.has_scene_chain)
    throw StaleState("rasterize_backward: output was not produced by render()");
  if (scene.revision() != st.scene_revision)
    throw StaleState("rasterize_backward: scene mutated since the forward pass");
  require_same_shape(grad_color, out.color, "rasterize_backward color");
  require_same_shape(grad_depth, out.depth, "rasterize_backward depth");
  require_same_shape(grad_velocity, out.velocity, "rasterize_backward velocity");

  const CameraIntrinsics& K = st.K;
  const RasterConfig& rcfg = st.rcfg;
  const int T = rcfg.tile_size;
  const auto& projected = st.projected;
  const size_t n_proj = projected.size();

  SceneGrads grads;
  grads.resize(scene.size(), scene.config.sh_coeff_count());
  if (n_proj == 0) return grads;

  // ---- stage 1: per-pixel blend gradients into projected space
  const int n_workers = std::max(1, rcfg.threads);
  std::vector<std::vector<ProjGrad>> worker_pg(n_workers,
                                               std::vector<ProjGrad>(n_proj));
  parallel_chunks(int(st.tiles.size()), rcfg.threads, [&](int tb, int te, int worker) {
    auto& pg = worker_pg[worker];
    std::vector<double> Tbuf;
    for (int tile = tb; tile < te; ++tile) {
      const auto& td = st.tiles[tile];
      if (td.idx.empty()) continue;
      const int tx = tile % st.tiles_x, ty = tile / st.tiles_x;
      const int px0 = tx * T, px1 = std::min(K.width, px0 + T);
      const int py0 = ty * T, py1 = std::min(K.height, py0 + T);
      int local = 0;
      for (int y = py0; y < py1; ++y) {
        for (int x = px0; x < px1; ++x, ++local) {
          const uint32_t n = td.count[local];
          if (n == 0) continue;
          const uint32_t s0 = td.start[local];

          const double A = out.alpha_acc.at(x, y);
          const double norm = std::max(A, rcfg.alpha_norm_eps);
          const Vec3 gc = grad_color.at(x, y);
          const double gd = grad_depth.at(x, y) / norm;
          const double gv = grad_velocity.at(x, y) / norm;
          double gA = 0;
          if (A > rcfg.alpha_norm_eps)
            gA = -(grad_depth.at(x, y) * st.weighted_depth.at(x, y) +
                   grad_velocity.at(x, y) * st.weighted_vel.at(x, y)) /
                 (norm * norm);
          if (gc.isZero(0.0) && gd == 0.0 && gv == 0.0 && gA == 0.0) continue;

          // forward transmittances
          Tbuf.resize(n);
          double Tcur = 1.0;
          for (uint32_t i = 0; i < n; ++i) {
            Tbuf[i] = Tcur;
            Tcur *= (1.0 - td.a[s0 + i]);
          }
          // reverse sweep with the blended-behind accumulator B
          Vec3 Bc = Vec3::Zero();
          double Bd = 0, Bv = 0, Ba = 0;
          const double cxp = x + 0.5, cyp = y + 0.5;
          for (int i = int(n) - 1; i >= 0; --i) {
            const int32_t gi = td.idx[s0 + i];
            const double a = td.a[s0 + i];
            const auto& p = projected[gi];
            auto& g = pg[gi];

            const double w = a * Tbuf[i];
            // dL/d(payload): payload grads use the blend weight directly
            g.d_color += w * gc;
            g.d_depth += w * gd;
            g.d_vel += w * gv;

            // dL/da via d(output)/da = T_i (u_i - B_i)
            const double da = Tbuf[i] * (gc.dot(p.color - Bc) + gd * (p.depth - Bd) +
                                         gv * (p.vel_scalar - Bv) + gA * (1.0 - Ba));
            // a = alpha_t * G
            const double G = a / p.alpha_t;
            g.d_alpha_t += da * G;
            const double dG = da * p.alpha_t;

            const double dx = cxp - p.mu2d.x(), dy = cyp - p.mu2d.y();
            const Vec2 cd(p.conic(0, 0) * dx + p.conic(0, 1) * dy,
                          p.conic(0, 1) * dx + p.conic(1, 1) * dy);
            g.d_mu2d += dG * G * cd;
            g.d_conic += dG * G * Vec3(-0.5 * dx * dx, -dx * dy, -0.5 * dy * dy);

            Bc = a * p.color + (1.0 - a) * Bc;
            Bd = a * p.depth + (1.0 - a) * Bd;
            Bv = a * p.vel_scalar + (1.0 - a) * Bv;
            Ba = a * 1.0 + (1.0 - a) * Ba;
          }
        }
      }
    }
  });

  // deterministic reduction over workers
  std::vector<ProjGrad> pg(n_proj);
  for (const auto& wpg : worker_pg)
    for (size_t i = 0; i < n_proj; ++i) {
      pg[i].d_mu2d += wpg[i].d_mu2d;
      pg[i].d_conic += wpg[i].d_conic;
      pg[i].d_alpha_t += wpg[i].d_alpha_t;
      pg[i].d_color += wpg[i].d_color;
      pg[i].d_depth += wpg[i].d_depth;
      pg[i].d_vel += wpg[i].d_vel;
    }

  // ---- stage 2: chain projected-space gradients to the parameters
  const auto fr = projection_frame(st.pose, st.delta);
  const SceneConfig& cfg = st.scene_cfg;
  const int K_sh = cfg.sh_coeff_count();
  std::vector<Vec6> worker_delta(n_workers, Vec6::Zero());

  parallel_chunks(int(n_proj), rcfg.threads, [&](int jb, int je, int worker) {
    Vec6& d_eta_total = worker_delta[worker];
    for (int j = jb; j < je; ++j) {
      const auto& p = projected[j];
      const auto& g = pg[j];
      const DynamicGaussian& gau = scene.gaussians()[p.source_id];

      // recompute forward intermediates for this gaussian
      const TimeState ts = eval_at_time(gau, st.time, cfg);
      const TimeStateGrad tg = eval_at_time_grad(gau, st.time, cfg);
      const Vec3 pc = fr.W * (ts.mu_t - fr.cam_pos);
      const double z = pc.z();
      Eigen::Matrix<double, 2, 3> J;
      J << K.fx / z, 0, -K.fx * pc.x() / (z * z),
           0, K.fy / z, -K.fy * pc.y() / (z * z);
      const Eigen::Matrix<double, 2, 3> U = J * fr.W;

      const Quat qn = gau.rot_q.normalized();
      const Mat3 R = qn.toRotationMatrix();
      const Vec3 s = gau.scale();
      const Mat3 M = R * s.asDiagonal();
      const Mat3 Sigma = M * M.transpose();

      Vec3 d_mu_t = Vec3::Zero();
      Vec3 d_pc = Vec3::Zero();
      Vec3 d_cam_pos = Vec3::Zero();
      Mat3 d_W = Mat3::Zero();

      // conic -> cov2d -> (Sigma, U)
      Mat2 d_conic_full;
      d_conic_full << g.d_conic[0], 0.5 * g.d_conic[1],
                      0.5 * g.d_conic[1], g.d_conic[2];
      const Mat2 d_cov2d = -p.conic * d_conic_full * p.conic;
      const Eigen::Matrix<double, 2, 3> d_U = 2.0 * d_cov2d * U * Sigma;
      const Mat3 d_Sigma = U.transpose() * d_cov2d * U;

      // Sigma = M M^T
      const Mat3 d_M = 2.0 * d_Sigma * M;
      const Mat3 d_R = d_M * s.asDiagonal();
      const Vec3 d_s = (R.transpose() * d_M).diagonal();
      grads.log_scale[p.source_id] += d_s.cwiseProduct(s);

      // rotation gradient through the normalized quaternion
      {
        const auto dRdq = quat_rotation_jacobian(qn);
        Vec4 d_qn;
        for (int k = 0; k < 4; ++k) d_qn[k] = (d_R.array() * dRdq[k].array()).sum();
        grads.rot_q[p.source_id] += quat_normalize_backward(gau.rot_q, d_qn);
      }

      // U = J W
      const Eigen::Matrix<double, 2, 3> d_J = d_U * fr.W.transpose();
      d_W += J.transpose() * d_U;

      // J depends on pc
      const double z2 = z * z, z3 = z2 * z;
      d_pc.x() += d_J(0, 2) * (-K.fx / z2);
      d_pc.y() += d_J(1, 2) * (-K.fy / z2);
      d_pc.z() += -d_J(0, 0) * K.fx / z2 - d_J(1, 1) * K.fy / z2 +
                  d_J(0, 2) * 2.0 * K.fx * pc.x() / z3 + d_J(1, 2) * 2.0 * K.fy * pc.y() / z3;

      // mu2d = (fx x/z + cx, fy y/z + cy): d(mu2d)/d(pc) is exactly J
      d_pc += J.transpose() * g.d_mu2d;
      // depth payload is pc.z
      d_pc.z() += g.d_depth;

      // color: clamp gate, SH basis, view direction
      {
        double basis[16];
        Vec3 dbasis[16];
        const Vec3 rel = ts.mu_t - fr.cam_pos;
        const double rn = rel.norm();
        const Vec3 dir = rel / rn;
        sh_basis(dir, cfg.sh_degree, basis, dbasis);
        Vec3 d_dir = Vec3::Zero();
        for (int c = 0; c < 3; ++c) {
          if (p.color_raw[c] <= 0.0 || p.color_raw[c] >= 1.0) continue;  // clamped
          const double dc = g.d_color[c];
          if (dc == 0.0) continue;
          for (int k = 0; k < K_sh; ++k) {
            grads.sh[p.source_id][k][c] += dc * basis[k];
            d_dir += dc * gau.sh[k][c] * dbasis[k];
          }
        }
        const Vec3 d_rel = (d_dir - dir * dir.dot(d_dir)) / rn;
        d_mu_t += d_rel;
        d_cam_pos -= d_rel;
      }

      // velocity scalar
      grads.v[p.source_id] += g.d_vel * velocity_scalar_grad(gau, cfg);

      // time-modulated opacity
      grads.logit_opacity[p.source_id] += g.d_alpha_t * tg.d_alpha_d_logit;
      grads.tau[p.source_id] += g.d_alpha_t * tg.d_alpha_d_tau;
      grads.log_beta[p.source_id] += g.d_alpha_t * tg.d_alpha_d_log_beta;

      // pc = W (mu_t - cam_pos): pose-independent part
      d_mu_t += fr.W.transpose() * d_pc;

      // temporal mean chain
      grads.mu[p.source_id] += d_mu_t;
      grads.v[p.source_id] += tg.d_mu_t_d_v * d_mu_t;
      grads.tau[p.source_id] += d_mu_t.dot(tg.d_mu_t_d_tau);

      // pose delta: right-perturbation eta at the effective pose
      Vec6 d_eta = Vec6::Zero();
      d_eta.head<3>() += d_pc.cross(pc);   // dX_cam/d(omega_eta) = [pc]x
      d_eta.tail<3>() -= d_pc;             // dX_cam/d(upsilon_eta) = -I
      d_eta.tail<3>() += fr.W * d_cam_pos; // d(cam_pos)/d(upsilon_eta) = W^T
      {
        const Mat3 A = d_W * fr.W.transpose();  // dW/d(omega_eta)_k = -[e_k]x W
        d_eta.head<3>() += Vec3(A(1, 2) - A(2, 1), A(2, 0) - A(0, 2), A(0, 1) - A(1, 0));
      }
      d_eta_total += d_eta;
    }
  });

  Vec6 d_eta = Vec6::Zero();
  for (const auto& wd : worker_delta) d_eta += wd;
  grads.pose_delta = se3_right_jacobian(st.delta.twist()).transpose() * d_eta;
  return grads;
}

}  // namespace dgs
