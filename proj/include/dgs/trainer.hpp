#pragma once

#include "dgs/eval.hpp"
#include "dgs/odometry.hpp"
#include "dgs/rasterizer.hpp"

#include <fstream>
#include <sstream>

namespace dgs {

struct LossWeights {
  double lambda_ssim = 0.2;
  double lambda_depth = 0.1;
  double lambda_motion = 0.10;

  void validate() const {
    if (lambda_ssim < 0 || lambda_depth < 0 || lambda_motion < 0)
      throw Error("loss weights must be non-negative");
  }
};

struct TrainSchedule {
  int total_iters = 30000;
  double pose_refine_start = 0.8;  // fraction of total
  int densify_interval = 200;
  double densify_stop = 0.5;       // fraction of total
  double prune_opacity_thr = 0.005;
  double grad_densify_thr = 0.08;  // mean |dL/d mu| per accumulation window
  int min_population = 100;

  void validate() const {
    if (total_iters < 1) throw Error("schedule: total_iters must be positive");
    if (pose_refine_start <= 0 || pose_refine_start >= 1)
      throw Error("schedule: pose_refine_start must be in (0,1)");
  }
};

struct LearningRates {
  double mean = 1.6e-4;       // scaled by the scene extent, exponentially decayed
  double mean_final_mult = 0.01;
  double scale = 5e-3;
  double rotation = 1e-3;
  double opacity = 5e-2;
  double sh = 2.5e-3;
  double velocity = 1e-3;
  double tau = 1e-3;
  double log_beta = 1e-3;
  double pose = 1e-4;
};

// ------------------------------------------------------------------- losses

struct ScalarLoss {
  double value = 0;
};

struct PhotometricLoss {
  double value = 0;
  double l1 = 0;
  double dssim = 0;  // (1 - ssim) / 2
  ImageRGB grad;     // dL/d(rendered color)
};

/// (1 - lambda_ssim) * L1 + lambda_ssim * (1 - SSIM) / 2 with the 11x11
/// Gaussian window. Returns the per-pixel gradient w.r.t. the render.
inline PhotometricLoss photometric_loss(const ImageRGB& render, const ImageRGB& gt,
                                        double lambda_ssim = 0.2) {
  require_same_shape(render, gt, "photometric_loss");
  PhotometricLoss out;
  out.grad = ImageRGB(render.width, render.height, Vec3::Zero());
  const double n = double(render.size()) * 3.0;
  for (size_t i = 0; i < render.size(); ++i) {
    const Vec3 d = render.px[i] - gt.px[i];
    out.l1 += d.cwiseAbs().sum();
    out.grad.px[i] = (1.0 - lambda_ssim) / n *
                     d.unaryExpr([](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
  }
  out.l1 /= n;

  if (lambda_ssim > 0) {
    double mean_ssim = 0;
    for (int ch = 0; ch < 3; ++ch) {
      ImageF x(render.width, render.height), y(render.width, render.height);
      for (size_t i = 0; i < render.size(); ++i) {
        x.px[i] = render.px[i][ch];
        y.px[i] = gt.px[i][ch];
      }
      const auto res = ssim_detail::ssim_channel(x, y, true);
      mean_ssim += res.mean_ssim / 3.0;
      // d[(1 - ssim)/2]/dx = -grad/2, channel-averaged
      for (size_t i = 0; i < render.size(); ++i)
        out.grad.px[i][ch] += lambda_ssim * (-0.5) * res.grad.px[i] / 3.0;
    }
    out.dssim = (1.0 - mean_ssim) / 2.0;
  }
  out.value = (1.0 - lambda_ssim) * out.l1 + lambda_ssim * out.dssim;
  return out;
}

struct DepthLoss {
  double value = 0;
  ImageF grad;
};

/// Mean L1 over pixels with valid_mask = 1 and alpha_acc > 0.5.
inline DepthLoss depth_loss(const ImageF& render_depth, const ImageF& alpha_acc,
                            const ImageF& provider_depth, const ImageU8& valid_mask) {
  require_same_shape(render_depth, provider_depth, "depth_loss");
  if (render_depth.width != valid_mask.width || render_depth.height != valid_mask.height)
    throw ShapeMismatch("depth_loss: mask shape differs");
  DepthLoss out;
  out.grad = ImageF(render_depth.width, render_depth.height, 0.0);
  size_t count = 0;
  for (size_t i = 0; i < render_depth.size(); ++i)
    if (valid_mask.px[i] && alpha_acc.px[i] > 0.5) ++count;
  if (count == 0) return out;
  for (size_t i = 0; i < render_depth.size(); ++i) {
    if (!(valid_mask.px[i] && alpha_acc.px[i] > 0.5)) continue;
    const double d = render_depth.px[i] - provider_depth.px[i];
    out.value += std::abs(d);
    out.grad.px[i] = (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) / double(count);
  }
  out.value /= double(count);
  return out;
}

struct MotionLoss {
  double value = 0;
  ImageF grad;  // straight-through gradient w.r.t. the continuous velocity map
};

/// Forward: mean over pixels of (Vhat - M)^2 with Vhat = 1[V > v_thr].
/// Backward: straight-through, grad = 2 (Vhat - M) / N w.r.t. V.
inline MotionLoss motion_loss(const ImageF& velocity, const ImageU8& motion_mask,
                              double v_thr) {
  if (velocity.width != motion_mask.width || velocity.height != motion_mask.height)
    throw ShapeMismatch("motion_loss: mask shape differs");
  MotionLoss out;
  out.grad = ImageF(velocity.width, velocity.height, 0.0);
  const double n = double(velocity.size());
  for (size_t i = 0; i < velocity.size(); ++i) {
    const double vhat = velocity.px[i] > v_thr ? 1.0 : 0.0;
    const double m = motion_mask.px[i] ? 1.0 : 0.0;
    out.value += sq(vhat - m);
    out.grad.px[i] = 2.0 * (vhat - m) / n;
  }
  out.value /= n;
  return out;
}

/// The motion loss may only update velocities: everything else in its
/// gradient, including the pose delta, is zeroed.
inline SceneGrads apply_frozen_rule(const SceneGrads& motion_grads) {
  SceneGrads out;
  out.resize(motion_grads.mu.size(),
             motion_grads.sh.empty() ? 0 : int(motion_grads.sh[0].size()));
  out.v = motion_grads.v;
  return out;
}

// --------------------------------------------------------------------- adam

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-15;
};

/// One Adam update of a scalar parameter given its gradient and moments.
inline void adam_update(double& x, double g, double& m, double& v, int64_t step, double lr,
                        const AdamParams& p = {}) {
  m = p.beta1 * m + (1.0 - p.beta1) * g;
  v = p.beta2 * v + (1.0 - p.beta2) * g * g;
  const double mhat = m / (1.0 - std::pow(p.beta1, double(step)));
  const double vhat = v / (1.0 - std::pow(p.beta2, double(step)));
  x -= lr * mhat / (std::sqrt(vhat) + p.eps);
}

/// Adam state for every Gaussian parameter group plus per-frame pose deltas.
/// Moment buffers reuse the SceneGrads layout.
class AdamOptimizer {
 public:
  AdamOptimizer() = default;
  AdamOptimizer(size_t n_gaussians, int sh_coeffs, size_t n_frames) {
    m_.resize(n_gaussians, sh_coeffs);
    v_.resize(n_gaussians, sh_coeffs);
    delta_m_.assign(n_frames, Vec6::Zero());
    delta_v_.assign(n_frames, Vec6::Zero());
  }

  int64_t step_count() const { return step_; }

  /// Applies one step to the Gaussian parameters. Throws NonFiniteGradient
  /// on non-finite input (callers catch it, log and continue).
  void step_scene(GaussianScene& scene, const SceneGrads& grads, const LearningRates& lr,
                  double mean_lr_scale) {
    if (!grads.all_finite())
      throw NonFiniteGradient("adam: non-finite gradient, step skipped");
    ++step_;
    auto& gs = scene.mutable_gaussians();
    const AdamParams p;
    for (size_t i = 0; i < gs.size(); ++i) {
      DynamicGaussian& g = gs[i];
      for (int k = 0; k < 3; ++k) {
        adam_update(g.mu[k], grads.mu[i][k], m_.mu[i][k], v_.mu[i][k], step_,
                    lr.mean * mean_lr_scale, p);
        adam_update(g.log_scale[k], grads.log_scale[i][k], m_.log_scale[i][k],
                    v_.log_scale[i][k], step_, lr.scale, p);
        adam_update(g.v[k], grads.v[i][k], m_.v[i][k], v_.v[i][k], step_, lr.velocity, p);
      }
      for (int k = 0; k < 4; ++k) {
        double& coeff = k == 0 ? g.rot_q.w()
                      : k == 1 ? g.rot_q.x()
                      : k == 2 ? g.rot_q.y()
                               : g.rot_q.z();
        adam_update(coeff, grads.rot_q[i][k], m_.rot_q[i][k], v_.rot_q[i][k], step_,
                    lr.rotation, p);
      }
      g.rot_q.normalize();
      adam_update(g.logit_opacity, grads.logit_opacity[i], m_.logit_opacity[i],
                  v_.logit_opacity[i], step_, lr.opacity, p);
      adam_update(g.tau, grads.tau[i], m_.tau[i], v_.tau[i], step_, lr.tau, p);
      adam_update(g.log_beta, grads.log_beta[i], m_.log_beta[i], v_.log_beta[i], step_,
                  lr.log_beta, p);
      for (size_t k = 0; k < g.sh.size(); ++k)
        for (int ch = 0; ch < 3; ++ch)
          adam_update(g.sh[k][ch], grads.sh[i][k][ch], m_.sh[i][k][ch], v_.sh[i][k][ch],
                      step_, lr.sh, p);
    }
  }

  /// One step on a single frame's pose delta (separate step counter).
  void step_delta(size_t frame, PoseDelta& delta, const Vec6& grad, double lr_pose) {
    if (!grad.allFinite()) throw NonFiniteGradient("adam: non-finite pose gradient");
    delta_steps_.resize(delta_m_.size(), 0);
    const int64_t step = ++delta_steps_[frame];
    const AdamParams p;
    for (int k = 0; k < 6; ++k) {
      double& coeff = k < 3 ? delta.omega[k] : delta.upsilon[k - 3];
      adam_update(coeff, grad[k], delta_m_[frame][k], delta_v_[frame][k], step, lr_pose, p);
    }
  }

  /// Keeps moments of surviving Gaussians across densify/prune; new entries
  /// (src < 0) start from zero moments.
  void remap(const std::vector<int>& src, int sh_coeffs) {
    SceneGrads m2, v2;
    m2.resize(src.size(), sh_coeffs);
    v2.resize(src.size(), sh_coeffs);
    for (size_t i = 0; i < src.size(); ++i) {
      if (src[i] < 0) continue;
      const size_t j = size_t(src[i]);
      m2.mu[i] = m_.mu[j];
      v2.mu[i] = v_.mu[j];
      m2.log_scale[i] = m_.log_scale[j];
      v2.log_scale[i] = v_.log_scale[j];
      m2.rot_q[i] = m_.rot_q[j];
      v2.rot_q[i] = v_.rot_q[j];
      m2.logit_opacity[i] = m_.logit_opacity[j];
      v2.logit_opacity[i] = v_.logit_opacity[j];
      m2.tau[i] = m_.tau[j];
      v2.tau[i] = v_.tau[j];
      m2.log_beta[i] = m_.log_beta[j];
      v2.log_beta[i] = v_.log_beta[j];
      m2.v[i] = m_.v[j];
      v2.v[i] = v_.v[j];
      m2.sh[i] = m_.sh[j];
      v2.sh[i] = v_.sh[j];
    }
    m_ = std::move(m2);
    v_ = std::move(v2);
  }

  void serialize(std::ostream& out) const {
    auto put = [&](const void* p, size_t n) { out.write(static_cast<const char*>(p), n); };
    put(&step_, sizeof(step_));
    const uint64_t n = m_.mu.size(), f = delta_m_.size(),
                   k = m_.sh.empty() ? 0 : m_.sh[0].size();
    put(&n, 8);
    put(&f, 8);
    put(&k, 8);
    auto put_grads = [&](const SceneGrads& g) {
      for (size_t i = 0; i < n; ++i) {
        put(g.mu[i].data(), 24);
        put(g.log_scale[i].data(), 24);
        put(g.v[i].data(), 24);
        put(g.rot_q[i].data(), 32);
        put(&g.logit_opacity[i], 8);
        put(&g.tau[i], 8);
        put(&g.log_beta[i], 8);
        for (const auto& s : g.sh[i]) put(s.data(), 24);
      }
    };
    put_grads(m_);
    put_grads(v_);
    for (size_t i = 0; i < f; ++i) {
      put(delta_m_[i].data(), 48);
      put(delta_v_[i].data(), 48);
    }
    std::vector<int64_t> steps(delta_steps_);
    steps.resize(f, 0);
    put(steps.data(), 8 * f);
  }

  void deserialize(std::istream& in) {
    auto get = [&](void* p, size_t n) {
      in.read(static_cast<char*>(p), n);
      if (!in) throw IoError("optimizer state: truncated stream");
    };
    get(&step_, sizeof(step_));
    uint64_t n = 0, f = 0, k = 0;
    get(&n, 8);
    get(&f, 8);
    get(&k, 8);
    m_.resize(n, int(k));
    v_.resize(n, int(k));
    auto get_grads = [&](SceneGrads& g) {
      for (size_t i = 0; i < n; ++i) {
        get(g.mu[i].data(), 24);
        get(g.log_scale[i].data(), 24);
        get(g.v[i].data(), 24);
        get(g.rot_q[i].data(), 32);
        get(&g.logit_opacity[i], 8);
        get(&g.tau[i], 8);
        get(&g.log_beta[i], 8);
        for (auto& s : g.sh[i]) get(s.data(), 24);
      }
    };
    get_grads(m_);
    get_grads(v_);
    delta_m_.assign(f, Vec6::Zero());
    delta_v_.assign(f, Vec6::Zero());
    for (size_t i = 0; i < f; ++i) {
      get(delta_m_[i].data(), 48);
      get(delta_v_[i].data(), 48);
    }
    delta_steps_.assign(f, 0);
    if (f) get(delta_steps_.data(), 8 * f);
  }

 private:
  SceneGrads m_, v_;
  std::vector<Vec6> delta_m_, delta_v_;
  std::vector<int64_t> delta_steps_;
  int64_t step_ = 0;
};

// ----------------------------------------------------------- densify / prune

struct DensifyAccum {
  std::vector<Vec3> mu_grad_sum;
  std::vector<double> mu_grad_norm_sum;
  std::vector<int> count;

  void resize(size_t n) {
    mu_grad_sum.assign(n, Vec3::Zero());
    mu_grad_norm_sum.assign(n, 0.0);
    count.assign(n, 0);
  }

  void add(const SceneGrads& g) {
    for (size_t i = 0; i < mu_grad_sum.size(); ++i) {
      mu_grad_sum[i] += g.mu[i];
      mu_grad_norm_sum[i] += g.mu[i].norm();
      ++count[i];
    }
  }
};

struct DensifyReport {
  int cloned = 0, split = 0, pruned = 0;
  bool min_population_triggered = false;
  std::vector<int> src;  // for each new index: source index, or -1 for fresh entries
};

/// Clones small high-gradient Gaussians (shifted against the gradient),
/// splits large ones (two children, scale / 1.6), prunes low opacity.
/// Refuses to empty the scene: keeps the top `min_population` by opacity.
inline DensifyReport densify_and_prune(GaussianScene& scene, const DensifyAccum& accum,
                                       const TrainSchedule& sched, double scene_extent) {
  DensifyReport rep;
  const auto& gs = scene.gaussians();
  const size_t n = gs.size();
  const double size_thr = 0.01 * scene_extent;

  std::vector<DynamicGaussian> next;
  std::vector<int> src;
  next.reserve(n + n / 8);
  for (size_t i = 0; i < n; ++i) {
    const DynamicGaussian& g = gs[i];
    const double mean_grad =
        accum.count[i] ? accum.mu_grad_norm_sum[i] / accum.count[i] : 0.0;
    const bool high_grad = mean_grad > sched.grad_densify_thr;
    const double max_scale = g.scale().maxCoeff();

    if (high_grad && max_scale > size_thr) {
      // split: two children straddling the mean along the dominant axis
      int axis = 0;
      g.scale().maxCoeff(&axis);
      const Vec3 dir = g.rot_q.normalized().toRotationMatrix().col(axis);
      for (int child = 0; child < 2; ++child) {
        DynamicGaussian c = g;
        c.mu += (child ? 1.0 : -1.0) * 0.5 * max_scale * dir;
        c.log_scale.array() -= std::log(1.6);
        next.push_back(std::move(c));
        src.push_back(child == 0 ? int(i) : -1);
      }
      ++rep.split;
    } else if (high_grad) {
      // clone shifted down the accumulated gradient
      next.push_back(g);
      src.push_back(int(i));
      DynamicGaussian c = g;
      const Vec3 gsum = accum.mu_grad_sum[i];
      if (gsum.norm() > 0) c.mu -= gsum.normalized() * 0.5 * max_scale;
      next.push_back(std::move(c));
      src.push_back(-1);
      ++rep.cloned;
    } else {
      next.push_back(g);
      src.push_back(int(i));
    }
  }

  // prune by opacity
  std::vector<DynamicGaussian> kept;
  std::vector<int> kept_src;
  for (size_t i = 0; i < next.size(); ++i) {
    if (next[i].opacity() < sched.prune_opacity_thr) {
      ++rep.pruned;
      continue;
    }
    kept.push_back(std::move(next[i]));
    kept_src.push_back(src[i]);
  }

  const size_t floor_n = std::min(next.size(), size_t(sched.min_population));
  if (kept.size() < floor_n) {
    // refuse the prune: keep the most opaque `floor_n` of the pre-prune set
    rep.min_population_triggered = true;
    std::vector<size_t> order(next.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      return next[a].logit_opacity > next[b].logit_opacity;
    });
    kept.clear();
    kept_src.clear();
    for (size_t k = 0; k < floor_n; ++k) {
      kept.push_back(next[order[k]]);
      kept_src.push_back(src[order[k]]);
    }
    rep.pruned = int(next.size() - kept.size());
  }

  scene.mutable_gaussians() = std::move(kept);
  rep.src = std::move(kept_src);
  return rep;
}

// ------------------------------------------------------------------ training

struct TrainConfig {
  LossWeights loss;
  TrainSchedule sched;
  LearningRates lr;
  RasterConfig raster;
  uint64_t seed = 0;
  int log_interval = 50;
};

struct IterationLog {
  int iter = 0;
  double total = 0, l_photo = 0, l_depth = 0, l_motion = 0, psnr = 0;
  size_t gaussians = 0;
};

struct TrainResult {
  GaussianScene scene;
  Trajectory refined;            // provider poses with learned deltas applied
  std::vector<PoseDelta> deltas;
  std::vector<IterationLog> log;
  int skipped_steps = 0;
};

namespace trainer_detail {

inline double scene_extent(const GaussianScene& scene) {
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (const auto& g : scene.gaussians()) {
    lo = lo.cwiseMin(g.mu);
    hi = hi.cwiseMax(g.mu);
  }
  return scene.empty() ? 1.0 : std::max(1e-6, 0.5 * (hi - lo).norm());
}

}  // namespace trainer_detail

/// Two-phase training loop. Phase 1 trains Gaussian parameters at fixed
/// provider poses; phase 2 additionally refines per-frame pose deltas from
/// static-only renders with dynamic pixels masked out.
inline TrainResult train(GaussianScene scene, const std::vector<Frame>& frames,
                         const Trajectory& provider_traj, const CameraIntrinsics& K,
                         const TimeMap& tmap, const TrainConfig& cfg,
                         AdamOptimizer* resume_opt = nullptr, int start_iter = 0,
                         std::vector<PoseDelta>* resume_deltas = nullptr,
                         Rng* resume_rng = nullptr) {
  if (frames.size() < 2) throw EmptyDataset("train: need at least 2 frames");
  if (frames.size() != provider_traj.size())
    throw LengthMismatch("train: frames vs provider trajectory");
  cfg.loss.validate();
  cfg.sched.validate();
  const bool need_masks = cfg.loss.lambda_motion > 0;
  if (need_masks)
    for (const auto& f : frames)
      if (!f.has_mask())
        throw Error("train: lambda_motion > 0 but a frame has no motion mask");

  TrainResult res;
  res.scene = std::move(scene);
  res.deltas.assign(frames.size(), PoseDelta{});
  if (resume_deltas) res.deltas = *resume_deltas;

  AdamOptimizer opt(res.scene.size(), res.scene.config.sh_coeff_count(), frames.size());
  if (resume_opt) opt = *resume_opt;

  Rng rng(cfg.seed);
  if (resume_rng) rng = *resume_rng;

  const double extent = trainer_detail::scene_extent(res.scene);
  const int pose_start_iter = int(cfg.sched.pose_refine_start * cfg.sched.total_iters);
  const int densify_stop_iter = int(cfg.sched.densify_stop * cfg.sched.total_iters);

  DensifyAccum accum;
  accum.resize(res.scene.size());

  std::vector<size_t> order(frames.size());
  std::iota(order.begin(), order.end(), 0);
  size_t order_pos = order.size();  // trigger reshuffle on first use

  const ImageU8 all_valid = [&] {
    ImageU8 m(K.width, K.height, 1);
    return m;
  }();

  for (int iter = start_iter; iter < cfg.sched.total_iters; ++iter) {
    if (order_pos >= order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      order_pos = 0;
    }
    const size_t fi = order[order_pos++];
    const Frame& frame = frames[fi];
    const double t = tmap.normalize(frame.timestamp);
    const bool pose_phase = iter >= pose_start_iter;

    const RenderOutput out =
        render(res.scene, provider_traj[fi], res.deltas[fi], K, t, cfg.raster);

    const PhotometricLoss photo = photometric_loss(out.color, frame.image, cfg.loss.lambda_ssim);

    ImageU8 depth_valid(K.width, K.height, 1);
    for (size_t p = 0; p < frame.depth.px.size(); ++p)
      depth_valid.px[p] = frame.depth.px[p] > 0;
    const DepthLoss dep =
        depth_loss(out.depth, out.alpha_acc, frame.depth, depth_valid);

    MotionLoss mot;
    if (need_masks) mot = motion_loss(out.velocity, frame.motion_mask, res.scene.config.v_thr);

    const double total_loss = photo.value + cfg.loss.lambda_depth * dep.value +
                              cfg.loss.lambda_motion * mot.value;
    if (!std::isfinite(total_loss))
      throw NonFiniteGradient("train: non-finite loss at iteration " + std::to_string(iter));

    // photometric + depth backward
    ImageF weighted_depth_grad = dep.grad;
    for (auto& v : weighted_depth_grad.px) v *= cfg.loss.lambda_depth;
    const ImageF zero_f(K.width, K.height, 0.0);
    const ImageRGB zero_c(K.width, K.height, Vec3::Zero());
    SceneGrads grads =
        rasterize_backward(res.scene, out, photo.grad, weighted_depth_grad, zero_f);

    // motion backward, frozen to velocities only
    if (need_masks && cfg.loss.lambda_motion > 0) {
      ImageF mgrad = mot.grad;
      for (auto& v : mgrad.px) v *= cfg.loss.lambda_motion;
      const SceneGrads motion_grads =
          rasterize_backward(res.scene, out, zero_c, zero_f, mgrad);
      const SceneGrads frozen = apply_frozen_rule(motion_grads);
      for (size_t i = 0; i < res.scene.size(); ++i) grads.v[i] += frozen.v[i];
    }

    accum.add(grads);

    // log before the step so the psnr matches the rendered image
    if (iter % cfg.log_interval == 0 || iter + 1 == cfg.sched.total_iters) {
      IterationLog row;
      row.iter = iter;
      row.total = total_loss;
      row.l_photo = photo.value;
      row.l_depth = dep.value;
      row.l_motion = mot.value;
      row.psnr = psnr(out.color, frame.image);
      row.gaussians = res.scene.size();
      res.log.push_back(row);
    }

    const double progress = double(iter) / std::max(1, cfg.sched.total_iters - 1);
    const double mean_scale = extent * std::pow(cfg.lr.mean_final_mult, progress);
    try {
      opt.step_scene(res.scene, grads, cfg.lr, mean_scale);
    } catch (const NonFiniteGradient&) {
      ++res.skipped_steps;
    }

    // phase 2: pose refinement from a static-only render, dynamic pixels
    // masked; gaussian parameters keep training on the full render above
    if (pose_phase) {
      const RenderOutput stat =
          render_static_only(res.scene, provider_traj[fi], res.deltas[fi], K, t, cfg.raster);
      PhotometricLoss pose_photo =
          photometric_loss(stat.color, frame.image, cfg.loss.lambda_ssim);
      if (frame.has_mask())
        for (size_t p = 0; p < pose_photo.grad.px.size(); ++p)
          if (frame.motion_mask.px[p]) pose_photo.grad.px[p].setZero();
      const SceneGrads pose_grads =
          rasterize_backward(res.scene, stat, pose_photo.grad, zero_f, zero_f);
      try {
        opt.step_delta(fi, res.deltas[fi], pose_grads.pose_delta, cfg.lr.pose);
      } catch (const NonFiniteGradient&) {
        ++res.skipped_steps;
      }
    }

    // densification
    if (iter > 0 && iter < densify_stop_iter && iter % cfg.sched.densify_interval == 0) {
      const DensifyReport rep = densify_and_prune(res.scene, accum, cfg.sched, extent);
      opt.remap(rep.src, res.scene.config.sh_coeff_count());
      accum.resize(res.scene.size());
    }
  }

  res.refined.poses.reserve(frames.size());
  for (size_t i = 0; i < frames.size(); ++i) {
    CameraPose p = apply_delta(provider_traj[i], res.deltas[i]);
    p.timestamp = provider_traj[i].timestamp;
    res.refined.poses.push_back(p);
  }
  return res;
}

/// CSV rows for the metrics log: iter,total,photo,depth,motion,psnr,gaussians.
inline std::string metrics_csv(const std::vector<IterationLog>& log) {
  std::ostringstream out;
  out << "iter,total,photo,depth,motion,psnr,gaussians\n";
  out << std::setprecision(12);
  for (const auto& row : log)
    out << row.iter << ',' << row.total << ',' << row.l_photo << ',' << row.l_depth << ','
        << row.l_motion << ',' << row.psnr << ',' << row.gaussians << '\n';
  return out.str();
}

}  // namespace dgs
