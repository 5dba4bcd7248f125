#pragma once

// Finite-difference harness for the rasterizer backward pass. The loss is a
// fixed random linear functional of the color/depth/velocity buffers, so its
// gradient w.r.t. each buffer is the weight image itself.

#include "dgs/rasterizer.hpp"

#include "test_support.hpp"

namespace dgs_test {

using namespace dgs;

struct FdCase {
  GaussianScene scene;
  CameraPose pose;
  PoseDelta delta;
  CameraIntrinsics K;
  double t = 0.5;
  RasterConfig rcfg;
  ImageRGB w_color;
  ImageF w_depth, w_vel;
};

/// Random scene fully in front of the camera, smooth configuration:
/// cutoffs and bounds disabled so the loss is differentiable everywhere.
inline FdCase make_fd_case(Rng& rng, int n_gaussians, int img = 32, bool with_delta = true) {
  std::uniform_real_distribution<double> u(-1, 1);
  FdCase c;
  c.K = CameraIntrinsics{double(img), double(img), img / 2.0, img / 2.0, img, img};
  c.rcfg.contrib_cutoff = 0;
  c.rcfg.early_stop_T = 0;
  c.rcfg.sigma_bound = 0;
  c.rcfg.threads = 1;

  c.pose.r = Quat(Eigen::AngleAxisd(0.1 * u(rng), random_unit_vec(rng))).normalized();
  c.pose.t = Vec3(u(rng), u(rng), u(rng)) * 0.2;
  if (with_delta) {
    c.delta.omega = Vec3(u(rng), u(rng), u(rng)) * 0.1;
    c.delta.upsilon = Vec3(u(rng), u(rng), u(rng)) * 0.1;
  }

  SceneConfig cfg;
  c.scene = GaussianScene(cfg);
  auto& gs = c.scene.mutable_gaussians();
  const CameraPose eff = apply_delta(c.pose, c.delta);
  for (int i = 0; i < n_gaussians; ++i) {
    DynamicGaussian g;
    // park the peak-time mean well inside the frustum of the effective camera
    const Vec3 pc(u(rng) * 1.2, u(rng) * 1.2, 3.5 + 1.5 * u(rng));
    g.mu = eff.to_world(pc);
    g.log_scale = Vec3(u(rng), u(rng), u(rng)) * 0.3 + Vec3::Constant(std::log(0.25));
    g.rot_q = random_quat(rng);
    g.logit_opacity = u(rng) * 1.5;
    g.sh.assign(4, Vec3::Zero());
    for (auto& s : g.sh) s = Vec3(u(rng), u(rng), u(rng)) * 0.25;
    g.v = random_unit_vec(rng) * (0.3 + 0.5 * std::abs(u(rng)));
    g.tau = 0.5 + 0.3 * u(rng);
    g.log_beta = std::log(0.4) + 0.3 * u(rng);
    gs.push_back(g);
  }

  c.w_color = ImageRGB(img, img);
  c.w_depth = ImageF(img, img);
  c.w_vel = ImageF(img, img);
  for (int i = 0; i < img * img; ++i) {
    c.w_color.px[i] = Vec3(u(rng), u(rng), u(rng));
    c.w_depth.px[i] = 0.2 * u(rng);  // depth values are O(4): keep terms balanced
    c.w_vel.px[i] = u(rng);
  }
  return c;
}

inline double fd_loss(const FdCase& c, const GaussianScene& scene, const PoseDelta& delta) {
  const RenderOutput out = render(scene, c.pose, delta, c.K, c.t, c.rcfg);
  double L = 0;
  for (size_t i = 0; i < out.color.size(); ++i) {
    L += c.w_color.px[i].dot(out.color.px[i]);
    L += c.w_depth.px[i] * out.depth.px[i];
    L += c.w_vel.px[i] * out.velocity.px[i];
  }
  return L;
}

inline SceneGrads analytic_grads(const FdCase& c) {
  const RenderOutput out = render(c.scene, c.pose, c.delta, c.K, c.t, c.rcfg);
  return rasterize_backward(c.scene, out, c.w_color, c.w_depth, c.w_vel);
}

inline double& quat_coeff(Quat& q, int k) {
  switch (k) {
    case 0: return q.w();
    case 1: return q.x();
    case 2: return q.y();
    default: return q.z();
  }
}

struct GradCheckReport {
  double worst_rel = 0;
  std::string worst_class;
};

/// Checks every parameter class against central differences; returns the
/// worst per-class relative L2 error.
inline GradCheckReport check_all_gradients(const FdCase& c, double h = 1e-5) {
  const SceneGrads g = analytic_grads(c);
  const size_t n = c.scene.size();
  GradCheckReport rep;

  auto record = [&](const std::string& name, const Eigen::VectorXd& ana,
                    const Eigen::VectorXd& fd) {
    const double err = (ana - fd).norm() / std::max({ana.norm(), fd.norm(), 1e-7});
    if (err > rep.worst_rel) {
      rep.worst_rel = err;
      rep.worst_class = name;
    }
  };

  // ref_at(scene, i, k) must return a reference to the addressed scalar
  auto gather = [&](const std::string& name, int dims, auto&& ana_at, auto&& ref_at) {
    Eigen::VectorXd ana(n * dims), fd(n * dims);
    for (size_t i = 0; i < n; ++i)
      for (int k = 0; k < dims; ++k) {
        ana[i * dims + k] = ana_at(i, k);
        GaussianScene plus = c.scene, minus = c.scene;
        ref_at(plus, i, k) += h;
        ref_at(minus, i, k) -= h;
        fd[i * dims + k] =
            (fd_loss(c, plus, c.delta) - fd_loss(c, minus, c.delta)) / (2 * h);
      }
    record(name, ana, fd);
  };

  gather("mu", 3, [&](size_t i, int k) { return g.mu[i][k]; },
         [](GaussianScene& s, size_t i, int k) -> double& {
           return s.mutable_gaussians()[i].mu[k];
         });
  gather("log_scale", 3, [&](size_t i, int k) { return g.log_scale[i][k]; },
         [](GaussianScene& s, size_t i, int k) -> double& {
           return s.mutable_gaussians()[i].log_scale[k];
         });
  gather("rot_q", 4, [&](size_t i, int k) { return g.rot_q[i][k]; },
         [](GaussianScene& s, size_t i, int k) -> double& {
           return quat_coeff(s.mutable_gaussians()[i].rot_q, k);
         });
  gather("logit_opacity", 1, [&](size_t i, int) { return g.logit_opacity[i]; },
         [](GaussianScene& s, size_t i, int) -> double& {
           return s.mutable_gaussians()[i].logit_opacity;
         });
  gather("sh", 12, [&](size_t i, int k) { return g.sh[i][k / 3][k % 3]; },
         [](GaussianScene& s, size_t i, int k) -> double& {
           return s.mutable_gaussians()[i].sh[k / 3][k % 3];
         });
  gather("v", 3, [&](size_t i, int k) { return g.v[i][k]; },
         [](GaussianScene& s, size_t i, int k) -> double& {
           return s.mutable_gaussians()[i].v[k];
         });
  gather("tau", 1, [&](size_t i, int) { return g.tau[i]; },
         [](GaussianScene& s, size_t i, int) -> double& {
           return s.mutable_gaussians()[i].tau;
         });
  gather("log_beta", 1, [&](size_t i, int) { return g.log_beta[i]; },
         [](GaussianScene& s, size_t i, int) -> double& {
           return s.mutable_gaussians()[i].log_beta;
         });

  // pose delta
  {
    Eigen::VectorXd ana(6), fd(6);
    for (int k = 0; k < 6; ++k) {
      ana[k] = g.pose_delta[k];
      PoseDelta dp = c.delta, dm = c.delta;
      (k < 3 ? dp.omega[k] : dp.upsilon[k - 3]) += h;
      (k < 3 ? dm.omega[k] : dm.upsilon[k - 3]) -= h;
      fd[k] = (fd_loss(c, c.scene, dp) - fd_loss(c, c.scene, dm)) / (2 * h);
    }
    record("pose_delta", ana, fd);
  }
  return rep;
}

}  // namespace dgs_test
