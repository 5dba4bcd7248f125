#pragma once

#include "dgs/core.hpp"
#include "dgs/se3.hpp"

namespace dgs {

/// DC coefficient of the real spherical harmonics basis (degree 0).
constexpr double kShC0 = 0.28209479177387814;

/// One time-varying Gaussian primitive. The mean oscillates sinusoidally
/// around mu with instant velocity v at the life peak tau; opacity decays
/// as a Gaussian envelope of width beta around tau.
struct DynamicGaussian {
  Vec3 mu{0, 0, 0};            // mean position at the life peak, world units
  Vec3 log_scale{0, 0, 0};     // per-axis scale, stored as log
  Quat rot_q{1, 0, 0, 0};      // rotation factor of the covariance
  double logit_opacity = 0;    // alpha = sigmoid(logit_opacity)
  std::vector<Vec3> sh;        // spherical harmonics coefficients, one Vec3 (rgb) per basis
  Vec3 v{0, 0, 0};             // instant velocity at t = tau, world units per unit time
  double tau = 0;              // life peak, normalized time
  double log_beta = 0;         // beta = exp(log_beta), temporal opacity decay

  double opacity() const { return sigmoid(logit_opacity); }
  double beta() const { return std::exp(log_beta); }
  Vec3 scale() const { return log_scale.array().exp(); }

  /// Sigma = R * diag(scale)^2 * R^T; symmetric positive definite.
  Mat3 covariance() const {
    const Mat3 R = rot_q.normalized().toRotationMatrix();
    const Mat3 M = R * scale().asDiagonal();
    return M * M.transpose();
  }
};

struct SceneConfig {
  double cycle_length = 0.3;  // global period of the mean motion, normalized time
  double v_thr = 0.5;         // velocity-scalar threshold separating static/dynamic
  double v_scale = 0.5;       // speed normalization for the [0,1) velocity mapping
  int sh_degree = 1;          // 0..3

  int sh_coeff_count() const { return (sh_degree + 1) * (sh_degree + 1); }

  void validate() const {
    if (cycle_length <= 0) throw Error("scene config: cycle_length must be > 0");
    if (v_thr <= 0 || v_thr >= 1) throw Error("scene config: v_thr must be in (0,1)");
    if (v_scale <= 0) throw Error("scene config: v_scale must be > 0");
    if (sh_degree < 0 || sh_degree > 3) throw Error("scene config: sh_degree must be in 0..3");
  }
};

class GaussianScene {
 public:
  SceneConfig config;

  GaussianScene() = default;
  explicit GaussianScene(SceneConfig cfg) : config(cfg) {}

  const std::vector<DynamicGaussian>& gaussians() const { return gaussians_; }

  /// Mutable access; bumps the revision so stale backward state is detected.
  std::vector<DynamicGaussian>& mutable_gaussians() {
    ++revision_;
    return gaussians_;
  }

  size_t size() const { return gaussians_.size(); }
  bool empty() const { return gaussians_.empty(); }
  uint64_t revision() const { return revision_; }

 private:
  std::vector<DynamicGaussian> gaussians_;
  uint64_t revision_ = 0;
};

// ------------------------------------------------------------ temporal model

struct TimeState {
  Vec3 mu_t;
  double alpha_t;
};

/// Time-shifted mean and opacity:
///   mu_t    = mu + (l / 2pi) * sin(2pi (t - tau) / l) * v
///   alpha_t = alpha * exp(-(t - tau)^2 / (2 beta^2))
inline TimeState eval_at_time(const DynamicGaussian& g, double t, const SceneConfig& cfg) {
  const double l = cfg.cycle_length;
  const double phase = 2.0 * M_PI * (t - g.tau) / l;
  const double dt = t - g.tau;
  const double beta = g.beta();
  TimeState out;
  out.mu_t = g.mu + (l / (2.0 * M_PI)) * std::sin(phase) * g.v;
  out.alpha_t = g.opacity() * std::exp(-dt * dt / (2.0 * beta * beta));
  return out;
}

/// Analytic partials of eval_at_time. d(mu_t)/d(mu) is the identity and
/// d(mu_t)/d(v) is sin_factor * I, so both are returned as scalars/vectors.
struct TimeStateGrad {
  double d_mu_t_d_v;       // scalar factor: (l/2pi) sin(phase)
  Vec3 d_mu_t_d_tau;       // -cos(phase) * v
  double d_alpha_d_logit;  // envelope * alpha * (1 - alpha)
  double d_alpha_d_tau;    // alpha_t * dt / beta^2
  double d_alpha_d_log_beta;  // alpha_t * dt^2 / beta^2
};

inline TimeStateGrad eval_at_time_grad(const DynamicGaussian& g, double t,
                                       const SceneConfig& cfg) {
  const double l = cfg.cycle_length;
  const double phase = 2.0 * M_PI * (t - g.tau) / l;
  const double dt = t - g.tau;
  const double beta = g.beta();
  const double alpha = g.opacity();
  const double envelope = std::exp(-dt * dt / (2.0 * beta * beta));
  TimeStateGrad grad;
  grad.d_mu_t_d_v = (l / (2.0 * M_PI)) * std::sin(phase);
  grad.d_mu_t_d_tau = -std::cos(phase) * g.v;
  grad.d_alpha_d_logit = envelope * alpha * (1.0 - alpha);
  grad.d_alpha_d_tau = alpha * envelope * dt / (beta * beta);
  grad.d_alpha_d_log_beta = alpha * envelope * dt * dt / (beta * beta);
  return grad;
}

// ------------------------------------------------------------ velocity scalar

/// Saturating speed mapping s = 1 - exp(-|v| / v_scale), in [0,1).
inline double velocity_scalar(const DynamicGaussian& g, const SceneConfig& cfg) {
  return 1.0 - std::exp(-g.v.norm() / cfg.v_scale);
}

/// d(velocity_scalar)/d(v); zero at v = 0 (subgradient of the norm kink).
inline Vec3 velocity_scalar_grad(const DynamicGaussian& g, const SceneConfig& cfg) {
  const double n = g.v.norm();
  if (n == 0.0) return Vec3::Zero();
  return std::exp(-n / cfg.v_scale) / cfg.v_scale * (g.v / n);
}

/// Partition by velocity_scalar(g) > v_thr.
inline std::pair<std::vector<int>, std::vector<int>> split_static_dynamic(
    const GaussianScene& scene) {
  if (scene.empty()) throw EmptyScene("split_static_dynamic: empty scene");
  std::vector<int> static_ids, dynamic_ids;
  for (int i = 0; i < int(scene.size()); ++i) {
    if (velocity_scalar(scene.gaussians()[i], scene.config) > scene.config.v_thr)
      dynamic_ids.push_back(i);
    else
      static_ids.push_back(i);
  }
  return {static_ids, dynamic_ids};
}

}  // namespace dgs
