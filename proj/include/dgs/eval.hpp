#pragma once

#include "dgs/core.hpp"
#include "dgs/trajectory.hpp"

#include <Eigen/SVD>

#include <limits>

namespace dgs {

// ------------------------------------------------------------- Sim(3)

struct Sim3 {
  double s = 1.0;
  Quat q{1, 0, 0, 0};
  Vec3 t{0, 0, 0};

  Vec3 apply(const Vec3& p) const { return s * (q * p) + t; }

  Sim3 inverse() const {
    Sim3 inv;
    inv.s = 1.0 / s;
    inv.q = q.conjugate();
    inv.t = -(inv.q * t) / s;
    return inv;
  }

  CameraPose apply(const CameraPose& pose) const {
    CameraPose out = pose;
    out.t = apply(pose.t);
    out.r = (q * pose.r).normalized();
    return out;
  }

  Trajectory apply(const Trajectory& traj) const {
    Trajectory out;
    out.poses.reserve(traj.size());
    for (const auto& p : traj.poses) out.poses.push_back(apply(p));
    return out;
  }
};

// ------------------------------------------------- trajectory matching

struct MatchedTrajectories {
  std::vector<Vec3> est, gt;
  std::vector<std::pair<size_t, size_t>> indices;  // (est index, gt index)
  size_t dropped = 0;
};

/// Nearest-neighbor timestamp matching within the given tolerance;
/// unmatched frames on either side are dropped and counted.
inline MatchedTrajectories match_by_timestamp(const Trajectory& est, const Trajectory& gt,
                                              double tol = 1e-6) {
  MatchedTrajectories m;
  size_t j = 0;
  for (size_t i = 0; i < est.size(); ++i) {
    const double ts = est[i].timestamp;
    while (j + 1 < gt.size() &&
           std::abs(gt[j + 1].timestamp - ts) <= std::abs(gt[j].timestamp - ts))
      ++j;
    if (j < gt.size() && std::abs(gt[j].timestamp - ts) <= tol) {
      m.est.push_back(est[i].t);
      m.gt.push_back(gt[j].t);
      m.indices.emplace_back(i, j);
    } else {
      ++m.dropped;
    }
  }
  m.dropped += gt.size() - m.indices.size();
  return m;
}

// ------------------------------------------------------------ alignment

/// Least-squares Sim(3) mapping est points onto gt points
/// (minimizes sum |gt_i - (s R est_i + t)|^2).
inline Sim3 umeyama_align_points(const std::vector<Vec3>& est, const std::vector<Vec3>& gt) {
  const size_t n = est.size();
  if (n != gt.size()) throw LengthMismatch("umeyama: point counts differ");
  if (n < 3) throw DegenerateGeometry("umeyama: need at least 3 correspondences");

  Vec3 mean_e = Vec3::Zero(), mean_g = Vec3::Zero();
  for (size_t i = 0; i < n; ++i) {
    mean_e += est[i];
    mean_g += gt[i];
  }
  mean_e /= double(n);
  mean_g /= double(n);

  Mat3 cov = Mat3::Zero();
  double var_e = 0;
  for (size_t i = 0; i < n; ++i) {
    const Vec3 xe = est[i] - mean_e, xg = gt[i] - mean_g;
    cov += xg * xe.transpose();
    var_e += xe.squaredNorm();
  }
  cov /= double(n);
  var_e /= double(n);
  if (var_e < 1e-18) throw DegenerateGeometry("umeyama: coincident source points");

  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 d = svd.singularValues();
  if (d(1) < 1e-12 * std::max(d(0), 1e-300))
    throw DegenerateGeometry("umeyama: collinear points");

  Vec3 sign_fix = Vec3::Ones();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0) sign_fix(2) = -1;

  const Mat3 R = svd.matrixU() * sign_fix.asDiagonal() * svd.matrixV().transpose();
  Sim3 out;
  out.s = d.dot(sign_fix) / var_e;
  out.q = Quat(R).normalized();
  out.t = mean_g - out.s * (R * mean_e);
  return out;
}

inline Sim3 umeyama_align(const Trajectory& est, const Trajectory& gt) {
  const auto m = match_by_timestamp(est, gt);
  return umeyama_align_points(m.est, m.gt);
}

// -------------------------------------------------------------- pose metrics

struct PoseMetrics {
  double ate_rmse = 0;  // ground-truth scale
  double rpe_t = 0;     // translation RMSE x 100
  double rpe_r = 0;     // rotation RMSE, degrees
};

/// RMSE of per-frame position error between matched, aligned trajectories.
inline double ate(const Trajectory& est_aligned, const Trajectory& gt) {
  if (est_aligned.size() != gt.size() || est_aligned.empty())
    throw LengthMismatch("ate: trajectory lengths differ or empty");
  double acc = 0;
  for (size_t i = 0; i < gt.size(); ++i) acc += (est_aligned[i].t - gt[i].t).squaredNorm();
  return std::sqrt(acc / double(gt.size()));
}

/// Relative pose error over consecutive frames:
/// E = (gt_i^-1 gt_{i+1})^-1 (est_i^-1 est_{i+1});
/// rpe_t = RMSE |trans(E)| * 100, rpe_r = RMSE of the rotation angle in degrees.
inline std::pair<double, double> rpe(const Trajectory& est, const Trajectory& gt,
                                     size_t delta = 1) {
  if (est.size() != gt.size()) throw LengthMismatch("rpe: trajectory lengths differ");
  if (est.size() < delta + 1) throw LengthMismatch("rpe: need at least delta+1 frames");
  double acc_t = 0, acc_r = 0;
  size_t count = 0;
  for (size_t i = 0; i + delta < est.size(); ++i) {
    const CameraPose rel_gt = gt[i].inverse().compose(gt[i + delta]);
    const CameraPose rel_est = est[i].inverse().compose(est[i + delta]);
    const CameraPose err = rel_gt.inverse().compose(rel_est);
    acc_t += err.t.squaredNorm();
    const double angle = 2.0 * std::atan2(err.r.vec().norm(), std::abs(err.r.w()));
    acc_r += angle * angle;
    ++count;
  }
  return {std::sqrt(acc_t / count) * 100.0, rad_to_deg(std::sqrt(acc_r / count))};
}

/// Full protocol: match by timestamp, Sim(3)-align est onto gt, then ATE + RPE.
inline PoseMetrics evaluate_poses(const Trajectory& est, const Trajectory& gt) {
  const auto m = match_by_timestamp(est, gt);
  if (m.indices.size() < 3) throw DegenerateGeometry("evaluate_poses: too few matched frames");
  Trajectory est_m, gt_m;
  for (const auto& [ie, ig] : m.indices) {
    est_m.poses.push_back(est[ie]);
    gt_m.poses.push_back(gt[ig]);
  }
  const Sim3 align = umeyama_align_points(m.est, m.gt);
  const Trajectory est_aligned = align.apply(est_m);
  PoseMetrics out;
  out.ate_rmse = ate(est_aligned, gt_m);
  std::tie(out.rpe_t, out.rpe_r) = rpe(est_aligned, gt_m);
  return out;
}

// -------------------------------------------------------------- image metrics

/// 10 log10(1 / MSE) on [0,1] images; +inf for identical inputs.
inline double psnr(const ImageRGB& a, const ImageRGB& b) {
  require_same_shape(a, b, "psnr");
  double mse = 0;
  for (size_t i = 0; i < a.size(); ++i) mse += (a.px[i] - b.px[i]).squaredNorm();
  mse /= double(a.size() * 3);
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

namespace ssim_detail {

constexpr int kRadius = 5;  // 11x11 window
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

inline const std::array<double, 11>& window() {
  static const std::array<double, 11> w = [] {
    std::array<double, 11> g{};
    double sum = 0;
    for (int i = 0; i < 11; ++i) {
      const double d = i - kRadius;
      g[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
      sum += g[i];
    }
    for (auto& v : g) v /= sum;
    return g;
  }();
  return w;
}

/// Separable 11x11 correlation, valid region only. Input and output are
/// full-size buffers; entries outside the valid region are left at zero.
inline void conv_valid(const ImageF& in, ImageF& out) {
  const int W = in.width, H = in.height;
  const auto& g = window();
  ImageF tmp(W, H, 0.0);
  for (int y = 0; y < H; ++y)
    for (int x = kRadius; x < W - kRadius; ++x) {
      double acc = 0;
      for (int k = -kRadius; k <= kRadius; ++k) acc += g[k + kRadius] * in.at(x + k, y);
      tmp.at(x, y) = acc;
    }
  out = ImageF(W, H, 0.0);
  for (int y = kRadius; y < H - kRadius; ++y)
    for (int x = kRadius; x < W - kRadius; ++x) {
      double acc = 0;
      for (int k = -kRadius; k <= kRadius; ++k) acc += g[k + kRadius] * tmp.at(x, y + k);
      out.at(x, y) = acc;
    }
}

/// Transpose of conv_valid: spreads a valid-region field back over the
/// full image (zero boundary handling).
inline void conv_transpose(const ImageF& in, ImageF& out) {
  const int W = in.width, H = in.height;
  const auto& g = window();
  ImageF tmp(W, H, 0.0);
  for (int x = 0; x < W; ++x)
    for (int y = 0; y < H; ++y) {
      double acc = 0;
      for (int k = -kRadius; k <= kRadius; ++k) {
        const int yy = y + k;
        if (yy >= kRadius && yy < H - kRadius) acc += g[k + kRadius] * in.at(x, yy);
      }
      tmp.at(x, y) = acc;
    }
  out = ImageF(W, H, 0.0);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double acc = 0;
      for (int k = -kRadius; k <= kRadius; ++k) {
        const int xx = x + k;
        if (xx >= kRadius && xx < W - kRadius) acc += g[k + kRadius] * tmp.at(xx, y);
      }
      out.at(x, y) = acc;
    }
}

struct ChannelResult {
  double mean_ssim = 0;
  ImageF grad;  // d(mean ssim over this channel's valid window)/d x, unscaled by channel count
};

/// Mean SSIM of one channel; optionally its gradient w.r.t. x.
inline ChannelResult ssim_channel(const ImageF& x, const ImageF& y, bool want_grad) {
  const int W = x.width, H = x.height;
  if (W < 11 || H < 11) throw ShapeMismatch("ssim: image smaller than the 11x11 window");
  ImageF mu_x, mu_y, xx, yy, xy;
  {
    ImageF x2(W, H), y2(W, H), xyv(W, H);
    for (size_t i = 0; i < x.size(); ++i) {
      x2.px[i] = x.px[i] * x.px[i];
      y2.px[i] = y.px[i] * y.px[i];
      xyv.px[i] = x.px[i] * y.px[i];
    }
    conv_valid(x, mu_x);
    conv_valid(y, mu_y);
    conv_valid(x2, xx);
    conv_valid(y2, yy);
    conv_valid(xyv, xy);
  }
  const int n_valid = (W - 2 * kRadius) * (H - 2 * kRadius);
  ChannelResult res;
  ImageF P(W, H, 0.0), Q(W, H, 0.0), R(W, H, 0.0);
  for (int py = kRadius; py < H - kRadius; ++py)
    for (int px = kRadius; px < W - kRadius; ++px) {
      const double mx = mu_x.at(px, py), my = mu_y.at(px, py);
      const double sx = xx.at(px, py) - mx * mx;
      const double sy = yy.at(px, py) - my * my;
      const double sxy = xy.at(px, py) - mx * my;
      const double A1 = 2 * mx * my + kC1, A2 = 2 * sxy + kC2;
      const double B1 = mx * mx + my * my + kC1, B2 = sx + sy + kC2;
      const double S = (A1 * A2) / (B1 * B2);
      res.mean_ssim += S;
      if (want_grad) {
        const double inv = 1.0 / (B1 * B2);
        P.at(px, py) = (2 * my * A2 - 2 * A1 * my + 2 * S * B1 * mx - 2 * S * mx * B2) * inv;
        Q.at(px, py) = 2 * A1 * inv;
        R.at(px, py) = -2 * S * B1 * inv;
      }
    }
  res.mean_ssim /= n_valid;
  if (want_grad) {
    ImageF wp, wq, wr;
    conv_transpose(P, wp);
    conv_transpose(Q, wq);
    conv_transpose(R, wr);
    res.grad = ImageF(W, H, 0.0);
    for (size_t i = 0; i < x.size(); ++i)
      res.grad.px[i] = (wp.px[i] + y.px[i] * wq.px[i] + x.px[i] * wr.px[i]) / n_valid;
  }
  return res;
}

}  // namespace ssim_detail

/// Mean local SSIM, 11x11 Gaussian window sigma 1.5, valid-window convention,
/// averaged over channels.
inline double ssim(const ImageRGB& a, const ImageRGB& b) {
  require_same_shape(a, b, "ssim");
  double acc = 0;
  for (int c = 0; c < 3; ++c) {
    ImageF xa(a.width, a.height), xb(a.width, a.height);
    for (size_t i = 0; i < a.size(); ++i) {
      xa.px[i] = a.px[i][c];
      xb.px[i] = b.px[i][c];
    }
    acc += ssim_detail::ssim_channel(xa, xb, false).mean_ssim;
  }
  return acc / 3.0;
}

/// |intersection| / |union| of binary masks; 1 when both are empty.
inline double mask_iou(const ImageU8& pred, const ImageU8& gt) {
  require_same_shape(pred, gt, "mask_iou");
  size_t inter = 0, uni = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred.px[i] != 0, g = gt.px[i] != 0;
    inter += (p && g);
    uni += (p || g);
  }
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

}  // namespace dgs
