#pragma once

#include "dgs/core.hpp"
#include "dgs/se3.hpp"

namespace dgs {

struct CameraIntrinsics {
  double fx = 0, fy = 0;   // focal lengths, pixels
  double cx = 0, cy = 0;   // principal point, pixels
  int width = 0, height = 0;
  double znear = 0.01;

  void validate() const {
    if (fx <= 0 || fy <= 0) throw Error("intrinsics: focal lengths must be positive");
    if (cx <= 0 || cx >= width || cy <= 0 || cy >= height)
      throw Error("intrinsics: principal point outside the image");
    if (znear <= 0) throw Error("intrinsics: znear must be positive");
  }
};

/// World-from-camera rigid transform: X_world = R * X_cam + t.
/// Quaternion is Hamilton (w, x, y, z); t is the camera position in world.
struct CameraPose {
  Quat r{1, 0, 0, 0};
  Vec3 t{0, 0, 0};
  double timestamp = 0;

  Mat3 rotation() const { return r.toRotationMatrix(); }

  CameraPose inverse() const {
    CameraPose inv;
    inv.r = r.conjugate();
    inv.t = -(inv.r * t);
    inv.timestamp = timestamp;
    return inv;
  }

  /// this * other as 4x4 homogeneous transforms; keeps this->timestamp.
  CameraPose compose(const CameraPose& other) const {
    CameraPose out;
    out.r = (r * other.r).normalized();
    out.t = r * other.t + t;
    out.timestamp = timestamp;
    return out;
  }

  Vec3 to_camera(const Vec3& p_world) const { return r.conjugate() * (p_world - t); }
  Vec3 to_world(const Vec3& p_cam) const { return r * p_cam + t; }
};

/// Learnable SE(3) refinement increment, applied as pose * exp(omega, upsilon).
struct PoseDelta {
  Vec3 omega{0, 0, 0};
  Vec3 upsilon{0, 0, 0};

  bool is_zero() const { return omega.isZero(0.0) && upsilon.isZero(0.0); }

  Vec6 twist() const {
    Vec6 xi;
    xi.head<3>() = omega;
    xi.tail<3>() = upsilon;
    return xi;
  }
};

/// Chains a relative pose T_{t -> t-1} onto the previous absolute pose.
/// The result carries the relative pose's timestamp.
inline CameraPose compose_relative(const CameraPose& prev_abs, const CameraPose& rel) {
  CameraPose out = prev_abs.compose(rel);
  out.timestamp = rel.timestamp;
  return out;
}

inline CameraPose apply_delta(const CameraPose& pose, const PoseDelta& d) {
  if (d.is_zero()) return pose;
  Mat3 R;
  Vec3 t;
  se3_exp(d.omega, d.upsilon, R, t);
  CameraPose inc;
  inc.r = Quat(R).normalized();
  inc.t = t;
  CameraPose out = pose.compose(inc);
  out.timestamp = pose.timestamp;
  return out;
}

struct PixelProjection {
  Vec2 uv;
  double depth = 0;  // camera-frame z
};

inline PixelProjection world_to_pixel(const Vec3& p_world, const CameraPose& pose,
                                      const CameraIntrinsics& K) {
  const Vec3 pc = pose.to_camera(p_world);
  if (pc.z() <= K.znear) throw BehindCamera("world_to_pixel: point at or behind znear");
  PixelProjection out;
  out.uv = Vec2(K.fx * pc.x() / pc.z() + K.cx, K.fy * pc.y() / pc.z() + K.cy);
  out.depth = pc.z();
  return out;
}

inline Vec3 pixel_to_world(const Vec2& uv, double depth, const CameraPose& pose,
                           const CameraIntrinsics& K) {
  if (depth <= 0) throw NonPositiveDepth("pixel_to_world: depth must be positive");
  const Vec3 pc((uv.x() - K.cx) / K.fx * depth, (uv.y() - K.cy) / K.fy * depth, depth);
  return pose.to_world(pc);
}

/// d(u, v, z) / d(delta) at the given delta value, for the effective pose
/// pose * exp(delta). Rows are (u, v, depth); columns (omega, upsilon).
inline Eigen::Matrix<double, 3, 6> world_to_pixel_delta_jacobian(
    const Vec3& p_world, const CameraPose& pose, const PoseDelta& delta,
    const CameraIntrinsics& K) {
  const CameraPose eff = apply_delta(pose, delta);
  const Vec3 pc = eff.to_camera(p_world);
  const double z = pc.z();
  if (z <= K.znear) throw BehindCamera("delta jacobian: point at or behind znear");

  // d(u,v,z)/dX_cam
  Eigen::Matrix<double, 3, 3> P;
  P << K.fx / z, 0, -K.fx * pc.x() / (z * z),
       0, K.fy / z, -K.fy * pc.y() / (z * z),
       0, 0, 1;

  // Right-perturbation of the effective pose: eff * exp(eta) moves the
  // camera-frame point by dX_cam = [pc]x * d(omega_eta) - d(upsilon_eta).
  Eigen::Matrix<double, 3, 6> dX;
  dX.leftCols<3>() = skew(pc);
  dX.rightCols<3>() = -Mat3::Identity();

  return P * dX * se3_right_jacobian(delta.twist());
}

}  // namespace dgs
