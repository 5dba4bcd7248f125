#pragma once

#include "dgs/core.hpp"

#include <array>

// SO(3)/SE(3) exponential maps, logarithms and Jacobians on plain Eigen
// types. Twist ordering is (omega, upsilon): rotation block first.

namespace dgs {

inline Mat3 skew(const Vec3& w) {
  Mat3 m;
  m << 0, -w.z(), w.y(),
       w.z(), 0, -w.x(),
      -w.y(), w.x(), 0;
  return m;
}

inline Vec3 unskew(const Mat3& m) {
  return Vec3(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1)) * 0.5;
}

inline Mat3 so3_exp(const Vec3& omega) {
  const double theta2 = omega.squaredNorm();
  const Mat3 wx = skew(omega);
  double a, b;  // R = I + a*wx + b*wx^2
  if (theta2 < 1e-12) {
    a = 1.0 - theta2 / 6.0;
    b = 0.5 - theta2 / 24.0;
  } else {
    const double theta = std::sqrt(theta2);
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / theta2;
  }
  return Mat3::Identity() + a * wx + b * wx * wx;
}

inline Vec3 so3_log(const Mat3& R) {
  const double tr = R.trace();
  const double cos_theta = std::min(1.0, std::max(-1.0, (tr - 1.0) * 0.5));
  const double theta = std::acos(cos_theta);
  if (theta < 1e-7) {
    // log(R) ~ vee(R - R^T)/2 * (1 + theta^2/6)
    return unskew(R) * (1.0 + theta * theta / 6.0);
  }
  if (M_PI - theta < 1e-7) {
    // at pi, R + I = 2 n n^T: any nonzero column gives the axis
    Mat3 S = R + Mat3::Identity();
    int k = 0;
    S.diagonal().maxCoeff(&k);
    Vec3 axis = S.col(k).normalized();
    if (unskew(R).dot(axis) < 0) axis = -axis;
    return axis * theta;
  }
  return unskew(R) * (theta / std::sin(theta));
}

/// Left Jacobian of SO(3): V(w) with se3 exp translation t = V * upsilon.
inline Mat3 so3_left_jacobian(const Vec3& omega) {
  const double theta2 = omega.squaredNorm();
  const Mat3 wx = skew(omega);
  double b, c;  // J = I + b*wx + c*wx^2
  if (theta2 < 1e-10) {
    b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0;
    c = 1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0;
  } else {
    const double theta = std::sqrt(theta2);
    b = (1.0 - std::cos(theta)) / theta2;
    c = (theta - std::sin(theta)) / (theta2 * theta);
  }
  return Mat3::Identity() + b * wx + c * wx * wx;
}

inline Mat3 so3_left_jacobian_inv(const Vec3& omega) {
  const double theta2 = omega.squaredNorm();
  const Mat3 wx = skew(omega);
  double c;  // Jinv = I - wx/2 + c*wx^2
  if (theta2 < 1e-10) {
    c = 1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0;
  } else {
    const double theta = std::sqrt(theta2);
    c = (1.0 - 0.5 * theta * std::cos(0.5 * theta) / std::sin(0.5 * theta)) / theta2;
  }
  return Mat3::Identity() - 0.5 * wx + c * wx * wx;
}

inline Mat3 so3_right_jacobian(const Vec3& omega) { return so3_left_jacobian(-omega); }

/// exp of the twist (omega, upsilon): rotation so3_exp(omega),
/// translation V(omega) * upsilon.
inline void se3_exp(const Vec3& omega, const Vec3& upsilon, Mat3& R_out, Vec3& t_out) {
  R_out = so3_exp(omega);
  t_out = so3_left_jacobian(omega) * upsilon;
}

inline Vec6 se3_log(const Mat3& R, const Vec3& t) {
  const Vec3 omega = so3_log(R);
  Vec6 xi;
  xi.head<3>() = omega;
  xi.tail<3>() = so3_left_jacobian_inv(omega) * t;
  return xi;
}

/// Coupling block of the SE(3) left Jacobian (the Q matrix): with
/// xi = (omega, upsilon), Jl(xi) = [[Jl(w), 0], [Q(w,u), Jl(w)]].
inline Mat3 se3_jacobian_q(const Vec3& omega, const Vec3& upsilon) {
  const double theta2 = omega.squaredNorm();
  const double theta = std::sqrt(theta2);
  const Mat3 wx = skew(omega);
  const Mat3 ux = skew(upsilon);
  double cA, cB, cC;
  if (theta < 0.05) {
    const double t2 = theta2, t4 = theta2 * theta2;
    cA = 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0;
    cB = 1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0;
    cC = 1.0 / 120.0 - t2 / 2520.0 + t4 / 120960.0;
  } else {
    const double s = std::sin(theta), c = std::cos(theta);
    const double t3 = theta2 * theta, t4 = theta2 * theta2, t5 = t4 * theta;
    cA = (theta - s) / t3;
    cB = (theta2 + 2.0 * c - 2.0) / (2.0 * t4);
    cC = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t5);
  }
  const Mat3 wu = wx * ux, uw = ux * wx, wuw = wx * ux * wx;
  return 0.5 * ux + cA * (wu + uw + wuw)
       + cB * (wx * wu + uw * wx - 3.0 * wuw)
       + cC * (wuw * wx + wx * wuw);
}

/// Right Jacobian of SE(3) for twist ordering (omega, upsilon):
/// exp(xi + d) = exp(xi) * exp(Jr(xi) * d) to first order.
inline Mat6 se3_right_jacobian(const Vec6& xi) {
  const Vec3 w = xi.head<3>(), u = xi.tail<3>();
  const Mat3 jr = so3_right_jacobian(w);
  const Mat3 q = se3_jacobian_q(-w, -u);
  Mat6 J = Mat6::Zero();
  J.topLeftCorner<3, 3>() = jr;
  J.bottomRightCorner<3, 3>() = jr;
  J.bottomLeftCorner<3, 3>() = q;
  return J;
}

// ------------------------------------------------------- quaternion helpers

/// Rotation matrix of a unit quaternion (w, x, y, z).
inline Mat3 quat_to_mat(const Quat& q) { return q.toRotationMatrix(); }

/// dR/dq for the unit-quaternion rotation formula, component order
/// (w, x, y, z), valid when composed with the normalization projection.
inline std::array<Mat3, 4> quat_rotation_jacobian(const Quat& q) {
  const double w = q.w(), x = q.x(), y = q.y(), z = q.z();
  std::array<Mat3, 4> d;
  d[0] << 0, -z, y,
          z, 0, -x,
         -y, x, 0;
  d[1] << 0, y, z,
          y, -2 * x, -w,
          z, w, -2 * x;
  d[2] << -2 * y, x, w,
          x, 0, z,
         -w, z, -2 * y;
  d[3] << -2 * z, -w, x,
          w, -2 * z, y,
          x, y, 0;
  for (auto& m : d) m *= 2.0;
  return d;
}

/// Backpropagates a gradient w.r.t. the normalized quaternion to the raw one.
inline Vec4 quat_normalize_backward(const Quat& raw, const Vec4& grad_unit) {
  const Vec4 qv(raw.w(), raw.x(), raw.y(), raw.z());
  const double n = qv.norm();
  const Vec4 qn = qv / n;
  return (grad_unit - qn * qn.dot(grad_unit)) / n;
}

}  // namespace dgs
