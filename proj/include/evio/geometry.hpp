#pragma once

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include "evio/common.hpp"

namespace evio {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Quat = Eigen::Quaterniond;

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

// Exponential map so(3) -> unit quaternion.
inline Quat quat_exp(const Vec3& theta) {
  const double n = theta.norm();
  if (n < 1e-12) {
    Quat q(1.0, 0.5 * theta.x(), 0.5 * theta.y(), 0.5 * theta.z());
    q.normalize();
    return q;
  }
  const double half = 0.5 * n;
  const Vec3 axis = theta / n;
  const double s = std::sin(half);
  return Quat(std::cos(half), s * axis.x(), s * axis.y(), s * axis.z());
}

// Log map to the rotation vector; takes the short way around.
inline Vec3 quat_log(const Quat& q_in) {
  Quat q = q_in.normalized();
  if (q.w() < 0.0) q.coeffs() *= -1.0;
  const double vn = q.vec().norm();
  if (vn < 1e-12) return 2.0 * q.vec();
  const double angle = 2.0 * std::atan2(vn, q.w());
  return q.vec() * (angle / vn);
}

// Left/right quaternion product matrices on (w, x, y, z) coefficients:
// quat_left(a) * b.coeffs4() == (a ⊗ b), quat_right(b) * a.coeffs4() == (a ⊗ b).
inline Eigen::Matrix4d quat_left(const Quat& q) {
  Eigen::Matrix4d m;
  m(0, 0) = q.w();
  m.block<1, 3>(0, 1) = -q.vec().transpose();
  m.block<3, 1>(1, 0) = q.vec();
  m.block<3, 3>(1, 1) = q.w() * Mat3::Identity() + skew(q.vec());
  return m;
}
inline Eigen::Matrix4d quat_right(const Quat& q) {
  Eigen::Matrix4d m;
  m(0, 0) = q.w();
  m.block<1, 3>(0, 1) = -q.vec().transpose();
  m.block<3, 1>(1, 0) = q.vec();
  m.block<3, 3>(1, 1) = q.w() * Mat3::Identity() - skew(q.vec());
  return m;
}

inline Eigen::Vector4d quat_wxyz(const Quat& q) {
  return Eigen::Vector4d(q.w(), q.x(), q.y(), q.z());
}

// Rigid transform x_to = q * x_from + p.
struct Pose {
  Quat q = Quat::Identity();
  Vec3 p = Vec3::Zero();

  Vec3 apply(const Vec3& x) const { return q * x + p; }
  Pose inverse() const {
    Pose out;
    out.q = q.conjugate();
    out.p = -(out.q * p);
    return out;
  }
  Pose compose(const Pose& other) const {  // this ∘ other
    Pose out;
    out.q = (q * other.q).normalized();
    out.p = q * other.p + p;
    return out;
  }
  static Pose identity() { return Pose{}; }
};

// Minimal rotation taking unit vector `from` to unit vector `to`.
inline Quat rotation_between(const Vec3& from, const Vec3& to) {
  Quat q = Quat::FromTwoVectors(from, to);
  q.normalize();
  return q;
}

// Intrinsic roll-pitch-yaw (x-y-z) angles of a rotation matrix, in radians.
inline Vec3 rotation_to_rpy(const Mat3& r) {
  const double pitch = std::asin(std::clamp(-r(2, 0), -1.0, 1.0));
  double roll, yaw;
  if (std::abs(r(2, 0)) < 1.0 - 1e-9) {
    roll = std::atan2(r(2, 1), r(2, 2));
    yaw = std::atan2(r(1, 0), r(0, 0));
  } else {
    roll = std::atan2(-r(1, 2), r(1, 1));
    yaw = 0.0;
  }
  return Vec3(roll, pitch, yaw);
}

}  // namespace evio
