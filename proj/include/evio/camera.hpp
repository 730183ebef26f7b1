#pragma once

#include "evio/geometry.hpp"

namespace evio {

// Pinhole camera with radial-tangential distortion (k1, k2, p1, p2).
struct CameraModel {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  double k1 = 0, k2 = 0, p1 = 0, p2 = 0;
  int width = 0, height = 0;

  void validate() const {
    require_config(fx > 0 && fy > 0, "camera: fx, fy must be positive");
    require_config(cx > 0 && cx < width && cy > 0 && cy < height,
                   "camera: principal point must be inside the image");
  }
  bool has_distortion() const {
    return k1 != 0.0 || k2 != 0.0 || p1 != 0.0 || p2 != 0.0;
  }

  Vec2 distort_normalized(const Vec2& n) const {
    const double x = n.x(), y = n.y();
    const double r2 = x * x + y * y;
    const double radial = 1.0 + k1 * r2 + k2 * r2 * r2;
    return Vec2(x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x),
                y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y);
  }

  // Newton inversion of the distortion map on the normalized plane.
  Vec2 undistort_normalized(const Vec2& d, int iters = 10) const {
    Vec2 n = d;
    for (int it = 0; it < iters; ++it) {
      const Vec2 f = distort_normalized(n) - d;
      if (f.norm() < 1e-14) break;
      const double x = n.x(), y = n.y();
      const double r2 = x * x + y * y;
      const double radial = 1.0 + k1 * r2 + k2 * r2 * r2;
      const double dradial = 2.0 * k1 + 4.0 * k2 * r2;
      Eigen::Matrix2d j;
      j(0, 0) = radial + x * dradial * x + 2.0 * p1 * y + 6.0 * p2 * x;
      j(0, 1) = x * dradial * y + 2.0 * p1 * x + 2.0 * p2 * y;
      j(1, 0) = y * dradial * x + 2.0 * p1 * x + 2.0 * p2 * y;
      j(1, 1) = radial + y * dradial * y + 6.0 * p1 * y + 2.0 * p2 * x;
      n -= j.inverse() * f;
    }
    return n;
  }

  // Camera-frame point (depth > 0) to distorted pixel coordinates.
  Vec2 project(const Vec3& pc) const {
    require(pc.z() > 0.0, "project: non-positive depth (degenerate landmark)");
    const Vec2 d = distort_normalized(Vec2(pc.x() / pc.z(), pc.y() / pc.z()));
    return Vec2(fx * d.x() + cx, fy * d.y() + cy);
  }

  // Pinhole projection in undistorted pixel units (used by the residuals).
  Vec2 project_undistorted(const Vec3& pc) const {
    require(pc.z() > 0.0, "project: non-positive depth (degenerate landmark)");
    return Vec2(fx * pc.x() / pc.z() + cx, fy * pc.y() / pc.z() + cy);
  }

  Vec2 pixel_to_normalized(const Vec2& px) const {
    return undistort_normalized(Vec2((px.x() - cx) / fx, (px.y() - cy) / fy));
  }
  Vec2 normalized_to_undistorted_pixel(const Vec2& n) const {
    return Vec2(fx * n.x() + cx, fy * n.y() + cy);
  }
  Vec2 undistort_pixel(const Vec2& px) const {
    return normalized_to_undistorted_pixel(pixel_to_normalized(px));
  }

  // Unit-depth ray for a distorted pixel observation.
  Vec3 ray(const Vec2& px) const {
    const Vec2 n = pixel_to_normalized(px);
    return Vec3(n.x(), n.y(), 1.0);
  }

  // Inverse-depth back-projection of a distorted pixel observation.
  Vec3 back_project(double inv_depth, const Vec2& px) const {
    require(inv_depth > 0.0, "back_project: inverse depth must be positive (degenerate landmark)");
    return ray(px) / inv_depth;
  }
};

// Rigid transform taking IMU/body-frame points to the event-camera frame.
struct Extrinsics {
  Quat q_ci = Quat::Identity();
  Vec3 p_ci = Vec3::Zero();

  Vec3 imu_to_camera(const Vec3& xi) const { return q_ci * xi + p_ci; }
  Vec3 camera_to_imu(const Vec3& xc) const { return q_ci.conjugate() * (xc - p_ci); }
};

}  // namespace evio
