#pragma once

#include <Eigen/Dense>

#include "ctrpose/errors.hpp"

namespace ctrpose {

// Minimum depth in front of the camera. Projecting a point with z <= kZMin
// raises BehindCameraError instead of clamping, so degenerate poses surface
// early rather than corrupting gradients downstream.
inline constexpr double kZMin = 1e-6;

// Element of se(3). `omega` is an axis-angle rotation (radians), `v` the
// translational part (meters). Packed order in 6-vectors is [omega; v].
struct SE3Tangent {
  Eigen::Vector3d omega = Eigen::Vector3d::Zero();
  Eigen::Vector3d v = Eigen::Vector3d::Zero();

  static SE3Tangent FromVector(const Eigen::Matrix<double, 6, 1>& xi) {
    return {xi.head<3>(), xi.tail<3>()};
  }
  Eigen::Matrix<double, 6, 1> ToVector() const {
    Eigen::Matrix<double, 6, 1> xi;
    xi << omega, v;
    return xi;
  }
};

// Rigid transform in SE(3). Rotation is kept as an orthonormal 3x3 matrix.
struct SE3Pose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static SE3Pose Identity() { return {}; }

  Eigen::Vector3d Apply(const Eigen::Vector3d& p) const {
    return rotation * p + translation;
  }

  Eigen::Matrix4d Matrix() const {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.topLeftCorner<3, 3>() = rotation;
    m.topRightCorner<3, 1>() = translation;
    return m;
  }

  // Max-norm of R^T R - I; used by validity checks in tests and IO.
  double OrthonormalityError() const {
    return (rotation.transpose() * rotation - Eigen::Matrix3d::Identity())
        .cwiseAbs()
        .maxCoeff();
  }
};

// Pinhole camera parameters, pixels.
struct CameraIntrinsics {
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 0;
  int height = 0;

  void Validate() const;
};

Eigen::Matrix3d skew(const Eigen::Vector3d& w);

// Rodrigues rotation from an axis-angle vector.
Eigen::Matrix3d so3_exp(const Eigen::Vector3d& omega);
Eigen::Vector3d so3_log(const Eigen::Matrix3d& rotation);

SE3Pose se3_exp(const SE3Tangent& xi);
SE3Tangent se3_log(const SE3Pose& pose);

SE3Pose pose_compose(const SE3Pose& a, const SE3Pose& b);
SE3Pose pose_invert(const SE3Pose& a);

// Geodesic rotation distance (radians) and translation distance (meters).
double rotation_angle_between(const SE3Pose& a, const SE3Pose& b);
double translation_distance(const SE3Pose& a, const SE3Pose& b);

// Pinhole projection of a camera-frame point. Requires p.z > kZMin.
Eigen::Vector2d project_point(const Eigen::Vector3d& p,
                              const CameraIntrinsics& K);

// 2x3 Jacobian of project_point w.r.t. the camera-frame point.
Eigen::Matrix<double, 2, 3> project_point_jacobian(const Eigen::Vector3d& p,
                                                   const CameraIntrinsics& K);

// 3x6 Jacobian of (exp(xi) * p) w.r.t. xi at xi = 0, for a camera-frame
// point p. Columns [0,3) are omega, [3,6) are v.
Eigen::Matrix<double, 3, 6> point_pose_jacobian(const Eigen::Vector3d& p);

// 2x6 Jacobian of pi(exp(xi) * p) w.r.t. xi at xi = 0. This is the chain of
// the two Jacobians above and is the building block of the PnP solver.
Eigen::Matrix<double, 2, 6> project_pose_jacobian(const Eigen::Vector3d& p,
                                                  const CameraIntrinsics& K);

}  // namespace ctrpose
