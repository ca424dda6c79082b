#include "ctrpose/geometry.hpp"

#include <cmath>

namespace ctrpose {

namespace {
// Below this angle the exp/log trigonometric coefficients switch to their
// Taylor expansions.
constexpr double kSmallAngle = 1e-8;
}  // namespace

void CameraIntrinsics::Validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) {
    throw Error("CameraIntrinsics: focal lengths must be positive");
  }
  if (width <= 0 || height <= 0) {
    throw Error("CameraIntrinsics: image size must be positive");
  }
  if (cx < 0.0 || cx >= width || cy < 0.0 || cy >= height) {
    throw Error("CameraIntrinsics: principal point outside image");
  }
}

Eigen::Matrix3d skew(const Eigen::Vector3d& w) {
  Eigen::Matrix3d m;
  m << 0.0, -w.z(), w.y(),  //
      w.z(), 0.0, -w.x(),   //
      -w.y(), w.x(), 0.0;
  return m;
}

Eigen::Matrix3d so3_exp(const Eigen::Vector3d& omega) {
  const double theta = omega.norm();
  const Eigen::Matrix3d w = skew(omega);
  double a;  // sin(theta)/theta
  double b;  // (1 - cos(theta))/theta^2
  if (theta < kSmallAngle) {
    const double t2 = theta * theta;
    a = 1.0 - t2 / 6.0;
    b = 0.5 - t2 / 24.0;
  } else {
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / (theta * theta);
  }
  return Eigen::Matrix3d::Identity() + a * w + b * w * w;
}

Eigen::Vector3d so3_log(const Eigen::Matrix3d& rotation) {
  const double trace = rotation.trace();
  const double cos_theta = std::clamp((trace - 1.0) * 0.5, -1.0, 1.0);
  const double theta = std::acos(cos_theta);
  Eigen::Vector3d axis_twice(rotation(2, 1) - rotation(1, 2),
                             rotation(0, 2) - rotation(2, 0),
                             rotation(1, 0) - rotation(0, 1));
  if (theta < kSmallAngle) {
    return 0.5 * axis_twice;
  }
  const double kPiGuard = 1e-6;
  if (theta > M_PI - kPiGuard) {
    // Near pi the off-diagonal difference vanishes; recover the axis from
    // the symmetric part R + I whose columns are parallel to it.
    const Eigen::Matrix3d sym = rotation + Eigen::Matrix3d::Identity();
    int col = 0;
    sym.colwise().norm().maxCoeff(&col);
    Eigen::Vector3d axis = sym.col(col).normalized();
    // Fix the sign so that exp matches.
    if (axis_twice.dot(axis) < 0.0) axis = -axis;
    return theta * axis;
  }
  return (theta / (2.0 * std::sin(theta))) * axis_twice;
}

namespace {

// Left Jacobian of SO(3): t = V(omega) * v in se3_exp.
Eigen::Matrix3d so3_left_jacobian(const Eigen::Vector3d& omega) {
  const double theta = omega.norm();
  const Eigen::Matrix3d w = skew(omega);
  double b;  // (1 - cos)/theta^2
  double c;  // (theta - sin)/theta^3
  if (theta < kSmallAngle) {
    const double t2 = theta * theta;
    b = 0.5 - t2 / 24.0;
    c = 1.0 / 6.0 - t2 / 120.0;
  } else {
    b = (1.0 - std::cos(theta)) / (theta * theta);
    c = (theta - std::sin(theta)) / (theta * theta * theta);
  }
  return Eigen::Matrix3d::Identity() + b * w + c * w * w;
}

Eigen::Matrix3d so3_left_jacobian_inverse(const Eigen::Vector3d& omega) {
  const double theta = omega.norm();
  const Eigen::Matrix3d w = skew(omega);
  double coeff;
  if (theta < kSmallAngle) {
    coeff = 1.0 / 12.0 + theta * theta / 720.0;
  } else {
    coeff = 1.0 / (theta * theta) -
            (1.0 + std::cos(theta)) / (2.0 * theta * std::sin(theta));
  }
  return Eigen::Matrix3d::Identity() - 0.5 * w + coeff * w * w;
}

}  // namespace

SE3Pose se3_exp(const SE3Tangent& xi) {
  SE3Pose pose;
  pose.rotation = so3_exp(xi.omega);
  pose.translation = so3_left_jacobian(xi.omega) * xi.v;
  return pose;
}

SE3Tangent se3_log(const SE3Pose& pose) {
  SE3Tangent xi;
  xi.omega = so3_log(pose.rotation);
  xi.v = so3_left_jacobian_inverse(xi.omega) * pose.translation;
  return xi;
}

SE3Pose pose_compose(const SE3Pose& a, const SE3Pose& b) {
  SE3Pose out;
  out.rotation = a.rotation * b.rotation;
  out.translation = a.rotation * b.translation + a.translation;
  return out;
}

SE3Pose pose_invert(const SE3Pose& a) {
  SE3Pose out;
  out.rotation = a.rotation.transpose();
  out.translation = -(out.rotation * a.translation);
  return out;
}

double rotation_angle_between(const SE3Pose& a, const SE3Pose& b) {
  return so3_log(a.rotation.transpose() * b.rotation).norm();
}

double translation_distance(const SE3Pose& a, const SE3Pose& b) {
  return (a.translation - b.translation).norm();
}

Eigen::Vector2d project_point(const Eigen::Vector3d& p,
                              const CameraIntrinsics& K) {
  if (!(p.z() > kZMin)) {
    throw BehindCameraError("project_point: point at or behind the camera");
  }
  const double inv_z = 1.0 / p.z();
  return {K.fx * p.x() * inv_z + K.cx, K.fy * p.y() * inv_z + K.cy};
}

Eigen::Matrix<double, 2, 3> project_point_jacobian(const Eigen::Vector3d& p,
                                                   const CameraIntrinsics& K) {
  if (!(p.z() > kZMin)) {
    throw BehindCameraError(
        "project_point_jacobian: point at or behind the camera");
  }
  const double inv_z = 1.0 / p.z();
  const double inv_z2 = inv_z * inv_z;
  Eigen::Matrix<double, 2, 3> j;
  j << K.fx * inv_z, 0.0, -K.fx * p.x() * inv_z2,  //
      0.0, K.fy * inv_z, -K.fy * p.y() * inv_z2;
  return j;
}

Eigen::Matrix<double, 3, 6> point_pose_jacobian(const Eigen::Vector3d& p) {
  // Left perturbation: d(exp(xi) p)/dxi = [-[p]x | I].
  Eigen::Matrix<double, 3, 6> j;
  j.leftCols<3>() = -skew(p);
  j.rightCols<3>() = Eigen::Matrix3d::Identity();
  return j;
}

Eigen::Matrix<double, 2, 6> project_pose_jacobian(const Eigen::Vector3d& p,
                                                  const CameraIntrinsics& K) {
  return project_point_jacobian(p, K) * point_pose_jacobian(p);
}

}  // namespace ctrpose
