#pragma once

#include <Eigen/Dense>
#include <optional>
#include <vector>

#include "ctrpose/geometry.hpp"

namespace ctrpose {

// 2D-3D keypoint pairs: pixels and meters (robot base frame).
struct Correspondences {
  std::vector<Eigen::Vector2d> points2d;
  std::vector<Eigen::Vector3d> points3d;

  int size() const { return static_cast<int>(points2d.size()); }
  void Validate() const;
};

struct PnpResult {
  SE3Pose pose;
  double residual = 0.0;  // sum of squared reprojection errors, px^2
  bool converged = false;
  int iterations = 0;
  bool planar = false;  // 3D points near-coplanar at solve time
};

struct PnpOptions {
  double lambda_init = 1e-3;
  int max_iterations = 100;
  double step_tol = 1e-10;
  double residual_tol = 1e-12;
  double gradient_tol = 1e-8;  // stationarity certificate on the tangent
};

// Minimize the reprojection error sum ||o_i - pi(T p_i)||^2 over T by
// Levenberg-Marquardt on the SE(3) tangent. Without an initial pose, a
// closed-form EPnP-style solution (with a planar fallback) seeds the
// refinement.
//
// Throws TooFewPointsError (n < 4), BehindCameraError (points behind the
// camera at the initial pose), DivergedError (no decreasing step found).
PnpResult pnp_solve(const Correspondences& c, const CameraIntrinsics& K,
                    const std::optional<SE3Pose>& init = std::nullopt,
                    const PnpOptions& opts = {});

// Deterministic initial guesses for a multi-start solve: the closed-form
// initialization (nullopt) plus a fixed grid of 24 coarse rotations x 3
// depths, each translated so the 3D centroid sits on the ray through the
// 2D centroid.
std::vector<std::optional<SE3Pose>> pnp_start_grid(const Correspondences& c,
                                                   const CameraIntrinsics& K);

// pnp_solve hardened by sweeping every pnp_start_grid guess. Returns the
// converged candidate with the lowest residual, falling back to the
// lowest-residual unconverged candidate when no start certifies. Throws
// only when every start fails outright.
PnpResult pnp_solve_multistart(const Correspondences& c,
                               const CameraIntrinsics& K,
                               const PnpOptions& opts = {});

// Reprojection objective at a fixed pose (same sum pnp_solve minimizes).
double reprojection_error(const Correspondences& c, const CameraIntrinsics& K,
                          const SE3Pose& pose);

// Back-propagation through the solved pose via the implicit function
// theorem on the stationarity of the reprojection objective. Given the
// cotangent of a scalar loss w.r.t. the solved pose (on the left tangent
// chart), returns the cotangent w.r.t. the 2D input points, stacked
// [du_0, dv_0, du_1, ...].
//
// The second derivative of the objective is taken in its Gauss-Newton
// form. Throws SingularHessianError when its condition number exceeds
// 1e12 (degenerate geometry).
Eigen::VectorXd pnp_backward(const Correspondences& c,
                             const CameraIntrinsics& K,
                             const PnpResult& result,
                             const Eigen::Matrix<double, 6, 1>& pose_cotangent);

// Closed-form initialization used by pnp_solve; exposed for tests.
SE3Pose epnp_initialize(const Correspondences& c, const CameraIntrinsics& K,
                        bool* planar_out = nullptr);

}  // namespace ctrpose
