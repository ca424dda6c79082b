#pragma once

#include <Eigen/Dense>
#include <functional>
#include <vector>

#include "ctrpose/geometry.hpp"
#include "ctrpose/kinematics.hpp"
#include "ctrpose/perception.hpp"

namespace ctrpose {

constexpr double kControlHz = 120.0;    // joint update rate
constexpr double kEstimateHz = 30.0;    // camera-pose refresh rate
constexpr double kJointRateLimit = 1.0; // rad/s (m/s for prismatic joints)

struct ServoState {
  JointConfig q;
  SE3Pose goal_cam;        // end-effector goal expressed in the camera frame
  SE3Pose cam_pose_true;   // simulation ground truth camera-from-base
  double t = 0.0;
};

struct ServoStep {
  double t = 0.0;
  double translational_err = 0.0;  // meters, vs true camera pose
  double rotational_err = 0.0;     // radians
  Eigen::VectorXd q;
  bool fault = false;  // estimator or IK failure, joints held
};

struct ServoTrace {
  std::vector<ServoStep> steps;
};

struct IkResult {
  JointConfig q;
  bool converged = false;
  double pos_err = 0.0;
  double rot_err = 0.0;
  int iterations = 0;
};

// Damped-least-squares inverse kinematics toward an end-effector target in
// the base frame. Arms with fewer than 6 joints solve the position task
// only; the orientation residual is reported but unconstrained. Stops at
// position error < 1e-5 m (and orientation < 1e-4 rad when constrained) or
// 500 iterations; throws UnreachableError when the best position error
// stays above 1e-2 m.
IkResult ik_solve(const RobotModel& model, const SE3Pose& target,
                  const JointConfig& q0);

// Returns the camera-from-base estimate for the current simulated state.
using PoseEstimator = std::function<SE3Pose(const ServoState&)>;

// Camera trajectory T^c_b(t) for the simulation ground truth.
using CameraMotion = std::function<SE3Pose(double)>;

// One 120 Hz control cycle: estimate the camera pose, move the goal into
// the base frame (T^b_g = inv(T^c_b) * T^c_g), solve IK, and take a
// rate-limited proportional joint step. Estimator or IK faults hold the
// joints for the cycle and are flagged in `record`.
ServoState servo_step(const RobotModel& model, const ServoState& state,
                      const PoseEstimator& estimator, double gain,
                      ServoStep* record = nullptr);

// Fixed-step simulation at 120 Hz with the estimate refreshed every 4th
// cycle (30 Hz); per-cycle errors are measured against the true camera
// pose, which follows `motion` when provided.
ServoTrace run_servo(const RobotModel& model, ServoState initial,
                     const PoseEstimator& estimator, double gain,
                     double duration, const CameraMotion& motion = nullptr);

PoseEstimator make_gt_estimator();

// Ground truth with a fixed translation offset (camera-frame x), the
// control for estimator-bias steady-state error.
PoseEstimator make_biased_estimator(double bias_m);

// Pipeline estimator: simulated keypoint observations (true projections
// plus residuals drawn from the checkpoint's empirical pool) fed through
// the PnP solver. Accuracy therefore tracks how well training converged.
PoseEstimator make_ctrnet_estimator(const RobotModel& model,
                                    const CameraIntrinsics& K,
                                    const Checkpoint& ckpt, uint64_t seed);

}  // namespace ctrpose
