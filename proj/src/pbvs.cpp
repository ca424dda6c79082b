#include "ctrpose/pbvs.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>

#include "ctrpose/errors.hpp"
#include "ctrpose/pnp.hpp"
#include "ctrpose/rng.hpp"

namespace ctrpose {

namespace {

SE3Pose tool_pose(const RobotModel& model, const JointConfig& q) {
  return fk_frames(model, q).back();
}

Eigen::VectorXd clamp_to_limits(const RobotModel& model,
                                const Eigen::VectorXd& q) {
  Eigen::VectorXd out = q;
  for (long i = 0; i < out.size(); ++i) {
    out[i] = std::clamp(out[i], model.joints[i].limit_lo,
                        model.joints[i].limit_hi);
  }
  return out;
}

}  // namespace

IkResult ik_solve(const RobotModel& model, const SE3Pose& target,
                  const JointConfig& q0) {
  if (!target.rotation.allFinite() || !target.translation.allFinite()) {
    throw NonFiniteError("ik target non-finite");
  }
  model.ValidateConfig(q0);
  const int dof = static_cast<int>(model.joints.size());
  const bool constrain_rotation = dof >= 6;
  const int tool_frame = dof + 1;
  constexpr double kDamping = 0.05;
  constexpr double kMaxStep = 0.5;
  constexpr int kMaxIters = 500;
  constexpr double kPosTol = 1e-5;
  constexpr double kRotTol = 1e-4;

  IkResult best;
  best.q = q0;
  best.pos_err = std::numeric_limits<double>::infinity();

  Eigen::VectorXd q = q0.q;
  for (int iter = 0; iter <= kMaxIters; ++iter) {
    const SE3Pose ee = tool_pose(model, JointConfig{q});
    const Eigen::Vector3d e_pos = target.translation - ee.translation;
    const Eigen::Vector3d e_rot =
        so3_log(target.rotation * ee.rotation.transpose());
    const double pos_err = e_pos.norm();
    const double rot_err = e_rot.norm();

    if (pos_err < best.pos_err) {
      best.q.q = q;
      best.pos_err = pos_err;
      best.rot_err = rot_err;
      best.iterations = iter;
    }
    const bool done =
        pos_err < kPosTol && (!constrain_rotation || rot_err < kRotTol);
    if (done) {
      best.converged = true;
      best.q.q = q;
      best.pos_err = pos_err;
      best.rot_err = rot_err;
      best.iterations = iter;
      break;
    }
    if (iter == kMaxIters) break;

    const Eigen::MatrixXd full_jac = frame_jacobian(model, JointConfig{q}, tool_frame);
    Eigen::MatrixXd jac;
    Eigen::VectorXd err;
    if (constrain_rotation) {
      jac = full_jac;
      err.resize(6);
      err.head<3>() = e_rot;
      err.tail<3>() = e_pos;
    } else {
      jac = full_jac.bottomRows(3);
      err = e_pos;
    }
    const long m = jac.rows();
    Eigen::MatrixXd jjt = jac * jac.transpose();
    jjt.diagonal().array() += kDamping * kDamping;
    Eigen::VectorXd dq = jac.transpose() * jjt.ldlt().solve(err);
    const double dq_norm = dq.norm();
    if (dq_norm > kMaxStep) dq *= kMaxStep / dq_norm;
    q = clamp_to_limits(model, q + dq);
    (void)m;
  }

  if (best.pos_err > 1e-2) {
    throw UnreachableError("ik target outside reachable workspace");
  }
  return best;
}

ServoState servo_step(const RobotModel& model, const ServoState& state,
                      const PoseEstimator& estimator, double gain,
                      ServoStep* record) {
  const double dt = 1.0 / kControlHz;
  ServoState next = state;
  bool fault = false;

  try {
    const SE3Pose estimate = estimator(state);
    const SE3Pose goal_base = pose_compose(pose_invert(estimate), state.goal_cam);
    const IkResult ik = ik_solve(model, goal_base, state.q);
    Eigen::VectorXd dq = gain * (ik.q.q - state.q.q);
    const double limit = kJointRateLimit * dt;
    for (long i = 0; i < dq.size(); ++i) {
      dq[i] = std::clamp(dq[i], -limit, limit);
    }
    next.q.q = clamp_to_limits(model, state.q.q + dq);
  } catch (const Error&) {
    fault = true;  // hold joints this cycle
  }
  next.t = state.t + dt;

  if (record) {
    const SE3Pose goal_base_true =
        pose_compose(pose_invert(next.cam_pose_true), next.goal_cam);
    const SE3Pose ee = fk_frames(model, next.q).back();
    record->t = next.t;
    record->translational_err =
        (ee.translation - goal_base_true.translation).norm();
    record->rotational_err = rotation_angle_between(ee, goal_base_true);
    record->q = next.q.q;
    record->fault = fault;
  }
  return next;
}

ServoTrace run_servo(const RobotModel& model, ServoState initial,
                     const PoseEstimator& estimator, double gain,
                     double duration, const CameraMotion& motion) {
  if (!(duration > 0.0)) throw Error("duration must be > 0");
  const int n_steps =
      static_cast<int>(std::lround(duration * kControlHz));
  const int refresh_every =
      static_cast<int>(std::lround(kControlHz / kEstimateHz));

  // 30 Hz estimator cadence over the 120 Hz loop.
  SE3Pose cached_estimate;
  bool have_estimate = false;
  int refresh_countdown = 0;
  auto cached = [&](const ServoState& s) -> SE3Pose {
    if (refresh_countdown == 0 || !have_estimate) {
      cached_estimate = estimator(s);
      have_estimate = true;
    }
    return cached_estimate;
  };

  ServoTrace trace;
  trace.steps.reserve(n_steps);
  ServoState state = std::move(initial);
  for (int i = 0; i < n_steps; ++i) {
    if (motion) state.cam_pose_true = motion(state.t);
    refresh_countdown = i % refresh_every;
    ServoStep rec;
    state = servo_step(model, state, cached, gain, &rec);
    trace.steps.push_back(std::move(rec));
  }
  return trace;
}

PoseEstimator make_gt_estimator() {
  return [](const ServoState& s) { return s.cam_pose_true; };
}

PoseEstimator make_biased_estimator(double bias_m) {
  return [bias_m](const ServoState& s) {
    SE3Pose p = s.cam_pose_true;
    p.translation.x() += bias_m;
    return p;
  };
}

PoseEstimator make_ctrnet_estimator(const RobotModel& model,
                                    const CameraIntrinsics& K,
                                    const Checkpoint& ckpt, uint64_t seed) {
  auto rng = std::make_shared<Rng>(seed);
  auto pool = std::make_shared<std::vector<Eigen::Vector2d>>(ckpt.residual_pool);
  auto warm = std::make_shared<std::optional<SE3Pose>>();
  RobotModel robot = model;
  return [rng, pool, warm, robot, K](const ServoState& s) -> SE3Pose {
    Correspondences corr;
    corr.points3d = keypoints_3d(robot, s.q);
    corr.points2d.reserve(corr.points3d.size());
    for (const auto& p : corr.points3d) {
      Eigen::Vector2d px = project_point(s.cam_pose_true.Apply(p), K);
      if (!pool->empty()) {
        px += (*pool)[rng->uniform_int(0, static_cast<int>(pool->size()) - 1)];
      }
      corr.points2d.push_back(px);
    }
    const PnpResult r = pnp_solve(corr, K, *warm);
    *warm = r.pose;
    return r.pose;
  };
}

}  // namespace ctrpose
