#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ctrpose/kinematics.hpp"
#include "ctrpose/perception.hpp"
#include "ctrpose/softrender.hpp"

namespace ctrpose {

struct RandomizationRanges {
  // Per-joint sampling bounds; when empty, each joint uses joint_span of
  // its limit range about the range center.
  Eigen::VectorXd q_lo;
  Eigen::VectorXd q_hi;
  double joint_span = 0.8;
  double r_min = 0.7;   // camera shell radii, meters
  double r_max = 1.1;
  double roll_range = 3.14159265358979323846;  // camera roll, +-rad
  double margin_px = 2.0;  // keypoints must land this far inside the image
  int max_tries = 100;
  void Validate(const RobotModel& model) const;
};

// One synthetic observation: configuration, camera-from-base ground truth,
// and labels derived from them (regenerable bit-identically).
struct SceneSample {
  JointConfig q;
  SE3Pose gt_pose;
  CameraIntrinsics intrinsics;
  std::vector<Eigen::Vector2d> gt_keypoints2d;
  MaskImage gt_mask;
  uint64_t seed = 0;
};

struct Dataset {
  RobotModel robot;
  CameraIntrinsics intrinsics;
  RenderConfig render_cfg;
  std::vector<SceneSample> samples;
  uint64_t master_seed = 0;
};

// Camera-from-world transform looking from eye toward target (optical axis
// +z, image y down), rolled about the axis by `roll`.
SE3Pose look_at_camera(const Eigen::Vector3d& eye,
                       const Eigen::Vector3d& target, double roll);

// Draw a scene: q uniform within ranges, camera on a spherical shell around
// the keypoint centroid with uniform distance and random roll; resamples
// until every keypoint projects inside the image (margin respected), at
// most max_tries times. Labels are filled via generate_labels. Throws
// SamplingExhaustedError.
SceneSample sample_scene(const RobotModel& model, const CameraIntrinsics& K,
                         uint64_t rng_seed, const RandomizationRanges& ranges,
                         const RenderConfig& render_cfg);

// Labels from stored ground truth: keypoints by projection at gt_pose, mask
// by rendering at gt_pose binarized at 0.5.
std::pair<std::vector<Eigen::Vector2d>, MaskImage> generate_labels(
    const SceneSample& sample, const RobotModel& model,
    const RenderConfig& cfg);

// n samples with per-sample seeds derived from (master_seed, index).
Dataset generate_dataset(const RobotModel& robot, const CameraIntrinsics& K,
                         const RenderConfig& render_cfg,
                         const RandomizationRanges& ranges, int n,
                         uint64_t master_seed);

// Dataset directory: manifest.json + robot.json (+ meshes) + one
// sample_k.json of {q, gt_pose, seed} per sample; optional mask PNG cache.
// Refuses to write into an existing non-empty directory.
void save_dataset(const Dataset& ds, const std::string& dir, bool cache_masks);
Dataset load_dataset(const std::string& dir);

}  // namespace ctrpose
