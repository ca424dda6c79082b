#pragma once

#include <Eigen/Dense>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ctrpose/perception.hpp"
#include "ctrpose/pnp.hpp"
#include "ctrpose/softrender.hpp"
#include "ctrpose/synthgen.hpp"

namespace ctrpose {

struct TrainConfig {
  double lr = 1e-2;          // bump-model scale; CNN-scale runs would use 1e-6
  int epochs = 200;
  double grad_clip = 10.0;   // global gradient norm bound
  double s = 0.1;            // residual weighting scale
  uint64_t seed = 0;
  bool alternation = false;  // true: scenes alternate kp/seg updates;
                             // false: simultaneous with stop-gradients
  double temperature = kDefaultTemperature;
  MaskMode mask_mode = MaskMode::kCorrupted;
  RenderConfig render;  // training-time rendering of the estimated pose
  void Validate() const;
};

struct TrainRecord {
  int epoch = 0;
  double mask_loss = 0.0;  // mean over scenes
  double seg_loss = 0.0;   // mean over scenes
  double mean_add = 0.0;   // millimeters vs ground truth over the trainer's
                           // current pose estimates, logging only
  int skipped = 0;         // scenes dropped on solver failure
  std::vector<std::pair<int, std::string>> skips;  // scene index, reason
};

// Scalar loss plus its cotangent on one image argument.
struct LossValue {
  double value = 0.0;
  Eigen::ArrayXXd cotangent;
};

// Sum of squared differences; cotangent w.r.t. S is 2(S - M).
LossValue mask_loss(const SilhouetteImage& S, const MaskImage& M);

// w = exp(-s * residual): poorly converged solves weigh exponentially less.
double sample_weight(double residual, double s);

// Weighted binary cross entropy -(w / HW) sum [M log S + (1-M) log(1-S)]
// with S clamped to [1e-7, 1 - 1e-7]; the cotangent is w.r.t. M (the
// silhouette acts as the fixed teacher here).
LossValue seg_loss(const SilhouetteImage& S, const MaskImage& M, double w);

struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  long step = 0;
};

// One bias-corrected Adam update (beta1 0.9, beta2 0.999, eps 1e-8).
void adam_step(Eigen::VectorXd* params, AdamState* state,
               const Eigen::VectorXd& grad, double lr);

// Mutable training context: parameters, optimizer moments, per-scene pose
// warm starts, and the plateau-decayed learning rate.
struct TrainerState {
  PerceptionParams params;
  MaskProviderContext mask_ctx;
  AdamState adam_kp;
  AdamState adam_seg;
  std::vector<std::optional<SE3Pose>> warm_poses;
  double lr = 0.0;
  double best_loss = std::numeric_limits<double>::infinity();
  int stagnant_epochs = 0;
  int decay_cooldown = 0;           // epochs left before stagnation counts again
  std::vector<double> loss_window;  // recent plateau signals, newest last
  std::vector<int> skip_streak;     // consecutive skipped epochs per scene
  // Pre-jitter keypoint centers of scenes under skip rescue, empty when a
  // scene is healthy; restarts draw around this anchor, never around the
  // previous draw.
  std::vector<Eigen::VectorXd> jitter_base;
};

// Builds the trainer and solves an initial pose estimate for every scene
// (cold solve, multi-start fallback), so each scene carries a current
// estimate from epoch zero onward.
TrainerState make_trainer(const Dataset& ds, PerceptionParams params,
                          const TrainConfig& cfg);

// Mean ADD in millimeters of the trainer's current per-scene pose
// estimates against ground truth; scenes without an estimate are excluded.
double trainer_mean_add(const TrainerState& state, const Dataset& scenes);

// One pass over all scenes, one optimizer step per scene: heatmaps ->
// keypoints -> pose -> silhouette; the mask supervises the keypoint head
// through the render and solver backward passes while the silhouette
// supervises the trainable mask head, each side treating the other as a
// constant target. Scenes whose solve diverges or loses rank are skipped
// and counted. Applies plateau decay (lr / 10 after 5 stagnant epochs).
TrainRecord train_epoch(TrainerState* state, const Dataset& scenes,
                        const TrainConfig& cfg, int epoch);

struct DescentResult {
  SE3Pose pose;
  double final_loss = 0.0;
  int steps = 0;
};

// First-order descent of the silhouette match loss directly over the pose
// tangent (adaptive-moment steps, left-multiplicative updates).
DescentResult fit_pose_to_mask(const RobotModel& robot, const JointConfig& q,
                               const CameraIntrinsics& K,
                               const RenderConfig& cfg,
                               const Eigen::ArrayXXd& target,
                               const SE3Pose& init, int steps, double lr);

}  // namespace ctrpose
