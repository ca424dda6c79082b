#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "ctrpose/softrender.hpp"

namespace ctrpose {

// Per-keypoint logit grids; activations[c](y, x).
struct HeatmapStack {
  int n = 0;
  int width = 0;
  int height = 0;
  std::vector<Eigen::ArrayXXd> activations;
};

struct MaskImage {
  int width = 0;
  int height = 0;
  Eigen::ArrayXXd pixels;  // height rows, width cols, values in [0,1]
};

// Learnable state of the desk-scale perception stand-in. The keypoint head
// is a per-scene, per-channel Gaussian bump: logits(u,v) =
// -sharpness * ||(u,v) - center||^2, i.e. 3 parameters per channel. The
// segmentation head is a per-scene logit grid read through a sigmoid.
struct PerceptionParams {
  int n_scenes = 0;
  int n_keypoints = 0;
  int width = 0;
  int height = 0;
  Eigen::VectorXd theta_kp;   // per scene: [u_0,v_0,...,u_{n-1},v_{n-1}, s_0..s_{n-1}]
  Eigen::VectorXd theta_seg;  // per scene: width*height logits; empty unless trainable masks
  Eigen::VectorXd theta_bb;   // unused at this scale, kept for interface parity

  int kp_block() const { return 3 * n_keypoints; }
  int seg_block() const { return width * height; }

  double* center(int scene, int channel) {
    return theta_kp.data() + scene * kp_block() + 2 * channel;
  }
  const double* center(int scene, int channel) const {
    return theta_kp.data() + scene * kp_block() + 2 * channel;
  }
  double& sharpness(int scene, int channel) {
    return theta_kp[scene * kp_block() + 2 * n_keypoints + channel];
  }
  double sharpness(int scene, int channel) const {
    return theta_kp[scene * kp_block() + 2 * n_keypoints + channel];
  }
  void Validate() const;
};

constexpr double kDefaultSharpness = 0.25;
constexpr double kDefaultTemperature = 1.0;
// Optimizers must keep sharpness at or above this floor: once a bump
// flattens past it the softmax expectation detaches from the center and
// snaps toward the image centroid (and past zero, to the corners).
constexpr double kMinSharpness = 0.05;

// Fresh parameters: bump centers at the image center, default sharpness,
// no segmentation grids until init_trainable_masks.
PerceptionParams make_bump_params(int n_scenes, int n_keypoints, int width,
                                  int height);

// Per-channel expectation of pixel coordinates under softmax(h / temperature):
// a differentiable argmax surrogate. Returns one (u, v) per channel.
std::vector<Eigen::Vector2d> spatial_softmax(const HeatmapStack& h,
                                             double temperature);

// Cotangent of the spatial softmax output pulled back to the activations:
// dL/dh(u,v) = (1/temperature) p(u,v) ((coord - o) . out_cot).
HeatmapStack spatial_softmax_vjp(const HeatmapStack& h, double temperature,
                                 const std::vector<Eigen::Vector2d>& out_cots);

// Bump-model forward for one scene. Throws UnknownSceneError.
HeatmapStack heatmap_model_forward(const PerceptionParams& params,
                                   int scene_id);

// Pull a heatmap cotangent back to theta_kp (full-length vector, zeros
// outside the scene's block).
Eigen::VectorXd heatmap_model_param_vjp(const PerceptionParams& params,
                                        int scene_id,
                                        const HeatmapStack& cotangent);

enum class MaskMode { kOracle, kCorrupted, kTrainable };

// Scene-indexed mask sources the provider draws from. Oracle masks are hard
// rasterizations at the ground-truth pose; corruption is derived from them
// deterministically per (seed, scene).
struct MaskProviderContext {
  std::vector<Eigen::ArrayXXd> oracle_masks;
  int corrupt_radius = 1;
  double corrupt_rho = 0.01;
  uint64_t corrupt_seed = 0;
};

// oracle: ground-truth binary mask. corrupted: oracle with partial boundary
// erosion or dilation (radius px, each changed pixel kept with prob. 1/2)
// plus salt-and-pepper flips at rate rho. trainable: sigmoid of the scene's
// theta_seg grid. Throws UnknownSceneError.
MaskImage mask_provider(int scene_id, MaskMode mode,
                        const PerceptionParams& params,
                        const MaskProviderContext& ctx);

// Corruption stage alone, exposed so trainable grids can be seeded from it.
Eigen::ArrayXXd corrupt_mask(const Eigen::ArrayXXd& oracle, int radius,
                             double rho, uint64_t seed);

// Fill theta_seg with logits reproducing the given per-scene masks through
// the sigmoid (values clamped to [1e-7, 1 - 1e-7] before the logit).
void init_trainable_masks(PerceptionParams* params,
                          const std::vector<Eigen::ArrayXXd>& masks);

double intersection_over_union(const Eigen::ArrayXXd& a,
                               const Eigen::ArrayXXd& b);

// Trained state on disk: JSON with per-scene centers/sharpness, an optional
// side file for mask logits, and the empirical keypoint residual pool
// (trained minus label, px) that downstream estimators sample from.
struct Checkpoint {
  PerceptionParams params;
  std::vector<Eigen::Vector2d> residual_pool;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ctrpose
