#pragma once

#include <Eigen/Dense>

#include "ctrpose/geometry.hpp"
#include "ctrpose/kinematics.hpp"

namespace ctrpose {

// Soft occupancy grid in [0,1]; pixels(y, x) with y down, x right, pixel
// centers at integer coordinates.
struct SilhouetteImage {
  int width = 0;
  int height = 0;
  Eigen::ArrayXXd pixels;  // height rows, width cols

  static SilhouetteImage Zero(int width, int height) {
    SilhouetteImage img;
    img.width = width;
    img.height = height;
    img.pixels = Eigen::ArrayXXd::Zero(height, width);
    return img;
  }
};

struct RenderConfig {
  int k_nearest = 20;        // triangles blended per pixel
  double sigma = 1e-4;       // edge softness in normalized units; the
                             // pixel-space scale is sigma * (min(W,H)/2)^2
  double blur_radius = 2.0;  // px; triangle influence cutoff outside it
  void Validate() const;
};

// Render the camera-frame mesh to a soft silhouette. Per pixel, each of the
// k most influential triangles contributes D_j = sigmoid(delta_j * d^2 /
// sigma_px) with d the 2D distance to the projected triangle's boundary and
// delta_j = +1 inside, -1 outside; the pixel value is 1 - prod_j (1 - D_j).
// Triangles fully behind the near plane are culled, partially-behind ones
// are clipped. Throws EmptyFrustumError when nothing lands in the image.
SilhouetteImage render_silhouette(const TriangleMesh& mesh,
                                  const CameraIntrinsics& K,
                                  const RenderConfig& cfg);

// Pull an image cotangent back to the 6-vector pose cotangent of the
// camera-from-base transform that produced the camera-frame mesh (left
// tangent convention, [omega; v]). Accumulation runs in fixed pixel-major
// order so results are bit-reproducible.
Eigen::Matrix<double, 6, 1> render_backward(
    const TriangleMesh& mesh, const CameraIntrinsics& K,
    const RenderConfig& cfg, const Eigen::ArrayXXd& image_cotangent);

// Brute-force binary rasterization (1 inside any projected triangle); the
// coverage reference the soft renderer is checked against, and the base for
// ground-truth masks.
Eigen::ArrayXXd hard_rasterize(const TriangleMesh& mesh,
                               const CameraIntrinsics& K, int width,
                               int height);

}  // namespace ctrpose
