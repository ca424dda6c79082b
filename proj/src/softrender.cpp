#include "ctrpose/softrender.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "ctrpose/errors.hpp"

namespace ctrpose {
namespace {

constexpr double kClipZ = 1e-5;  // near plane, safely above the projection floor

// Vertex of a near-plane-clipped triangle with its provenance: the point is
// (1-t) V[ia] + t V[ib] in camera frame, so gradients can flow back to the
// original mesh vertices including through t.
struct ClipVertex {
  Eigen::Vector3d p;
  int ia = -1;
  int ib = -1;
  double t = 0.0;
};

struct ClippedTri {
  ClipVertex v[3];
  Eigen::Vector2d q[3];  // projected, pixels
};

struct RasterScene {
  std::vector<ClippedTri> tris;
  std::vector<std::vector<int>> candidates;  // per pixel, ascending tri ids
  int width = 0;
  int height = 0;
  double sigma_px = 0.0;
};

// Distance from a point to one triangle edge, with the pieces the backward
// pass needs: clamped projection parameter and the offset to the closest
// boundary point.
struct EdgeHit {
  double d2 = 0.0;
  double t = 0.0;
  Eigen::Vector2d diff = Eigen::Vector2d::Zero();
  int edge = 0;
};

// Per-pixel contribution of one triangle. key = delta * d^2 orders
// triangles by influence (descending sigmoid argument).
struct Contribution {
  double key = 0.0;
  int tri = 0;
  bool inside = false;
  EdgeHit hit;
  double soft = 0.0;  // sigmoid(key / sigma_px)
};

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double cross2(const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
  return a.x() * b.y() - a.y() * b.x();
}

bool point_in_triangle(const Eigen::Vector2d& p, const Eigen::Vector2d& q0,
                       const Eigen::Vector2d& q1, const Eigen::Vector2d& q2) {
  const double e0 = cross2(q1 - q0, p - q0);
  const double e1 = cross2(q2 - q1, p - q1);
  const double e2 = cross2(q0 - q2, p - q2);
  return (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) ||
         (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0);
}

EdgeHit boundary_distance(const Eigen::Vector2d& p, const ClippedTri& tri) {
  EdgeHit best;
  best.d2 = std::numeric_limits<double>::infinity();
  for (int e = 0; e < 3; ++e) {
    const Eigen::Vector2d& a = tri.q[e];
    const Eigen::Vector2d& b = tri.q[(e + 1) % 3];
    const Eigen::Vector2d ab = b - a;
    const double len2 = ab.squaredNorm();
    double t = len2 > 0.0 ? (p - a).dot(ab) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const Eigen::Vector2d diff = p - (a + t * ab);
    const double d2 = diff.squaredNorm();
    if (d2 < best.d2) {
      best.d2 = d2;
      best.t = t;
      best.diff = diff;
      best.edge = e;
    }
  }
  return best;
}

// Sutherland-Hodgman clip of one triangle against z >= kClipZ.
void clip_triangle(const std::vector<Eigen::Vector3d>& verts,
                   const Eigen::Vector3i& tri,
                   std::vector<ClippedTri>* out) {
  ClipVertex poly[4];
  int n_poly = 0;
  for (int e = 0; e < 3; ++e) {
    const int ia = tri[e];
    const int ib = tri[(e + 1) % 3];
    const bool in_a = verts[ia].z() > kClipZ;
    const bool in_b = verts[ib].z() > kClipZ;
    if (in_a) {
      poly[n_poly++] = ClipVertex{verts[ia], ia, ia, 0.0};
    }
    if (in_a != in_b) {
      const double t =
          (kClipZ - verts[ia].z()) / (verts[ib].z() - verts[ia].z());
      ClipVertex cv;
      cv.p = verts[ia] + t * (verts[ib] - verts[ia]);
      cv.ia = ia;
      cv.ib = ib;
      cv.t = t;
      poly[n_poly++] = cv;
    }
  }
  for (int f = 1; f + 1 < n_poly; ++f) {
    ClippedTri ct;
    ct.v[0] = poly[0];
    ct.v[1] = poly[f];
    ct.v[2] = poly[f + 1];
    out->push_back(ct);
  }
}

RasterScene build_scene(const TriangleMesh& mesh, const CameraIntrinsics& K,
                        const RenderConfig& cfg) {
  mesh.Validate();
  K.Validate();
  cfg.Validate();
  if (mesh.triangles.empty()) {
    throw EmptyFrustumError("mesh has no triangles");
  }

  RasterScene scene;
  scene.width = K.width;
  scene.height = K.height;
  const double half_extent = 0.5 * std::min(K.width, K.height);
  scene.sigma_px = cfg.sigma * half_extent * half_extent;

  for (const auto& tri : mesh.triangles) {
    clip_triangle(mesh.vertices, tri, &scene.tris);
  }
  for (auto& ct : scene.tris) {
    for (int c = 0; c < 3; ++c) {
      ct.q[c] = project_point(ct.v[c].p, K);
    }
  }

  scene.candidates.resize(static_cast<size_t>(K.width) * K.height);
  bool any = false;
  for (int j = 0; j < static_cast<int>(scene.tris.size()); ++j) {
    const ClippedTri& ct = scene.tris[j];
    double min_x = ct.q[0].x(), max_x = ct.q[0].x();
    double min_y = ct.q[0].y(), max_y = ct.q[0].y();
    for (int c = 1; c < 3; ++c) {
      min_x = std::min(min_x, ct.q[c].x());
      max_x = std::max(max_x, ct.q[c].x());
      min_y = std::min(min_y, ct.q[c].y());
      max_y = std::max(max_y, ct.q[c].y());
    }
    const int x0 = std::max(0, static_cast<int>(std::ceil(min_x - cfg.blur_radius)));
    const int x1 = std::min(K.width - 1,
                            static_cast<int>(std::floor(max_x + cfg.blur_radius)));
    const int y0 = std::max(0, static_cast<int>(std::ceil(min_y - cfg.blur_radius)));
    const int y1 = std::min(K.height - 1,
                            static_cast<int>(std::floor(max_y + cfg.blur_radius)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        scene.candidates[static_cast<size_t>(y) * K.width + x].push_back(j);
        any = true;
      }
    }
  }
  if (!any) {
    throw EmptyFrustumError("no triangle projects inside the image");
  }
  return scene;
}

// The k most influential contributions at a pixel, sorted by descending
// sigmoid argument with triangle id as the deterministic tiebreak.
std::vector<Contribution> pixel_contributions(const RasterScene& scene,
                                              const RenderConfig& cfg, int x,
                                              int y) {
  const Eigen::Vector2d p(static_cast<double>(x), static_cast<double>(y));
  std::vector<Contribution> contribs;
  const auto& cand = scene.candidates[static_cast<size_t>(y) * scene.width + x];
  contribs.reserve(cand.size());
  const double blur2 = cfg.blur_radius * cfg.blur_radius;
  for (int j : cand) {
    const ClippedTri& ct = scene.tris[j];
    Contribution c;
    c.tri = j;
    c.inside = point_in_triangle(p, ct.q[0], ct.q[1], ct.q[2]);
    c.hit = boundary_distance(p, ct);
    if (!c.inside && c.hit.d2 > blur2) continue;
    c.key = c.inside ? c.hit.d2 : -c.hit.d2;
    c.soft = stable_sigmoid(c.key / scene.sigma_px);
    contribs.push_back(c);
  }
  std::sort(contribs.begin(), contribs.end(),
            [](const Contribution& a, const Contribution& b) {
              if (a.key != b.key) return a.key > b.key;
              return a.tri < b.tri;
            });
  if (static_cast<int>(contribs.size()) > cfg.k_nearest) {
    contribs.resize(cfg.k_nearest);
  }
  return contribs;
}

}  // namespace

void RenderConfig::Validate() const {
  if (k_nearest < 1) throw Error("k_nearest must be >= 1");
  if (!(sigma > 0.0)) throw Error("sigma must be > 0");
  if (!(blur_radius >= 0.0)) throw Error("blur_radius must be >= 0");
}

SilhouetteImage render_silhouette(const TriangleMesh& mesh,
                                  const CameraIntrinsics& K,
                                  const RenderConfig& cfg) {
  const RasterScene scene = build_scene(mesh, K, cfg);
  SilhouetteImage img = SilhouetteImage::Zero(K.width, K.height);
  for (int y = 0; y < K.height; ++y) {
    for (int x = 0; x < K.width; ++x) {
      const auto contribs = pixel_contributions(scene, cfg, x, y);
      double survive = 1.0;
      for (const auto& c : contribs) survive *= 1.0 - c.soft;
      img.pixels(y, x) = 1.0 - survive;
    }
  }
  return img;
}

Eigen::Matrix<double, 6, 1> render_backward(
    const TriangleMesh& mesh, const CameraIntrinsics& K,
    const RenderConfig& cfg, const Eigen::ArrayXXd& image_cotangent) {
  if (image_cotangent.rows() != K.height || image_cotangent.cols() != K.width) {
    throw ShapeMismatchError("image cotangent does not match intrinsics");
  }
  const RasterScene scene = build_scene(mesh, K, cfg);

  // 2D cotangents per clipped-triangle corner, filled pixel-major.
  std::vector<std::array<Eigen::Vector2d, 3>> corner_cots(
      scene.tris.size(),
      {Eigen::Vector2d::Zero(), Eigen::Vector2d::Zero(),
       Eigen::Vector2d::Zero()});

  std::vector<double> survive_prefix, survive_suffix;
  for (int y = 0; y < K.height; ++y) {
    for (int x = 0; x < K.width; ++x) {
      const double g = image_cotangent(y, x);
      if (g == 0.0) continue;
      const auto contribs = pixel_contributions(scene, cfg, x, y);
      const int m = static_cast<int>(contribs.size());
      if (m == 0) continue;

      // dS/dD_j = prod_{l != j} (1 - D_l) without dividing by possibly
      // saturated factors.
      survive_prefix.assign(m + 1, 1.0);
      survive_suffix.assign(m + 1, 1.0);
      for (int j = 0; j < m; ++j) {
        survive_prefix[j + 1] = survive_prefix[j] * (1.0 - contribs[j].soft);
      }
      for (int j = m - 1; j >= 0; --j) {
        survive_suffix[j] = survive_suffix[j + 1] * (1.0 - contribs[j].soft);
      }

      for (int j = 0; j < m; ++j) {
        const Contribution& c = contribs[j];
        const double ds_dd = survive_prefix[j] * survive_suffix[j + 1];
        const double delta = c.inside ? 1.0 : -1.0;
        const double sig_grad = c.soft * (1.0 - c.soft);
        const double dl_dd2 = g * ds_dd * sig_grad * delta / scene.sigma_px;
        if (dl_dd2 == 0.0) continue;
        // Envelope gradient of the point-segment distance: the clamped
        // projection parameter is held fixed.
        const int e = c.hit.edge;
        const Eigen::Vector2d grad_a = -2.0 * c.hit.diff * (1.0 - c.hit.t);
        const Eigen::Vector2d grad_b = -2.0 * c.hit.diff * c.hit.t;
        corner_cots[c.tri][e] += dl_dd2 * grad_a;
        corner_cots[c.tri][(e + 1) % 3] += dl_dd2 * grad_b;
      }
    }
  }

  // Projected corner cotangents -> camera-frame mesh vertex cotangents,
  // including the clip parameter's dependence on the endpoint depths.
  std::vector<Eigen::Vector3d> vert_cots(mesh.vertices.size(),
                                         Eigen::Vector3d::Zero());
  for (size_t j = 0; j < scene.tris.size(); ++j) {
    for (int cidx = 0; cidx < 3; ++cidx) {
      const Eigen::Vector2d& cot2 = corner_cots[j][cidx];
      if (cot2.isZero(0.0)) continue;
      const ClipVertex& cv = scene.tris[j].v[cidx];
      const Eigen::Vector3d cot3 =
          project_point_jacobian(cv.p, K).transpose() * cot2;
      if (cv.ia == cv.ib) {
        vert_cots[cv.ia] += cot3;
        continue;
      }
      const Eigen::Vector3d& a = mesh.vertices[cv.ia];
      const Eigen::Vector3d& b = mesh.vertices[cv.ib];
      const Eigen::Vector3d d = b - a;
      const double inv_dz = 1.0 / (b.z() - a.z());
      const double along = cot3.dot(d);
      vert_cots[cv.ia] += (1.0 - cv.t) * cot3;
      vert_cots[cv.ia].z() += along * (cv.t - 1.0) * inv_dz;
      vert_cots[cv.ib] += cv.t * cot3;
      vert_cots[cv.ib].z() += along * (-cv.t) * inv_dz;
    }
  }
  return camera_mesh_pose_vjp(mesh.vertices, vert_cots);
}

Eigen::ArrayXXd hard_rasterize(const TriangleMesh& mesh,
                               const CameraIntrinsics& K, int width,
                               int height) {
  mesh.Validate();
  K.Validate();
  std::vector<ClippedTri> tris;
  for (const auto& tri : mesh.triangles) {
    clip_triangle(mesh.vertices, tri, &tris);
  }
  for (auto& ct : tris) {
    for (int c = 0; c < 3; ++c) {
      ct.q[c] = project_point(ct.v[c].p, K);
    }
  }
  Eigen::ArrayXXd out = Eigen::ArrayXXd::Zero(height, width);
  for (const auto& ct : tris) {
    double min_x = ct.q[0].x(), max_x = ct.q[0].x();
    double min_y = ct.q[0].y(), max_y = ct.q[0].y();
    for (int c = 1; c < 3; ++c) {
      min_x = std::min(min_x, ct.q[c].x());
      max_x = std::max(max_x, ct.q[c].x());
      min_y = std::min(min_y, ct.q[c].y());
      max_y = std::max(max_y, ct.q[c].y());
    }
    const int x0 = std::max(0, static_cast<int>(std::ceil(min_x)));
    const int x1 = std::min(width - 1, static_cast<int>(std::floor(max_x)));
    const int y0 = std::max(0, static_cast<int>(std::ceil(min_y)));
    const int y1 = std::min(height - 1, static_cast<int>(std::floor(max_y)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        if (out(y, x) != 0.0) continue;
        const Eigen::Vector2d p(static_cast<double>(x), static_cast<double>(y));
        if (point_in_triangle(p, ct.q[0], ct.q[1], ct.q[2])) {
          out(y, x) = 1.0;
        }
      }
    }
  }
  return out;
}

}  // namespace ctrpose
