#include "ctrpose/pnp.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "ctrpose/errors.hpp"

namespace ctrpose {
namespace {

constexpr double kPlanarRatio = 1e-6;  // eigenvalue ratio below which the
                                       // point set is treated as coplanar

// Rigid fit dst_i ~ R src_i + t (least squares, no scale).
SE3Pose fit_rigid(const std::vector<Eigen::Vector3d>& src,
                  const std::vector<Eigen::Vector3d>& dst) {
  const int n = static_cast<int>(src.size());
  Eigen::Vector3d src_mean = Eigen::Vector3d::Zero();
  Eigen::Vector3d dst_mean = Eigen::Vector3d::Zero();
  for (int i = 0; i < n; ++i) {
    src_mean += src[i];
    dst_mean += dst[i];
  }
  src_mean /= n;
  dst_mean /= n;

  Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
  for (int i = 0; i < n; ++i) {
    h += (dst[i] - dst_mean) * (src[i] - src_mean).transpose();
  }
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(
      h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d u = svd.matrixU();
  Eigen::Matrix3d v = svd.matrixV();
  Eigen::Vector3d diag(1.0, 1.0, (u * v.transpose()).determinant());
  SE3Pose pose;
  pose.rotation = u * diag.asDiagonal() * v.transpose();
  pose.translation = dst_mean - pose.rotation * src_mean;
  return pose;
}

double score_candidate(const Correspondences& c, const CameraIntrinsics& K,
                       const SE3Pose& pose) {
  double total = 0.0;
  for (int i = 0; i < c.size(); ++i) {
    Eigen::Vector3d p = pose.Apply(c.points3d[i]);
    if (p.z() <= kZMin) return std::numeric_limits<double>::infinity();
    total += (project_point(p, K) - c.points2d[i]).squaredNorm();
  }
  return total;
}

// Camera-frame points from a null-space combination; flips the global sign
// if the cloud lands behind the camera.
std::vector<Eigen::Vector3d> control_combination(
    const Eigen::MatrixXd& null_basis, const Eigen::VectorXd& betas,
    const Eigen::MatrixXd& alphas) {
  Eigen::VectorXd x = Eigen::VectorXd::Zero(null_basis.rows());
  for (int k = 0; k < betas.size(); ++k) {
    x += betas[k] * null_basis.col(k);
  }
  const int n = static_cast<int>(alphas.rows());
  const int m = static_cast<int>(alphas.cols());
  std::vector<Eigen::Vector3d> pts(n, Eigen::Vector3d::Zero());
  double depth_sum = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      pts[i] += alphas(i, j) * x.segment<3>(3 * j);
    }
    depth_sum += pts[i].z();
  }
  if (depth_sum < 0.0) {
    for (auto& p : pts) p = -p;
  }
  return pts;
}

// Squared distances between world control points, pair order (a<b).
void control_point_pairs(int m, std::vector<std::pair<int, int>>* pairs) {
  pairs->clear();
  for (int a = 0; a < m; ++a) {
    for (int b = a + 1; b < m; ++b) pairs->emplace_back(a, b);
  }
}

}  // namespace

void Correspondences::Validate() const {
  if (points2d.size() != points3d.size()) {
    throw ShapeMismatchError("correspondence list sizes differ");
  }
  if (points2d.size() < 4) {
    throw TooFewPointsError("pnp needs at least 4 correspondences");
  }
  for (const auto& p : points2d) {
    if (!p.allFinite()) throw NonFiniteError("non-finite 2d point");
  }
  for (const auto& p : points3d) {
    if (!p.allFinite()) throw NonFiniteError("non-finite 3d point");
  }
}

SE3Pose epnp_initialize(const Correspondences& c, const CameraIntrinsics& K,
                        bool* planar_out) {
  const int n = c.size();
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (const auto& p : c.points3d) centroid += p;
  centroid /= n;

  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& p : c.points3d) {
    Eigen::Vector3d d = p - centroid;
    cov += d * d.transpose();
  }
  cov /= n;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
  // Eigenvalues ascending; axes scaled to the cloud's extent keep the
  // barycentric solve well conditioned.
  const bool planar =
      eig.eigenvalues()(0) <= kPlanarRatio * std::max(eig.eigenvalues()(2), 1e-300);
  if (planar_out) *planar_out = planar;
  const int m = planar ? 3 : 4;

  std::vector<Eigen::Vector3d> control_world;
  control_world.push_back(centroid);
  for (int j = 0; j < m - 1; ++j) {
    const int axis = 2 - j;  // largest spread first
    double scale = std::sqrt(std::max(eig.eigenvalues()(axis), 1e-12));
    control_world.push_back(centroid + scale * eig.eigenvectors().col(axis));
  }

  // Barycentric coordinates: p_i = sum_j alpha_ij c_j, sum_j alpha_ij = 1.
  Eigen::MatrixXd basis(3, m - 1);
  for (int j = 0; j < m - 1; ++j) {
    basis.col(j) = control_world[j + 1] - control_world[0];
  }
  Eigen::MatrixXd alphas(n, m);
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd a =
        basis.colPivHouseholderQr().solve(c.points3d[i] - centroid);
    alphas(i, 0) = 1.0 - a.sum();
    for (int j = 0; j < m - 1; ++j) alphas(i, j + 1) = a[j];
  }

  // M x = 0 with x the stacked camera-frame control points.
  Eigen::MatrixXd mm(2 * n, 3 * m);
  mm.setZero();
  for (int i = 0; i < n; ++i) {
    const double u = c.points2d[i].x();
    const double v = c.points2d[i].y();
    for (int j = 0; j < m; ++j) {
      const double a = alphas(i, j);
      mm(2 * i, 3 * j) = a * K.fx;
      mm(2 * i, 3 * j + 2) = a * (K.cx - u);
      mm(2 * i + 1, 3 * j + 1) = a * K.fy;
      mm(2 * i + 1, 3 * j + 2) = a * (K.cy - v);
    }
  }
  Eigen::MatrixXd mtm = mm.transpose() * mm;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> mtm_eig(mtm);
  // Four smallest-eigenvalue directions cover every beta case below.
  Eigen::MatrixXd null_basis = mtm_eig.eigenvectors().leftCols(4);

  std::vector<std::pair<int, int>> pairs;
  control_point_pairs(m, &pairs);
  const int np = static_cast<int>(pairs.size());
  Eigen::VectorXd dist_sq(np);
  for (int k = 0; k < np; ++k) {
    dist_sq[k] = (control_world[pairs[k].first] -
                  control_world[pairs[k].second])
                     .squaredNorm();
  }

  auto pair_delta = [&](int col, int k) -> Eigen::Vector3d {
    return null_basis.col(col).segment<3>(3 * pairs[k].first) -
           null_basis.col(col).segment<3>(3 * pairs[k].second);
  };

  std::vector<Eigen::VectorXd> beta_candidates;

  {  // N = 1: scale a single null vector to match control distances.
    double num = 0.0, den = 0.0;
    for (int k = 0; k < np; ++k) {
      const double dn = pair_delta(0, k).squaredNorm();
      num += std::sqrt(dist_sq[k] * dn);
      den += dn;
    }
    Eigen::VectorXd b(1);
    b[0] = den > 0.0 ? num / den : 0.0;
    beta_candidates.push_back(b);
  }

  {  // N = 2: solve for (b11, b12, b22) then recover signs.
    Eigen::MatrixXd l(np, 3);
    for (int k = 0; k < np; ++k) {
      Eigen::Vector3d d1 = pair_delta(0, k);
      Eigen::Vector3d d2 = pair_delta(1, k);
      l(k, 0) = d1.squaredNorm();
      l(k, 1) = 2.0 * d1.dot(d2);
      l(k, 2) = d2.squaredNorm();
    }
    Eigen::Vector3d b = l.colPivHouseholderQr().solve(dist_sq);
    Eigen::VectorXd betas(2);
    betas[0] = std::sqrt(std::abs(b[0]));
    betas[1] = std::sqrt(std::abs(b[2]));
    if (b[1] < 0.0) betas[1] = -betas[1];
    if (b[0] < 0.0) betas = -betas;
    beta_candidates.push_back(betas);
    beta_candidates.push_back(-betas);
  }

  if (!planar && np >= 6) {  // N = 3: six unknowns, six pair equations.
    Eigen::MatrixXd l(np, 6);
    for (int k = 0; k < np; ++k) {
      Eigen::Vector3d d1 = pair_delta(0, k);
      Eigen::Vector3d d2 = pair_delta(1, k);
      Eigen::Vector3d d3 = pair_delta(2, k);
      l(k, 0) = d1.squaredNorm();
      l(k, 1) = 2.0 * d1.dot(d2);
      l(k, 2) = d2.squaredNorm();
      l(k, 3) = 2.0 * d1.dot(d3);
      l(k, 4) = 2.0 * d2.dot(d3);
      l(k, 5) = d3.squaredNorm();
    }
    Eigen::VectorXd b = l.colPivHouseholderQr().solve(dist_sq);
    Eigen::VectorXd betas(3);
    betas[0] = std::sqrt(std::abs(b[0]));
    betas[1] = std::sqrt(std::abs(b[2]));
    betas[2] = std::sqrt(std::abs(b[5]));
    if (b[1] < 0.0) betas[1] = -betas[1];
    if (b[3] < 0.0) betas[2] = -betas[2];
    if (b[0] < 0.0) betas = -betas;
    beta_candidates.push_back(betas);
    beta_candidates.push_back(-betas);
  }

  SE3Pose best;
  double best_score = std::numeric_limits<double>::infinity();
  for (const auto& betas : beta_candidates) {
    std::vector<Eigen::Vector3d> cam_pts =
        control_combination(null_basis, betas, alphas);
    SE3Pose pose = fit_rigid(c.points3d, cam_pts);
    double score = score_candidate(c, K, pose);
    if (score < best_score) {
      best_score = score;
      best = pose;
    }
  }
  if (!std::isfinite(best_score)) {
    // Noisy observations can break every distance-constraint candidate.
    // Fall back to a scaled-orthographic guess: depth from the spread
    // ratio, centroid aligned with the observed 2D centroid, identity
    // rotation. The refinement stage does the rest.
    double spread3 = 0.0;
    for (const auto& p : c.points3d) spread3 += (p - centroid).squaredNorm();
    spread3 = std::sqrt(spread3 / n);
    Eigen::Vector2d mean2 = Eigen::Vector2d::Zero();
    for (const auto& o : c.points2d) mean2 += o;
    mean2 /= n;
    double spread2 = 0.0;
    for (const auto& o : c.points2d) spread2 += (o - mean2).squaredNorm();
    spread2 = std::sqrt(spread2 / n);
    const double z0 =
        0.5 * (K.fx + K.fy) * std::max(spread3, 1e-3) / std::max(spread2, 1.0);
    SE3Pose pose;
    pose.translation =
        Eigen::Vector3d(z0 * (mean2.x() - K.cx) / K.fx,
                        z0 * (mean2.y() - K.cy) / K.fy, z0) -
        centroid;
    best_score = score_candidate(c, K, pose);
    best = pose;
  }
  if (!std::isfinite(best_score)) {
    throw BehindCameraError("no initialization keeps points in front of camera");
  }
  return best;
}

double reprojection_error(const Correspondences& c, const CameraIntrinsics& K,
                          const SE3Pose& pose) {
  double total = 0.0;
  for (int i = 0; i < c.size(); ++i) {
    total += (project_point(pose.Apply(c.points3d[i]), K) - c.points2d[i])
                 .squaredNorm();
  }
  return total;
}

namespace {

// Residual stack r_i = o_i - pi(T p_i) and its pose Jacobian. Returns false
// when any point falls behind the camera at this pose.
bool evaluate(const Correspondences& c, const CameraIntrinsics& K,
              const SE3Pose& pose, Eigen::VectorXd* r, Eigen::MatrixXd* jac) {
  const int n = c.size();
  r->resize(2 * n);
  if (jac) jac->resize(2 * n, 6);
  for (int i = 0; i < n; ++i) {
    Eigen::Vector3d p = pose.Apply(c.points3d[i]);
    if (p.z() <= kZMin) return false;
    r->segment<2>(2 * i) = c.points2d[i] - project_point(p, K);
    if (jac) jac->block<2, 6>(2 * i, 0) = -project_pose_jacobian(p, K);
  }
  return true;
}

}  // namespace

PnpResult pnp_solve(const Correspondences& c, const CameraIntrinsics& K,
                    const std::optional<SE3Pose>& init,
                    const PnpOptions& opts) {
  c.Validate();
  K.Validate();

  PnpResult result;
  if (init) {
    result.pose = *init;
    Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
    for (const auto& p : c.points3d) centroid += p;
    centroid /= c.size();
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (const auto& p : c.points3d) {
      Eigen::Vector3d d = p - centroid;
      cov += d * d.transpose();
    }
    cov /= c.size();
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
    result.planar = eig.eigenvalues()(0) <=
                    kPlanarRatio * std::max(eig.eigenvalues()(2), 1e-300);
  } else {
    result.pose = epnp_initialize(c, K, &result.planar);
  }

  Eigen::VectorXd r;
  Eigen::MatrixXd jac;
  if (!evaluate(c, K, result.pose, &r, &jac)) {
    throw BehindCameraError("points behind camera at initial pose");
  }
  double residual = r.squaredNorm();

  double lambda = opts.lambda_init;
  bool stopped = false;
  bool improved_ever = false;
  for (int iter = 0; iter < opts.max_iterations && !stopped; ++iter) {
    result.iterations = iter + 1;
    Eigen::Matrix<double, 6, 6> jtj = jac.transpose() * jac;
    Eigen::Matrix<double, 6, 1> jtr = jac.transpose() * r;
    // Stationarity certificate: the objective gradient 2 J^T r is flat.
    // Checking before stepping makes an exact-optimum init finish in one
    // iteration with a zero step never taken.
    if ((2.0 * jtr).lpNorm<Eigen::Infinity>() < opts.gradient_tol) break;

    bool accepted = false;
    while (!accepted && !stopped) {
      Eigen::Matrix<double, 6, 6> damped = jtj;
      for (int k = 0; k < 6; ++k) {
        damped(k, k) += lambda * std::max(jtj(k, k), 1e-12);
      }
      Eigen::Matrix<double, 6, 1> step = damped.ldlt().solve(-jtr);
      if (!step.allFinite()) throw DivergedError("non-finite trust step");

      SE3Pose candidate =
          pose_compose(se3_exp(SE3Tangent::FromVector(step)), result.pose);
      Eigen::VectorXd r_new;
      Eigen::MatrixXd jac_new;
      bool valid = evaluate(c, K, candidate, &r_new, &jac_new);
      double residual_new = valid ? r_new.squaredNorm()
                                  : std::numeric_limits<double>::infinity();
      if (valid && residual_new <= residual) {
        const double drop = residual - residual_new;
        if (drop > 0.0) improved_ever = true;
        result.pose = candidate;
        r = std::move(r_new);
        jac = std::move(jac_new);
        residual = residual_new;
        lambda = std::max(lambda / 10.0, 1e-12);
        accepted = true;
        if (step.norm() < opts.step_tol || drop < opts.residual_tol) {
          stopped = true;
        }
      } else {
        lambda *= 10.0;
        // Every step scale fails to improve the residual: its comparison
        // has hit the eps*residual floor. Hand over to the polish phase.
        if (lambda > 1e14) stopped = true;
      }
    }
  }
  if (!improved_ever && result.iterations >= opts.max_iterations) {
    throw DivergedError("residual never decreased within iteration budget");
  }

  // Residual comparisons cannot resolve changes below eps*residual, which
  // strands the gradient a few orders above the certificate on noisy fits.
  // Polish the stationary point directly: damped Newton steps accepted on
  // gradient decrease, which stays resolvable all the way down. Acceptance
  // uses the 2-norm (monotone along these steps where the max-norm is not);
  // the certificate below still reads the max-norm.
  double grad_sq = (2.0 * jac.transpose() * r).squaredNorm();
  double lambda_p = opts.lambda_init;
  while (result.iterations < opts.max_iterations &&
         (2.0 * jac.transpose() * r).lpNorm<Eigen::Infinity>() >=
             opts.gradient_tol) {
    ++result.iterations;
    Eigen::Matrix<double, 6, 6> jtj = jac.transpose() * jac;
    Eigen::Matrix<double, 6, 1> jtr = jac.transpose() * r;
    bool accepted = false;
    while (!accepted) {
      Eigen::Matrix<double, 6, 6> damped = jtj;
      for (int k = 0; k < 6; ++k) {
        damped(k, k) += lambda_p * std::max(jtj(k, k), 1e-12);
      }
      Eigen::Matrix<double, 6, 1> step = damped.ldlt().solve(-jtr);
      if (!step.allFinite()) break;
      SE3Pose candidate =
          pose_compose(se3_exp(SE3Tangent::FromVector(step)), result.pose);
      Eigen::VectorXd r_new;
      Eigen::MatrixXd jac_new;
      if (evaluate(c, K, candidate, &r_new, &jac_new)) {
        const double g_new =
            (2.0 * jac_new.transpose() * r_new).squaredNorm();
        if (g_new < grad_sq) {
          result.pose = candidate;
          r = std::move(r_new);
          jac = std::move(jac_new);
          grad_sq = g_new;
          lambda_p = std::max(lambda_p / 10.0, 1e-12);
          accepted = true;
        }
      }
      if (!accepted) {
        lambda_p *= 10.0;
        if (lambda_p > 1e14) break;
      }
    }
    if (!accepted) break;  // gradient floor reached
  }
  residual = r.squaredNorm();

  result.residual = residual;
  result.converged = (2.0 * jac.transpose() * r).lpNorm<Eigen::Infinity>() <
                     opts.gradient_tol;
  return result;
}

std::vector<std::optional<SE3Pose>> pnp_start_grid(const Correspondences& c,
                                                   const CameraIntrinsics& K) {
  c.Validate();
  std::vector<std::optional<SE3Pose>> starts;
  starts.push_back(std::nullopt);

  Eigen::Vector3d c3 = Eigen::Vector3d::Zero();
  Eigen::Vector2d c2 = Eigen::Vector2d::Zero();
  for (int i = 0; i < c.size(); ++i) {
    c3 += c.points3d[i];
    c2 += c.points2d[i];
  }
  c3 /= c.size();
  c2 /= c.size();

  // 6 viewing faces x 4 in-plane rolls x 3 depths. Each start places the
  // 3D centroid on the ray through the 2D centroid at the given depth.
  for (int face = 0; face < 6; ++face) {
    Eigen::Vector3d z = Eigen::Vector3d::Zero();
    z[face / 2] = face % 2 == 0 ? 1.0 : -1.0;
    const Eigen::Vector3d up =
        face / 2 == 1 ? Eigen::Vector3d::UnitZ() : Eigen::Vector3d::UnitY();
    const Eigen::Vector3d x = up.cross(z).normalized();
    const Eigen::Vector3d y = z.cross(x);
    Eigen::Matrix3d cam_axes;
    cam_axes.col(0) = x;
    cam_axes.col(1) = y;
    cam_axes.col(2) = z;
    for (int roll = 0; roll < 4; ++roll) {
      const Eigen::Matrix3d R =
          (cam_axes * Eigen::AngleAxisd(roll * M_PI / 2.0,
                                        Eigen::Vector3d::UnitZ())
                          .toRotationMatrix())
              .transpose();
      for (const double depth : {0.4, 0.9, 1.8}) {
        SE3Pose start;
        start.rotation = R;
        start.translation =
            Eigen::Vector3d((c2.x() - K.cx) / K.fx * depth,
                            (c2.y() - K.cy) / K.fy * depth, depth) -
            R * c3;
        starts.push_back(start);
      }
    }
  }
  return starts;
}

PnpResult pnp_solve_multistart(const Correspondences& c,
                               const CameraIntrinsics& K,
                               const PnpOptions& opts) {
  bool have = false;
  PnpResult best;
  std::string first_fault;
  // The whole grid always runs: among certified candidates the lowest
  // residual wins, so the result approximates the global minimizer
  // instead of depending on which start happens to certify first.
  for (const std::optional<SE3Pose>& init : pnp_start_grid(c, K)) {
    try {
      const PnpResult r = pnp_solve(c, K, init, opts);
      if (!have || (r.converged && !best.converged) ||
          (r.converged == best.converged && r.residual < best.residual)) {
        best = r;
      }
      have = true;
    } catch (const Error& e) {
      if (first_fault.empty()) first_fault = e.what();
    }
  }

  if (!have) {
    throw DivergedError("every start failed (" + first_fault + ")");
  }
  return best;
}

Eigen::VectorXd pnp_backward(const Correspondences& c,
                             const CameraIntrinsics& K,
                             const PnpResult& result,
                             const Eigen::Matrix<double, 6, 1>& pose_cotangent) {
  c.Validate();
  if (!result.converged) {
    // The implicit gradient is only defined at a stationary point; an
    // unconverged solve is a divergence as far as callers are concerned.
    throw DivergedError("pnp_backward requires a converged solve");
  }
  const int n = c.size();

  // Stationarity F(T*, o) = -2 sum_i (dpi/dxi)^T r_i = 0 defines T*(o).
  // dF/dT in Gauss-Newton form, dF/do_i = -2 (dpi_i/dxi)^T.
  Eigen::Matrix<double, 6, 6> hess = Eigen::Matrix<double, 6, 6>::Zero();
  std::vector<Eigen::Matrix<double, 2, 6>> pose_jacs(n);
  for (int i = 0; i < n; ++i) {
    Eigen::Vector3d p = result.pose.Apply(c.points3d[i]);
    if (p.z() <= kZMin) {
      throw BehindCameraError("point behind camera at solved pose");
    }
    pose_jacs[i] = project_pose_jacobian(p, K);
    hess += 2.0 * pose_jacs[i].transpose() * pose_jacs[i];
  }

  Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 6, 6>> eig(hess);
  const double ev_min = eig.eigenvalues()(0);
  const double ev_max = eig.eigenvalues()(5);
  if (ev_min <= 0.0 || ev_max / ev_min > 1e12) {
    throw SingularHessianError("reprojection Hessian is ill-conditioned");
  }

  // dT*/do_i = -(dF/dT)^{-1} dF/do_i = hess^{-1} 2 J_i^T; pull the pose
  // cotangent back through it.
  Eigen::Matrix<double, 6, 1> solved = eig.eigenvectors() *
                                       (eig.eigenvalues().cwiseInverse().asDiagonal() *
                                        (eig.eigenvectors().transpose() * pose_cotangent));
  Eigen::VectorXd out(2 * n);
  for (int i = 0; i < n; ++i) {
    out.segment<2>(2 * i) = 2.0 * pose_jacs[i] * solved;
  }
  return out;
}

}  // namespace ctrpose
