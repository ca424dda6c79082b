#include "ctrpose/kinematics.hpp"

#include <cmath>

namespace ctrpose {

double TriangleMesh::TriangleArea(int t) const {
  const Eigen::Vector3i& tri = triangles[t];
  const Eigen::Vector3d e1 = vertices[tri[1]] - vertices[tri[0]];
  const Eigen::Vector3d e2 = vertices[tri[2]] - vertices[tri[0]];
  return 0.5 * e1.cross(e2).norm();
}

void TriangleMesh::Validate() const {
  const int n = static_cast<int>(vertices.size());
  for (size_t t = 0; t < triangles.size(); ++t) {
    const Eigen::Vector3i& tri = triangles[t];
    for (int k = 0; k < 3; ++k) {
      if (tri[k] < 0 || tri[k] >= n) {
        throw Error("TriangleMesh: triangle index out of range");
      }
    }
    if (TriangleArea(static_cast<int>(t)) <= 1e-12) {
      throw Error("TriangleMesh: degenerate triangle");
    }
  }
}

void RobotModel::Validate() const {
  for (const Joint& j : joints) {
    if (std::abs(j.axis.norm() - 1.0) > 1e-9) {
      throw Error("RobotModel: joint axis must be unit norm");
    }
    if (!(j.limit_lo <= j.limit_hi)) {
      throw Error("RobotModel: joint limits inverted");
    }
  }
  if (link_meshes.size() > joints.size() + 1) {
    throw Error("RobotModel: more meshes than link frames");
  }
  for (const TriangleMesh& m : link_meshes) m.Validate();
  for (int f : keypoint_frames) {
    if (f < 0 || f >= n_frames()) {
      throw Error("RobotModel: keypoint frame index out of range");
    }
  }
}

void RobotModel::ValidateConfig(const JointConfig& q) const {
  if (q.q.size() != static_cast<Eigen::Index>(joints.size())) {
    throw JointLimitError("JointConfig: wrong number of joint values");
  }
  for (size_t i = 0; i < joints.size(); ++i) {
    const double v = q.q(static_cast<Eigen::Index>(i));
    if (!std::isfinite(v) || v < joints[i].limit_lo || v > joints[i].limit_hi) {
      throw JointLimitError("JointConfig: joint value outside limits");
    }
  }
}

namespace {

SE3Pose joint_motion(const Joint& joint, double value) {
  SE3Pose m;
  if (joint.type == JointType::kRevolute) {
    m.rotation = so3_exp(joint.axis * value);
  } else {
    m.translation = joint.axis * value;
  }
  return m;
}

}  // namespace

std::vector<SE3Pose> fk_frames(const RobotModel& model, const JointConfig& q) {
  model.ValidateConfig(q);
  std::vector<SE3Pose> frames;
  frames.reserve(model.n_frames());
  frames.push_back(SE3Pose::Identity());
  for (size_t i = 0; i < model.joints.size(); ++i) {
    const Joint& joint = model.joints[i];
    SE3Pose next = pose_compose(frames.back(), joint.origin);
    next = pose_compose(next, joint_motion(joint, q.q(static_cast<Eigen::Index>(i))));
    frames.push_back(next);
  }
  frames.push_back(pose_compose(frames.back(), model.tool));
  return frames;
}

std::vector<Eigen::Vector3d> keypoints_3d(const RobotModel& model,
                                          const JointConfig& q) {
  const std::vector<SE3Pose> frames = fk_frames(model, q);
  std::vector<Eigen::Vector3d> points;
  points.reserve(model.keypoint_frames.size());
  for (int f : model.keypoint_frames) {
    points.push_back(frames[static_cast<size_t>(f)].translation);
  }
  return points;
}

TriangleMesh assemble_camera_mesh(const RobotModel& model,
                                  const JointConfig& q, const SE3Pose& pose) {
  const std::vector<SE3Pose> frames = fk_frames(model, q);
  TriangleMesh out;
  int base = 0;
  for (size_t link = 0; link < model.link_meshes.size(); ++link) {
    const TriangleMesh& mesh = model.link_meshes[link];
    const SE3Pose cam_frame = pose_compose(pose, frames[link]);
    for (const Eigen::Vector3d& v : mesh.vertices) {
      out.vertices.push_back(cam_frame.Apply(v));
    }
    for (const Eigen::Vector3i& tri : mesh.triangles) {
      out.triangles.emplace_back(tri[0] + base, tri[1] + base, tri[2] + base);
    }
    base += static_cast<int>(mesh.vertices.size());
  }
  return out;
}

Eigen::Matrix<double, 6, 1> camera_mesh_pose_vjp(
    const std::vector<Eigen::Vector3d>& camera_vertices,
    const std::vector<Eigen::Vector3d>& vertex_cotangents) {
  if (camera_vertices.size() != vertex_cotangents.size()) {
    throw ShapeMismatchError("camera_mesh_pose_vjp: size mismatch");
  }
  // v_cam = exp(xi) * v, so dv/domega = -[v]x and dv/dv_t = I; transposed:
  // omega_cot += v x g, v_cot += g.
  Eigen::Matrix<double, 6, 1> cot = Eigen::Matrix<double, 6, 1>::Zero();
  for (size_t i = 0; i < camera_vertices.size(); ++i) {
    cot.head<3>() += camera_vertices[i].cross(vertex_cotangents[i]);
    cot.tail<3>() += vertex_cotangents[i];
  }
  return cot;
}

Eigen::MatrixXd frame_jacobian(const RobotModel& model, const JointConfig& q,
                               int frame_index) {
  const std::vector<SE3Pose> frames = fk_frames(model, q);
  if (frame_index < 0 || frame_index >= model.n_frames()) {
    throw Error("frame_jacobian: frame index out of range");
  }
  const Eigen::Vector3d target = frames[static_cast<size_t>(frame_index)].translation;
  const int dof = static_cast<int>(model.joints.size());
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(6, dof);
  for (int i = 0; i < dof; ++i) {
    // Joint i only moves frames with index > i.
    if (frame_index <= i) continue;
    const Joint& joint = model.joints[static_cast<size_t>(i)];
    // Axis location: the joint-i frame before its own motion, i.e. the
    // origin of frames[i+1] (motion about the joint origin leaves it fixed
    // for revolute joints).
    const SE3Pose joint_frame = pose_compose(frames[static_cast<size_t>(i)], joint.origin);
    const Eigen::Vector3d axis_world = joint_frame.rotation * joint.axis;
    if (joint.type == JointType::kRevolute) {
      jac.block<3, 1>(0, i) = axis_world;
      jac.block<3, 1>(3, i) = axis_world.cross(target - joint_frame.translation);
    } else {
      jac.block<3, 1>(3, i) = axis_world;
    }
  }
  return jac;
}

TriangleMesh make_box_mesh(const Eigen::Vector3d& lo,
                           const Eigen::Vector3d& hi) {
  TriangleMesh mesh;
  for (int corner = 0; corner < 8; ++corner) {
    mesh.vertices.emplace_back((corner & 1) ? hi.x() : lo.x(),
                               (corner & 2) ? hi.y() : lo.y(),
                               (corner & 4) ? hi.z() : lo.z());
  }
  const int faces[12][3] = {{0, 2, 1}, {1, 2, 3}, {4, 5, 6}, {5, 7, 6},
                            {0, 1, 4}, {1, 5, 4}, {2, 6, 3}, {3, 6, 7},
                            {0, 4, 2}, {2, 4, 6}, {1, 3, 5}, {3, 7, 5}};
  for (const auto& f : faces) mesh.triangles.emplace_back(f[0], f[1], f[2]);
  return mesh;
}

TriangleMesh make_cylinder_mesh(double radius, double z_lo, double z_hi,
                                int segments) {
  TriangleMesh mesh;
  for (int s = 0; s < segments; ++s) {
    const double a = 2.0 * M_PI * s / segments;
    const double x = radius * std::cos(a);
    const double y = radius * std::sin(a);
    mesh.vertices.emplace_back(x, y, z_lo);
    mesh.vertices.emplace_back(x, y, z_hi);
  }
  const int lo_center = static_cast<int>(mesh.vertices.size());
  mesh.vertices.emplace_back(0.0, 0.0, z_lo);
  const int hi_center = lo_center + 1;
  mesh.vertices.emplace_back(0.0, 0.0, z_hi);
  for (int s = 0; s < segments; ++s) {
    const int nlo = 2 * s;
    const int nhi = 2 * s + 1;
    const int mlo = 2 * ((s + 1) % segments);
    const int mhi = mlo + 1;
    mesh.triangles.emplace_back(nlo, mlo, nhi);  // side
    mesh.triangles.emplace_back(nhi, mlo, mhi);
    mesh.triangles.emplace_back(nlo, lo_center, mlo);  // bottom cap
    mesh.triangles.emplace_back(nhi, mhi, hi_center);  // top cap
  }
  return mesh;
}

}  // namespace ctrpose
