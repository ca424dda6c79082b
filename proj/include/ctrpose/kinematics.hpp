#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "ctrpose/geometry.hpp"

namespace ctrpose {

// Triangle mesh in a link's local frame (vertices in meters).
struct TriangleMesh {
  std::vector<Eigen::Vector3d> vertices;
  std::vector<Eigen::Vector3i> triangles;

  // Index range and degeneracy (area > 1e-12 m^2) checks.
  void Validate() const;
  double TriangleArea(int t) const;
};

enum class JointType { kRevolute, kPrismatic };

struct Joint {
  JointType type = JointType::kRevolute;
  Eigen::Vector3d axis = Eigen::Vector3d::UnitZ();  // unit norm
  SE3Pose origin;  // fixed parent-frame -> joint-frame transform
  double limit_lo = -M_PI;
  double limit_hi = M_PI;
};

// Joint values, radians for revolute and meters for prismatic joints.
struct JointConfig {
  Eigen::VectorXd q;
};

// Kinematic chain with per-link meshes and keypoint definitions.
//
// The frame list produced by fk_frames has joints.size() + 2 entries:
//   frame 0              base link frame (identity)
//   frame i (1..J)       after joint i's origin and motion
//   frame J+1            tool frame (frame J composed with `tool`)
// link_meshes[i] is rigidly attached to frame i; the tool frame carries no
// mesh. keypoint_frames index into this frame list.
struct RobotModel {
  std::vector<Joint> joints;
  SE3Pose tool;
  std::vector<TriangleMesh> link_meshes;  // size <= joints.size() + 1
  std::vector<int> keypoint_frames;

  int n_keypoints() const { return static_cast<int>(keypoint_frames.size()); }
  int n_frames() const { return static_cast<int>(joints.size()) + 2; }

  void Validate() const;
  void ValidateConfig(const JointConfig& q) const;
};

// Forward kinematics: pose of every frame in the robot base frame.
// Throws JointLimitError if q violates the declared limits.
std::vector<SE3Pose> fk_frames(const RobotModel& model, const JointConfig& q);

// 3D keypoints in the robot base frame: the origins of the keypoint frames.
std::vector<Eigen::Vector3d> keypoints_3d(const RobotModel& model,
                                          const JointConfig& q);

// All link meshes transformed into the camera frame through pose * frame_i,
// concatenated into one mesh with reindexed triangles.
TriangleMesh assemble_camera_mesh(const RobotModel& model,
                                  const JointConfig& q, const SE3Pose& pose);

// Reverse-mode map for assemble_camera_mesh: per-vertex cotangents on the
// camera-frame vertices pulled back to the 6-dof pose tangent (left
// perturbation of `pose`). `camera_vertices` must be the vertices the
// forward pass produced for the same inputs.
Eigen::Matrix<double, 6, 1> camera_mesh_pose_vjp(
    const std::vector<Eigen::Vector3d>& camera_vertices,
    const std::vector<Eigen::Vector3d>& vertex_cotangents);

// Geometric Jacobian of a frame's pose w.r.t. q: 6 x dof, rows [omega; v]
// expressed in the base frame. Used by the servo module's IK.
Eigen::MatrixXd frame_jacobian(const RobotModel& model, const JointConfig& q,
                               int frame_index);

// Simple mesh builders for hand-authored robots.
TriangleMesh make_box_mesh(const Eigen::Vector3d& min_corner,
                           const Eigen::Vector3d& max_corner);
TriangleMesh make_cylinder_mesh(double radius, double z_lo, double z_hi,
                                int segments);

// The desk-scale reference robot: a 3-dof revolute arm with cylinder and box
// link meshes and five keypoint frames (base, three joints, tool).
RobotModel reference_arm();

// Robot description JSON + ASCII OBJ meshes (v/f records only).
RobotModel load_robot_json(const std::string& path);
void save_robot_json(const RobotModel& model, const std::string& json_path);

TriangleMesh load_obj(const std::string& path);
void save_obj(const TriangleMesh& mesh, const std::string& path);

}  // namespace ctrpose
