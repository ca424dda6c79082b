#include "ctrpose/kinematics.hpp"

namespace ctrpose {

namespace {

SE3Pose translation_pose(double x, double y, double z) {
  SE3Pose p;
  p.translation = Eigen::Vector3d(x, y, z);
  return p;
}

}  // namespace

RobotModel reference_arm() {
  RobotModel model;

  Joint j1;
  j1.type = JointType::kRevolute;
  j1.axis = Eigen::Vector3d::UnitZ();
  j1.origin = translation_pose(0.0, 0.0, 0.14);
  j1.limit_lo = -2.6;
  j1.limit_hi = 2.6;

  Joint j2;
  j2.type = JointType::kRevolute;
  j2.axis = Eigen::Vector3d::UnitY();
  j2.origin = translation_pose(0.02, 0.03, 0.12);
  j2.limit_lo = -1.9;
  j2.limit_hi = 1.9;

  Joint j3;
  j3.type = JointType::kRevolute;
  j3.axis = Eigen::Vector3d::UnitY();
  j3.origin = translation_pose(0.0, -0.03, 0.22);
  j3.limit_lo = -2.3;
  j3.limit_hi = 2.3;

  model.joints = {j1, j2, j3};
  model.tool = translation_pose(0.02, 0.0, 0.18);

  // The lateral offsets in the joint origins keep the five keypoints away
  // from a common plane at generic configurations.
  model.keypoint_frames = {0, 1, 2, 3, 4};

  const int segments = 24;
  model.link_meshes.resize(4);
  model.link_meshes[0] =
      make_box_mesh({-0.06, -0.06, 0.0}, {0.06, 0.06, 0.14});
  model.link_meshes[1] = make_cylinder_mesh(0.05, 0.0, 0.12, segments);
  model.link_meshes[2] = make_cylinder_mesh(0.045, 0.0, 0.22, segments);
  model.link_meshes[3] = make_cylinder_mesh(0.04, 0.0, 0.18, segments);

  model.Validate();
  return model;
}

}  // namespace ctrpose
