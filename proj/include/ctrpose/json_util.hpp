#pragma once

#include <json.hpp>

#include "ctrpose/errors.hpp"
#include "ctrpose/geometry.hpp"

namespace ctrpose {

inline nlohmann::json pose_to_json(const SE3Pose& p) {
  nlohmann::json rot = nlohmann::json::array();
  for (int r = 0; r < 3; ++r) {
    rot.push_back({p.rotation(r, 0), p.rotation(r, 1), p.rotation(r, 2)});
  }
  return {{"rotation", rot},
          {"translation",
           {p.translation.x(), p.translation.y(), p.translation.z()}}};
}

inline SE3Pose pose_from_json(const nlohmann::json& j) {
  SE3Pose p;
  const nlohmann::json& rot = j.at("rotation");
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      p.rotation(r, c) = rot.at(r).at(c).get<double>();
    }
  }
  const nlohmann::json& t = j.at("translation");
  p.translation = Eigen::Vector3d(t.at(0).get<double>(), t.at(1).get<double>(),
                                  t.at(2).get<double>());
  if (p.OrthonormalityError() > 1e-9 || p.rotation.determinant() < 0.0) {
    throw IoError("pose json: rotation is not a proper rotation matrix");
  }
  return p;
}

inline nlohmann::json intrinsics_to_json(const CameraIntrinsics& K) {
  return {{"fx", K.fx},       {"fy", K.fy},           {"cx", K.cx},
          {"cy", K.cy},       {"width", K.width},     {"height", K.height}};
}

inline CameraIntrinsics intrinsics_from_json(const nlohmann::json& j) {
  CameraIntrinsics K;
  K.fx = j.at("fx").get<double>();
  K.fy = j.at("fy").get<double>();
  K.cx = j.at("cx").get<double>();
  K.cy = j.at("cy").get<double>();
  K.width = j.at("width").get<int>();
  K.height = j.at("height").get<int>();
  K.Validate();
  return K;
}

}  // namespace ctrpose
