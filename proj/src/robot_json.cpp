#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "ctrpose/json_util.hpp"
#include "ctrpose/kinematics.hpp"

namespace ctrpose {

namespace {

using nlohmann::json;

}  // namespace

TriangleMesh load_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_obj: cannot open " + path);
  TriangleMesh mesh;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "v") {
      double x, y, z;
      ss >> x >> y >> z;
      mesh.vertices.emplace_back(x, y, z);
    } else if (tag == "f") {
      int a, b, c;
      ss >> a >> b >> c;
      mesh.triangles.emplace_back(a - 1, b - 1, c - 1);
    }
  }
  mesh.Validate();
  return mesh;
}

void save_obj(const TriangleMesh& mesh, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("save_obj: cannot open " + path);
  out.precision(17);
  for (const Eigen::Vector3d& v : mesh.vertices) {
    out << "v " << v.x() << " " << v.y() << " " << v.z() << "\n";
  }
  for (const Eigen::Vector3i& t : mesh.triangles) {
    out << "f " << t[0] + 1 << " " << t[1] + 1 << " " << t[2] + 1 << "\n";
  }
}

RobotModel load_robot_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_robot_json: cannot open " + path);
  json j;
  in >> j;

  RobotModel model;
  for (const json& jj : j.at("joints")) {
    Joint joint;
    const std::string type = jj.at("type").get<std::string>();
    if (type == "revolute") {
      joint.type = JointType::kRevolute;
    } else if (type == "prismatic") {
      joint.type = JointType::kPrismatic;
    } else {
      throw IoError("robot json: unknown joint type " + type);
    }
    const json& ax = jj.at("axis");
    joint.axis = Eigen::Vector3d(ax.at(0).get<double>(), ax.at(1).get<double>(),
                                 ax.at(2).get<double>());
    joint.origin = pose_from_json(jj.at("origin"));
    if (jj.contains("limits")) {
      joint.limit_lo = jj.at("limits").at(0).get<double>();
      joint.limit_hi = jj.at("limits").at(1).get<double>();
    }
    model.joints.push_back(joint);
  }
  if (j.contains("tool")) {
    model.tool = pose_from_json(j.at("tool"));
  }
  model.keypoint_frames = j.at("keypoint_frames").get<std::vector<int>>();

  const std::filesystem::path dir = std::filesystem::path(path).parent_path();
  for (const json& m : j.at("meshes")) {
    model.link_meshes.push_back(
        load_obj((dir / m.get<std::string>()).string()));
  }
  model.Validate();
  return model;
}

void save_robot_json(const RobotModel& model, const std::string& json_path) {
  const std::filesystem::path dir =
      std::filesystem::path(json_path).parent_path();
  json j;
  j["joints"] = json::array();
  for (const Joint& joint : model.joints) {
    json jj;
    jj["type"] = joint.type == JointType::kRevolute ? "revolute" : "prismatic";
    jj["axis"] = {joint.axis.x(), joint.axis.y(), joint.axis.z()};
    jj["origin"] = pose_to_json(joint.origin);
    jj["limits"] = {joint.limit_lo, joint.limit_hi};
    j["joints"].push_back(jj);
  }
  j["tool"] = pose_to_json(model.tool);
  j["keypoint_frames"] = model.keypoint_frames;
  j["meshes"] = json::array();
  for (size_t i = 0; i < model.link_meshes.size(); ++i) {
    const std::string name = "link" + std::to_string(i) + ".obj";
    save_obj(model.link_meshes[i], (dir / name).string());
    j["meshes"].push_back(name);
  }
  std::ofstream out(json_path);
  if (!out) throw IoError("save_robot_json: cannot open " + json_path);
  out << j.dump(2) << "\n";
}

}  // namespace ctrpose
