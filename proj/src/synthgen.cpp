#include "ctrpose/synthgen.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "ctrpose/errors.hpp"
#include "ctrpose/image_io.hpp"
#include "ctrpose/json_util.hpp"
#include "ctrpose/rng.hpp"

namespace ctrpose {

namespace fs = std::filesystem;
using nlohmann::json;

void RandomizationRanges::Validate(const RobotModel& model) const {
  if (!(r_min > 0.0) || !(r_max >= r_min)) {
    throw Error("camera distance range invalid");
  }
  if (!(joint_span > 0.0) || joint_span > 1.0) {
    throw Error("joint_span must be in (0, 1]");
  }
  if (q_lo.size() != q_hi.size()) {
    throw ShapeMismatchError("q_lo / q_hi size mismatch");
  }
  if (q_lo.size() != 0) {
    if (q_lo.size() != static_cast<long>(model.joints.size())) {
      throw ShapeMismatchError("joint range size mismatch");
    }
    for (long i = 0; i < q_lo.size(); ++i) {
      if (q_lo[i] > q_hi[i] || q_lo[i] < model.joints[i].limit_lo ||
          q_hi[i] > model.joints[i].limit_hi) {
        throw JointLimitError("sampling range outside joint limits");
      }
    }
  }
}

SE3Pose look_at_camera(const Eigen::Vector3d& eye,
                       const Eigen::Vector3d& target, double roll) {
  const Eigen::Vector3d forward = (target - eye).normalized();
  Eigen::Vector3d up(0.0, 0.0, 1.0);
  if (std::abs(forward.dot(up)) > 0.99) {
    up = Eigen::Vector3d(0.0, 1.0, 0.0);
  }
  up = so3_exp(roll * forward) * up;
  const Eigen::Vector3d x = forward.cross(up).normalized();
  const Eigen::Vector3d y = forward.cross(x);
  Eigen::Matrix3d world_from_cam;
  world_from_cam.col(0) = x;
  world_from_cam.col(1) = y;
  world_from_cam.col(2) = forward;
  SE3Pose pose;
  pose.rotation = world_from_cam.transpose();
  pose.translation = -pose.rotation * eye;
  return pose;
}

SceneSample sample_scene(const RobotModel& model, const CameraIntrinsics& K,
                         uint64_t rng_seed, const RandomizationRanges& ranges,
                         const RenderConfig& render_cfg) {
  model.Validate();
  K.Validate();
  ranges.Validate(model);
  Rng rng(rng_seed);

  const int dof = static_cast<int>(model.joints.size());
  Eigen::VectorXd lo(dof), hi(dof);
  for (int i = 0; i < dof; ++i) {
    if (ranges.q_lo.size() != 0) {
      lo[i] = ranges.q_lo[i];
      hi[i] = ranges.q_hi[i];
    } else {
      const double center =
          0.5 * (model.joints[i].limit_lo + model.joints[i].limit_hi);
      const double half = 0.5 * ranges.joint_span *
                          (model.joints[i].limit_hi - model.joints[i].limit_lo);
      lo[i] = center - half;
      hi[i] = center + half;
    }
  }

  for (int attempt = 0; attempt < ranges.max_tries; ++attempt) {
    SceneSample sample;
    sample.seed = rng_seed;
    sample.intrinsics = K;
    sample.q.q.resize(dof);
    for (int i = 0; i < dof; ++i) {
      sample.q.q[i] = rng.uniform(lo[i], hi[i]);
    }

    const std::vector<Eigen::Vector3d> kp = keypoints_3d(model, sample.q);
    Eigen::Vector3d target = Eigen::Vector3d::Zero();
    for (const auto& p : kp) target += p;
    target /= static_cast<double>(kp.size());

    const double cos_theta = rng.uniform(-1.0, 1.0);
    const double phi = rng.uniform(0.0, 2.0 * M_PI);
    const double sin_theta = std::sqrt(std::max(0.0, 1.0 - cos_theta * cos_theta));
    const Eigen::Vector3d dir(sin_theta * std::cos(phi),
                              sin_theta * std::sin(phi), cos_theta);
    const double radius = rng.uniform(ranges.r_min, ranges.r_max);
    const double roll = rng.uniform(-ranges.roll_range, ranges.roll_range);
    sample.gt_pose = look_at_camera(target + radius * dir, target, roll);

    bool ok = true;
    std::vector<Eigen::Vector2d> projected;
    projected.reserve(kp.size());
    for (const auto& p : kp) {
      const Eigen::Vector3d cam = sample.gt_pose.Apply(p);
      if (cam.z() <= kZMin) {
        ok = false;
        break;
      }
      const Eigen::Vector2d px = project_point(cam, K);
      if (px.x() < ranges.margin_px || px.x() > K.width - 1 - ranges.margin_px ||
          px.y() < ranges.margin_px || px.y() > K.height - 1 - ranges.margin_px) {
        ok = false;
        break;
      }
      projected.push_back(px);
    }
    if (!ok) continue;

    sample.gt_keypoints2d = std::move(projected);
    auto labels = generate_labels(sample, model, render_cfg);
    sample.gt_keypoints2d = std::move(labels.first);
    sample.gt_mask = std::move(labels.second);
    return sample;
  }
  throw SamplingExhaustedError("no accepted scene within max_tries");
}

std::pair<std::vector<Eigen::Vector2d>, MaskImage> generate_labels(
    const SceneSample& sample, const RobotModel& model,
    const RenderConfig& cfg) {
  std::vector<Eigen::Vector2d> keypoints;
  for (const auto& p : keypoints_3d(model, sample.q)) {
    keypoints.push_back(project_point(sample.gt_pose.Apply(p), sample.intrinsics));
  }
  const TriangleMesh mesh =
      assemble_camera_mesh(model, sample.q, sample.gt_pose);
  const SilhouetteImage soft =
      render_silhouette(mesh, sample.intrinsics, cfg);
  MaskImage mask;
  mask.width = soft.width;
  mask.height = soft.height;
  mask.pixels = (soft.pixels > 0.5).cast<double>();
  return {std::move(keypoints), std::move(mask)};
}

Dataset generate_dataset(const RobotModel& robot, const CameraIntrinsics& K,
                         const RenderConfig& render_cfg,
                         const RandomizationRanges& ranges, int n,
                         uint64_t master_seed) {
  if (n <= 0) throw Error("dataset size must be positive");
  Dataset ds;
  ds.robot = robot;
  ds.intrinsics = K;
  ds.render_cfg = render_cfg;
  ds.master_seed = master_seed;
  ds.samples.reserve(n);
  for (int i = 0; i < n; ++i) {
    const uint64_t seed =
        Rng::ForIndex(master_seed, static_cast<uint64_t>(i)).next_u64();
    ds.samples.push_back(sample_scene(robot, K, seed, ranges, render_cfg));
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& dir, bool cache_masks) {
  const fs::path root(dir);
  if (fs::exists(root) && !fs::is_empty(root)) {
    throw IoError("refusing to write dataset into non-empty " + dir);
  }
  fs::create_directories(root);
  save_robot_json(ds.robot, (root / "robot.json").string());

  json manifest;
  manifest["robot_file"] = "robot.json";
  manifest["intrinsics"] = intrinsics_to_json(ds.intrinsics);
  manifest["render"] = {{"k_nearest", ds.render_cfg.k_nearest},
                        {"sigma", ds.render_cfg.sigma},
                        {"blur_radius", ds.render_cfg.blur_radius}};
  manifest["master_seed"] = ds.master_seed;
  json sample_files = json::array();

  for (size_t i = 0; i < ds.samples.size(); ++i) {
    const SceneSample& s = ds.samples[i];
    const std::string name = "sample_" + std::to_string(i) + ".json";
    json sj;
    json q = json::array();
    for (long k = 0; k < s.q.q.size(); ++k) q.push_back(s.q.q[k]);
    sj["q"] = q;
    sj["gt_pose"] = pose_to_json(s.gt_pose);
    sj["seed"] = s.seed;
    std::ofstream out(root / name);
    if (!out) throw IoError("cannot write " + name);
    out << sj.dump(2) << "\n";
    sample_files.push_back(name);
    if (cache_masks) {
      fs::create_directories(root / "masks");
      const std::string png =
          (root / "masks" / ("sample_" + std::to_string(i) + ".png")).string();
      write_png_gray(png, s.gt_mask.pixels);
    }
  }
  manifest["samples"] = sample_files;
  std::ofstream out(root / "manifest.json");
  if (!out) throw IoError("cannot write manifest.json");
  out << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
  const fs::path root(dir);
  std::ifstream in(root / "manifest.json");
  if (!in) throw IoError("cannot read manifest.json in " + dir);
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw IoError(std::string("bad manifest: ") + e.what());
  }

  Dataset ds;
  ds.robot = load_robot_json(
      (root / manifest.at("robot_file").get<std::string>()).string());
  ds.intrinsics = intrinsics_from_json(manifest.at("intrinsics"));
  ds.render_cfg.k_nearest = manifest.at("render").at("k_nearest").get<int>();
  ds.render_cfg.sigma = manifest.at("render").at("sigma").get<double>();
  ds.render_cfg.blur_radius =
      manifest.at("render").at("blur_radius").get<double>();
  ds.master_seed = manifest.at("master_seed").get<uint64_t>();

  for (const auto& name : manifest.at("samples")) {
    std::ifstream sin(root / name.get<std::string>());
    if (!sin) throw IoError("cannot read sample " + name.get<std::string>());
    json sj;
    sin >> sj;
    SceneSample s;
    s.intrinsics = ds.intrinsics;
    const json& q = sj.at("q");
    s.q.q.resize(static_cast<long>(q.size()));
    for (long k = 0; k < s.q.q.size(); ++k) s.q.q[k] = q.at(k).get<double>();
    s.gt_pose = pose_from_json(sj.at("gt_pose"));
    s.seed = sj.at("seed").get<uint64_t>();
    auto labels = generate_labels(s, ds.robot, ds.render_cfg);
    s.gt_keypoints2d = std::move(labels.first);
    s.gt_mask = std::move(labels.second);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace ctrpose
