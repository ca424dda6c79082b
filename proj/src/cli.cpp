#include "ctrpose/cli.hpp"

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ctrpose/diff.hpp"
#include "ctrpose/errors.hpp"
#include "ctrpose/image_io.hpp"
#include "ctrpose/json_util.hpp"
#include "ctrpose/metrics.hpp"
#include "ctrpose/pbvs.hpp"
#include "ctrpose/perception.hpp"
#include "ctrpose/pnp.hpp"
#include "ctrpose/rng.hpp"
#include "ctrpose/selftrain.hpp"
#include "ctrpose/softrender.hpp"
#include "ctrpose/synthgen.hpp"

namespace ctrpose::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

uint64_t fnv1a(const std::string& data) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : data) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

int thread_cap() {
  int cap = static_cast<int>(std::thread::hardware_concurrency());
  if (cap < 1) cap = 1;
  if (const char* env = std::getenv("CTRPOSE_THREADS")) {
    const int requested = std::atoi(env);
    if (requested >= 1) cap = std::min(cap, requested);
  }
  return cap;
}

void ensure_fresh_dir(const fs::path& dir) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    throw IoError("output directory exists and is not empty: " + dir.string());
  }
  fs::create_directories(dir);
}

void write_manifest(const fs::path& dir, const std::string& command,
                    const json& resolved_config, uint64_t seed,
                    const std::vector<std::string>& artifacts) {
  json manifest;
  manifest["command"] = command;
  manifest["config_hash"] = hex64(fnv1a(resolved_config.dump()));
  manifest["seed"] = seed;
  manifest["artifact_paths"] = artifacts;
  std::ofstream out(dir / "run_manifest.json");
  if (!out) throw IoError("cannot write run_manifest.json");
  out << manifest.dump(2) << "\n";
}

// Config-file lookups; flags parsed afterwards override these.
template <typename T>
void maybe_get(const json& j, const char* key, T* field) {
  if (j.contains(key)) *field = j.at(key).get<T>();
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

RobotModel load_robot_or_builtin(const std::string& spec) {
  if (spec.empty() || spec == "builtin:arm3") return reference_arm();
  return load_robot_json(spec);
}

CameraIntrinsics default_intrinsics() {
  CameraIntrinsics K;
  K.width = 64;
  K.height = 64;
  K.fx = 60.0;
  K.fy = 60.0;
  K.cx = 31.5;
  K.cy = 31.5;
  return K;
}

// ---------------------------------------------------------------- gen ----

struct GenOpts {
  std::string robot = "builtin:arm3";
  std::string out;
  int n = 20;
  uint64_t seed = 0;
  int width = 64;
  int height = 64;
  double fx = 60.0;
  double fy = 60.0;
  double cx = -1.0;  // negative: center of the image
  double cy = -1.0;
  double r_min = 0.7;
  double r_max = 1.1;
  double margin_px = 2.0;
  double joint_span = 0.8;
  bool cache_masks = false;
};

json gen_config_json(const GenOpts& o) {
  return {{"robot", o.robot},       {"out", o.out},
          {"n", o.n},               {"seed", o.seed},
          {"width", o.width},       {"height", o.height},
          {"fx", o.fx},             {"fy", o.fy},
          {"cx", o.cx},             {"cy", o.cy},
          {"r_min", o.r_min},       {"r_max", o.r_max},
          {"margin_px", o.margin_px}, {"joint_span", o.joint_span},
          {"cache_masks", o.cache_masks}};
}

int cmd_gen(const GenOpts& o) {
  const RobotModel robot = load_robot_or_builtin(o.robot);
  CameraIntrinsics K;
  K.width = o.width;
  K.height = o.height;
  K.fx = o.fx;
  K.fy = o.fy;
  K.cx = o.cx < 0.0 ? (o.width - 1) / 2.0 : o.cx;
  K.cy = o.cy < 0.0 ? (o.height - 1) / 2.0 : o.cy;
  K.Validate();

  RandomizationRanges ranges;
  ranges.r_min = o.r_min;
  ranges.r_max = o.r_max;
  ranges.margin_px = o.margin_px;
  ranges.joint_span = o.joint_span;
  const RenderConfig render_cfg;

  ensure_fresh_dir(o.out);

  // Samples only depend on their own derived seed, so generation order is
  // free and the worker pool below cannot change the result.
  std::vector<std::optional<SceneSample>> slots(o.n);
  std::atomic<int> next{0};
  std::atomic<bool> failed{false};
  std::string failure;
  std::mutex failure_mu;
  const int n_workers = std::min(thread_cap(), o.n);
  std::vector<std::thread> workers;
  workers.reserve(n_workers);
  for (int w = 0; w < n_workers; ++w) {
    workers.emplace_back([&]() {
      while (true) {
        const int i = next.fetch_add(1);
        if (i >= o.n || failed.load()) return;
        try {
          const uint64_t seed =
              Rng::ForIndex(o.seed, static_cast<uint64_t>(i)).next_u64();
          slots[i] = sample_scene(robot, K, seed, ranges, render_cfg);
        } catch (const std::exception& e) {
          std::lock_guard<std::mutex> lock(failure_mu);
          failed.store(true);
          if (failure.empty()) failure = e.what();
          return;
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  if (failed.load()) throw Error("scene sampling failed: " + failure);

  Dataset ds;
  ds.robot = robot;
  ds.intrinsics = K;
  ds.render_cfg = render_cfg;
  ds.master_seed = o.seed;
  for (auto& s : slots) ds.samples.push_back(std::move(*s));

  // save_dataset re-checks emptiness; the manifest is the only file so far.
  std::vector<std::string> artifacts = {"manifest.json", "robot.json"};
  for (int i = 0; i < o.n; ++i) {
    artifacts.push_back("sample_" + std::to_string(i) + ".json");
  }
  const fs::path tmp = fs::path(o.out) / "_staging";
  save_dataset(ds, tmp.string(), o.cache_masks);
  for (const auto& entry : fs::directory_iterator(tmp)) {
    fs::rename(entry.path(), fs::path(o.out) / entry.path().filename());
  }
  fs::remove(tmp);
  write_manifest(o.out, "gen", gen_config_json(o), o.seed, artifacts);
  std::cout << "gen: wrote " << o.n << " samples to " << o.out << "\n";
  return 0;
}

// ----------------------------------------------------------- pretrain ----

struct PretrainOpts {
  std::string dataset;
  std::string out;
  double perturb_px = 0.0;
  uint64_t seed = 0;
  double sharpness = kDefaultSharpness;
  std::string mask_init = "corrupted";  // oracle|corrupted
  double rho = 0.01;
  int radius = 1;
};

json pretrain_config_json(const PretrainOpts& o) {
  return {{"dataset", o.dataset},   {"out", o.out},
          {"perturb_px", o.perturb_px}, {"seed", o.seed},
          {"sharpness", o.sharpness},   {"mask_init", o.mask_init},
          {"rho", o.rho},           {"radius", o.radius}};
}

int cmd_pretrain(const PretrainOpts& o) {
  const Dataset ds = load_dataset(o.dataset);
  const int n_scenes = static_cast<int>(ds.samples.size());
  const int n_kp = ds.robot.n_keypoints();

  PerceptionParams params = make_bump_params(n_scenes, n_kp,
                                             ds.intrinsics.width,
                                             ds.intrinsics.height);
  for (int s = 0; s < n_scenes; ++s) {
    for (int c = 0; c < n_kp; ++c) {
      // The bump center is the least-squares minimizer against the label.
      Eigen::Vector2d center = ds.samples[s].gt_keypoints2d[c];
      if (o.perturb_px > 0.0) {
        Rng rng = Rng::ForIndex(o.seed, static_cast<uint64_t>(s) * n_kp + c);
        const double angle = rng.uniform(0.0, 2.0 * M_PI);
        center += o.perturb_px * Eigen::Vector2d(std::cos(angle),
                                                 std::sin(angle));
      }
      params.center(s, c)[0] = center.x();
      params.center(s, c)[1] = center.y();
      params.sharpness(s, c) = o.sharpness;
    }
  }

  std::vector<Eigen::ArrayXXd> mask_init;
  mask_init.reserve(n_scenes);
  for (int s = 0; s < n_scenes; ++s) {
    const TriangleMesh mesh = assemble_camera_mesh(ds.robot, ds.samples[s].q,
                                                   ds.samples[s].gt_pose);
    Eigen::ArrayXXd oracle = hard_rasterize(mesh, ds.intrinsics,
                                            ds.intrinsics.width,
                                            ds.intrinsics.height);
    if (o.mask_init == "corrupted") {
      oracle = corrupt_mask(
          oracle, o.radius, o.rho,
          Rng::ForIndex(o.seed, static_cast<uint64_t>(s)).next_u64());
    } else if (o.mask_init != "oracle") {
      throw Error("mask_init must be oracle or corrupted");
    }
    mask_init.push_back(std::move(oracle));
  }
  init_trainable_masks(&params, mask_init);

  const fs::path out_dir = fs::path(o.out).parent_path();
  if (!out_dir.empty()) fs::create_directories(out_dir);
  save_checkpoint(Checkpoint{std::move(params), {}}, o.out);

  const fs::path manifest_dir = out_dir.empty() ? fs::path(".") : out_dir;
  write_manifest(manifest_dir, "pretrain", pretrain_config_json(o), o.seed,
                 {fs::path(o.out).filename().string()});
  std::cout << "pretrain: wrote " << o.out << "\n";
  return 0;
}

// -------------------------------------------------------------- train ----

struct TrainOpts {
  std::string robot;  // default: dataset robot
  std::string dataset;
  std::string ckpt;
  std::string out;
  int epochs = 200;
  double lr = 1e-2;
  double s = 0.1;
  double clip = 10.0;
  uint64_t seed = 0;
  std::string mask_mode = "corrupted";
  bool alternation = false;
  double temperature = kDefaultTemperature;
  double rho = 0.01;
  int radius = 1;
};

json train_config_json(const TrainOpts& o) {
  return {{"robot", o.robot},     {"dataset", o.dataset},
          {"ckpt", o.ckpt},       {"out", o.out},
          {"epochs", o.epochs},   {"lr", o.lr},
          {"s", o.s},             {"clip", o.clip},
          {"seed", o.seed},       {"mask_mode", o.mask_mode},
          {"alternation", o.alternation}, {"temperature", o.temperature},
          {"rho", o.rho},         {"radius", o.radius}};
}

MaskMode parse_mask_mode(const std::string& mode) {
  if (mode == "oracle") return MaskMode::kOracle;
  if (mode == "corrupted") return MaskMode::kCorrupted;
  if (mode == "trainable") return MaskMode::kTrainable;
  throw Error("mask mode must be oracle, corrupted, or trainable");
}

int cmd_train(const TrainOpts& o) {
  Dataset ds = load_dataset(o.dataset);
  if (!o.robot.empty()) ds.robot = load_robot_or_builtin(o.robot);
  Checkpoint ckpt = load_checkpoint(o.ckpt);

  TrainConfig cfg;
  cfg.lr = o.lr;
  cfg.epochs = o.epochs;
  cfg.grad_clip = o.clip;
  cfg.s = o.s;
  cfg.seed = o.seed;
  cfg.alternation = o.alternation;
  cfg.temperature = o.temperature;
  cfg.mask_mode = parse_mask_mode(o.mask_mode);

  ensure_fresh_dir(o.out);
  TrainerState trainer = make_trainer(ds, std::move(ckpt.params), cfg);
  trainer.mask_ctx.corrupt_rho = o.rho;
  trainer.mask_ctx.corrupt_radius = o.radius;

  std::ofstream log(fs::path(o.out) / "train_log.jsonl");
  if (!log) throw IoError("cannot write train_log.jsonl");
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const TrainRecord rec = train_epoch(&trainer, ds, cfg, epoch);
    json line = {{"epoch", rec.epoch},
                 {"mask_loss", rec.mask_loss},
                 {"seg_loss", rec.seg_loss},
                 {"mean_add_mm", rec.mean_add},
                 {"skipped", rec.skipped}};
    log << line.dump() << "\n";
  }
  log.close();

  // Empirical keypoint residuals (trained minus label) feed the servo
  // estimator's observation noise.
  Checkpoint out_ckpt;
  out_ckpt.params = trainer.params;
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    const HeatmapStack h =
        heatmap_model_forward(out_ckpt.params, static_cast<int>(i));
    const std::vector<Eigen::Vector2d> kp =
        spatial_softmax(h, cfg.temperature);
    for (int c = 0; c < out_ckpt.params.n_keypoints; ++c) {
      out_ckpt.residual_pool.push_back(kp[c] -
                                       ds.samples[i].gt_keypoints2d[c]);
    }
  }
  save_checkpoint(out_ckpt, (fs::path(o.out) / "checkpoint.json").string());

  write_manifest(o.out, "train", train_config_json(o), o.seed,
                 {"train_log.jsonl", "checkpoint.json"});
  std::cout << "train: finished " << o.epochs << " epochs, artifacts in "
            << o.out << "\n";
  return 0;
}

// --------------------------------------------------------------- eval ----

struct EvalOpts {
  std::string dataset;
  std::string ckpt;
  std::string out;
  double pck_threshold = kPckThresholdPx;
  double temperature = kDefaultTemperature;
  uint64_t seed = 0;
};

json eval_config_json(const EvalOpts& o) {
  return {{"dataset", o.dataset},       {"ckpt", o.ckpt},
          {"out", o.out},               {"pck_threshold", o.pck_threshold},
          {"temperature", o.temperature}, {"seed", o.seed}};
}

int cmd_eval(const EvalOpts& o) {
  const Dataset ds = load_dataset(o.dataset);
  const Checkpoint ckpt = load_checkpoint(o.ckpt);
  ensure_fresh_dir(o.out);

  MetricReport report;
  std::vector<double> errors2d;
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    const SceneSample& sample = ds.samples[i];
    const HeatmapStack h =
        heatmap_model_forward(ckpt.params, static_cast<int>(i));
    const std::vector<Eigen::Vector2d> kp =
        spatial_softmax(h, o.temperature);
    for (int c = 0; c < ckpt.params.n_keypoints; ++c) {
      errors2d.push_back((kp[c] - sample.gt_keypoints2d[c]).norm());
    }

    Correspondences corr;
    corr.points2d = kp;
    corr.points3d = keypoints_3d(ds.robot, sample.q);
    const PnpResult solved = pnp_solve(corr, ds.intrinsics);
    report.per_frame_add.push_back(
        add_metric(solved.pose, sample.gt_pose, corr.points3d));
  }
  for (double a : report.per_frame_add) report.mean_add += a;
  report.mean_add /= static_cast<double>(report.per_frame_add.size());
  report.auc_add = auc(report.per_frame_add, kAucMaxAdd, kAucSteps);
  report.pck_at_threshold = pck(errors2d, o.pck_threshold);
  for (double e : errors2d) report.mean_2d_err += e;
  report.mean_2d_err /= static_cast<double>(errors2d.size());

  json rj;
  rj["per_frame_add"] = report.per_frame_add;
  rj["mean_add"] = report.mean_add;
  rj["auc_add"] = report.auc_add;
  rj["pck_at_threshold"] = report.pck_at_threshold;
  rj["mean_2d_err"] = report.mean_2d_err;
  std::ofstream rf(fs::path(o.out) / "metric_report.json");
  if (!rf) throw IoError("cannot write metric_report.json");
  rf << rj.dump(2) << "\n";

  std::ofstream cf(fs::path(o.out) / "auc_curve.csv");
  if (!cf) throw IoError("cannot write auc_curve.csv");
  cf << "threshold,fraction\n";
  for (const auto& [t, frac] : accuracy_curve(report.per_frame_add,
                                              kAucMaxAdd, kAucSteps)) {
    cf << format_double(t) << "," << format_double(frac) << "\n";
  }

  write_manifest(o.out, "eval", eval_config_json(o), o.seed,
                 {"metric_report.json", "auc_curve.csv"});
  std::cout << "eval: mean ADD " << report.mean_add * 1000.0 << " mm, AUC "
            << report.auc_add << ", PCK@" << o.pck_threshold << " "
            << report.pck_at_threshold << "\n";
  return 0;
}

// ----------------------------------------------------------- gradcheck ----

struct GradcheckOpts {
  bool all = true;
  std::string out;
  uint64_t seed = 7;
};

json gradcheck_config_json(const GradcheckOpts& o) {
  return {{"all", o.all}, {"out", o.out}, {"seed", o.seed}};
}

struct StageResult {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

int cmd_gradcheck(const GradcheckOpts& o) {
  std::vector<StageResult> stages;
  Rng rng(o.seed);
  const RobotModel robot = reference_arm();
  const CameraIntrinsics K = default_intrinsics();
  const RenderConfig render_cfg;

  {  // d(exp(xi) p)/d(xi) against central differences
    StageResult st{"se3_exp_point", 0.0, 1e-6, false};
    for (int trial = 0; trial < 5; ++trial) {
      Eigen::VectorXd xi(6);
      for (int i = 0; i < 6; ++i) xi[i] = rng.uniform(-0.5, 0.5);
      const Eigen::Vector3d p(rng.uniform(-1, 1), rng.uniform(-1, 1),
                              rng.uniform(-1, 1));
      const SE3Pose base = se3_exp(SE3Tangent::FromVector(xi));
      for (int row = 0; row < 3; ++row) {
        const Eigen::VectorXd analytic =
            point_pose_jacobian(base.Apply(p)).row(row).transpose();
        auto f = [&](const Eigen::VectorXd& d) {
          return pose_compose(se3_exp(SE3Tangent::FromVector(d)), base)
              .Apply(p)[row];
        };
        st.max_rel_err = std::max(
            st.max_rel_err, fd_check(f, Eigen::VectorXd::Zero(6), analytic));
      }
    }
    st.pass = st.max_rel_err < st.tolerance;
    stages.push_back(st);
  }

  {  // pixel Jacobian of the projection
    StageResult st{"projection", 0.0, 1e-6, false};
    for (int trial = 0; trial < 10; ++trial) {
      const Eigen::Vector3d p(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3),
                              rng.uniform(0.5, 1.5));
      const Eigen::Matrix<double, 2, 3> jac = project_point_jacobian(p, K);
      for (int row = 0; row < 2; ++row) {
        auto f = [&](const Eigen::VectorXd& x) {
          return project_point(Eigen::Vector3d(x), K)[row];
        };
        st.max_rel_err = std::max(
            st.max_rel_err,
            fd_check(f, Eigen::VectorXd(p), jac.row(row).transpose()));
      }
    }
    st.pass = st.max_rel_err < st.tolerance;
    stages.push_back(st);
  }

  {  // spatial softmax VJP
    StageResult st{"spatial_softmax", 0.0, 1e-6, false};
    HeatmapStack h;
    h.n = 1;
    h.width = 8;
    h.height = 8;
    h.activations.resize(1);
    h.activations[0].resize(8, 8);
    for (int y = 0; y < 8; ++y) {
      for (int x = 0; x < 8; ++x) h.activations[0](y, x) = rng.uniform(-2, 2);
    }
    const Eigen::Vector2d cot(rng.uniform(-1, 1), rng.uniform(-1, 1));
    const HeatmapStack back = spatial_softmax_vjp(h, 1.0, {cot});
    Eigen::VectorXd analytic(64);
    for (int y = 0; y < 8; ++y) {
      for (int x = 0; x < 8; ++x) analytic[y * 8 + x] = back.activations[0](y, x);
    }
    auto f = [&](const Eigen::VectorXd& v) {
      HeatmapStack hh = h;
      for (int y = 0; y < 8; ++y) {
        for (int x = 0; x < 8; ++x) hh.activations[0](y, x) = v[y * 8 + x];
      }
      return spatial_softmax(hh, 1.0)[0].dot(cot);
    };
    Eigen::VectorXd flat(64);
    for (int y = 0; y < 8; ++y) {
      for (int x = 0; x < 8; ++x) flat[y * 8 + x] = h.activations[0](y, x);
    }
    st.max_rel_err = fd_check(f, flat, analytic);
    st.pass = st.max_rel_err < st.tolerance;
    stages.push_back(st);
  }

  {  // bump model parameter VJP
    StageResult st{"heatmap_model", 0.0, 1e-4, false};
    PerceptionParams params = make_bump_params(1, 2, 16, 16);
    params.center(0, 0)[0] = 5.5;
    params.center(0, 0)[1] = 7.0;
    params.center(0, 1)[0] = 10.0;
    params.center(0, 1)[1] = 4.25;
    HeatmapStack cot;
    cot.n = 2;
    cot.width = 16;
    cot.height = 16;
    cot.activations.assign(2, Eigen::ArrayXXd(16, 16));
    for (int c = 0; c < 2; ++c) {
      for (int y = 0; y < 16; ++y) {
        for (int x = 0; x < 16; ++x) {
          cot.activations[c](y, x) = rng.uniform(-0.1, 0.1);
        }
      }
    }
    const Eigen::VectorXd analytic = heatmap_model_param_vjp(params, 0, cot);
    auto f = [&](const Eigen::VectorXd& theta) {
      PerceptionParams pp = params;
      pp.theta_kp = theta;
      const HeatmapStack h = heatmap_model_forward(pp, 0);
      double total = 0.0;
      for (int c = 0; c < 2; ++c) {
        total += (h.activations[c] * cot.activations[c]).sum();
      }
      return total;
    };
    st.max_rel_err = fd_check(f, params.theta_kp, analytic);
    st.pass = st.max_rel_err < st.tolerance;
    stages.push_back(st);
  }

  // Shared scene for the heavy stages.
  RandomizationRanges ranges;
  const SceneSample scene = sample_scene(robot, K, 99, ranges, render_cfg);
  const TriangleMesh gt_mesh =
      assemble_camera_mesh(robot, scene.q, scene.gt_pose);

  {  // render pose gradient against re-rendered differences
    StageResult st{"render_pose", 0.0, 2e-2, false};
    Eigen::VectorXd xi(6);
    for (int i = 0; i < 6; ++i) xi[i] = rng.uniform(-0.02, 0.02);
    const SE3Pose pose =
        pose_compose(se3_exp(SE3Tangent::FromVector(xi)), scene.gt_pose);
    const TriangleMesh mesh = assemble_camera_mesh(robot, scene.q, pose);
    MaskImage target;
    target.width = scene.gt_mask.width;
    target.height = scene.gt_mask.height;
    target.pixels = scene.gt_mask.pixels;
    const SilhouetteImage s = render_silhouette(mesh, K, render_cfg);
    const LossValue lv = mask_loss(s, target);
    const Eigen::Matrix<double, 6, 1> analytic =
        render_backward(mesh, K, render_cfg, lv.cotangent);
    auto f = [&](const Eigen::VectorXd& d) {
      const SE3Pose p2 =
          pose_compose(se3_exp(SE3Tangent::FromVector(d)), pose);
      const TriangleMesh m2 = assemble_camera_mesh(robot, scene.q, p2);
      return mask_loss(render_silhouette(m2, K, render_cfg), target).value;
    };
    st.max_rel_err = fd_check(f, Eigen::VectorXd::Zero(6), analytic, 1e-4);
    st.pass = st.max_rel_err < st.tolerance;
    stages.push_back(st);
  }

  {  // solver backward against re-solve differences
    StageResult st{"pnp_backward", 0.0, 1e-3, false};
    Correspondences corr;
    corr.points3d = keypoints_3d(robot, scene.q);
    for (const auto& p : corr.points3d) {
      corr.points2d.push_back(project_point(scene.gt_pose.Apply(p), K));
    }
    const PnpResult solved = pnp_solve(corr, K);
    Eigen::Matrix<double, 6, 1> cot;
    for (int i = 0; i < 6; ++i) cot[i] = rng.uniform(-1, 1);
    const Eigen::VectorXd analytic = pnp_backward(corr, K, solved, cot);
    auto f = [&](const Eigen::VectorXd& flat) {
      Correspondences c2 = corr;
      for (size_t i = 0; i < c2.points2d.size(); ++i) {
        c2.points2d[i] = flat.segment<2>(2 * i);
      }
      const PnpResult r = pnp_solve(c2, K, solved.pose);
      return se3_log(pose_compose(r.pose, pose_invert(solved.pose)))
          .ToVector()
          .dot(cot);
    };
    Eigen::VectorXd flat(2 * corr.size());
    for (int i = 0; i < static_cast<int>(corr.size()); ++i) {
      flat.segment<2>(2 * i) = corr.points2d[i];
    }
    st.max_rel_err = fd_check(f, flat, analytic, 1e-4);
    st.pass = st.max_rel_err < st.tolerance;
    stages.push_back(st);
  }

  {  // composed path: mask loss through solver and softmax to bump params
    StageResult st{"pipeline_kp", 0.0, 1e-2, false};
    PerceptionParams params = make_bump_params(1, robot.n_keypoints(),
                                               K.width, K.height);
    for (int c = 0; c < robot.n_keypoints(); ++c) {
      Rng prng = Rng::ForIndex(o.seed, c);
      const double angle = prng.uniform(0.0, 2.0 * M_PI);
      // Half-pixel offsets keep the solve near zero residual, where the
      // Gauss-Newton inner Hessian is essentially exact.
      params.center(0, c)[0] =
          scene.gt_keypoints2d[c].x() + 0.5 * std::cos(angle);
      params.center(0, c)[1] =
          scene.gt_keypoints2d[c].y() + 0.5 * std::sin(angle);
    }
    MaskImage target;
    target.width = scene.gt_mask.width;
    target.height = scene.gt_mask.height;
    target.pixels = scene.gt_mask.pixels;
    const std::vector<Eigen::Vector3d> points3d = keypoints_3d(robot, scene.q);

    auto forward_loss = [&](const PerceptionParams& pp,
                            Eigen::VectorXd* grad_out) {
      const HeatmapStack h = heatmap_model_forward(pp, 0);
      const std::vector<Eigen::Vector2d> kp = spatial_softmax(h, 1.0);
      Correspondences corr;
      corr.points2d = kp;
      corr.points3d = points3d;
      const PnpResult solved = pnp_solve(corr, K);
      const TriangleMesh mesh = assemble_camera_mesh(robot, scene.q, solved.pose);
      const SilhouetteImage s = render_silhouette(mesh, K, render_cfg);
      const LossValue lv = mask_loss(s, target);
      if (grad_out) {
        const Eigen::Matrix<double, 6, 1> pose_cot =
            render_backward(mesh, K, render_cfg, lv.cotangent);
        const Eigen::VectorXd pt_cots = pnp_backward(corr, K, solved, pose_cot);
        std::vector<Eigen::Vector2d> out_cots(pp.n_keypoints);
        for (int c = 0; c < pp.n_keypoints; ++c) {
          out_cots[c] = pt_cots.segment<2>(2 * c);
        }
        *grad_out =
            heatmap_model_param_vjp(pp, 0, spatial_softmax_vjp(h, 1.0, out_cots));
      }
      return lv.value;
    };

    Eigen::VectorXd analytic;
    forward_loss(params, &analytic);
    auto f = [&](const Eigen::VectorXd& theta) {
      PerceptionParams pp = params;
      pp.theta_kp = theta;
      return forward_loss(pp, nullptr);
    };
    st.max_rel_err = fd_check(f, params.theta_kp, analytic, 1e-3);
    st.pass = st.max_rel_err < st.tolerance;
    stages.push_back(st);
  }

  json report;
  bool all_pass = true;
  for (const auto& st : stages) {
    report["stages"][st.name] = {{"max_rel_err", st.max_rel_err},
                                 {"tolerance", st.tolerance},
                                 {"pass", st.pass}};
    all_pass = all_pass && st.pass;
    std::cout << "gradcheck " << st.name << ": max rel err "
              << st.max_rel_err << (st.pass ? " PASS" : " FAIL") << "\n";
  }
  report["all_pass"] = all_pass;
  if (!o.out.empty()) {
    ensure_fresh_dir(o.out);
    std::ofstream rf(fs::path(o.out) / "gradcheck.json");
    if (!rf) throw IoError("cannot write gradcheck.json");
    rf << report.dump(2) << "\n";
    write_manifest(o.out, "gradcheck", gradcheck_config_json(o), o.seed,
                   {"gradcheck.json"});
  }
  return all_pass ? 0 : 2;
}

// -------------------------------------------------------------- servo ----

struct ServoOpts {
  std::string robot = "builtin:arm3";
  std::string estimator = "gt";
  double gain = 0.5;
  double duration = 5.0;
  std::string camera_motion = "static";
  double orbit_rate = 0.1;  // rad/s
  uint64_t seed = 0;
  std::string out;
};

json servo_config_json(const ServoOpts& o) {
  return {{"robot", o.robot},         {"estimator", o.estimator},
          {"gain", o.gain},           {"duration", o.duration},
          {"camera_motion", o.camera_motion}, {"orbit_rate", o.orbit_rate},
          {"seed", o.seed},           {"out", o.out}};
}

int cmd_servo(const ServoOpts& o) {
  const RobotModel robot = load_robot_or_builtin(o.robot);
  const CameraIntrinsics K = default_intrinsics();
  Rng rng(o.seed);

  // Start and goal configurations drawn like dataset scenes.
  RandomizationRanges ranges;
  const int dof = static_cast<int>(robot.joints.size());
  Eigen::VectorXd q0(dof), q_goal(dof);
  for (int i = 0; i < dof; ++i) {
    const double center =
        0.5 * (robot.joints[i].limit_lo + robot.joints[i].limit_hi);
    const double half = 0.5 * ranges.joint_span *
                        (robot.joints[i].limit_hi - robot.joints[i].limit_lo);
    q0[i] = rng.uniform(center - half, center + half);
    q_goal[i] = rng.uniform(center - half, center + half);
  }

  const std::vector<Eigen::Vector3d> kp = keypoints_3d(robot, JointConfig{q0});
  Eigen::Vector3d target = Eigen::Vector3d::Zero();
  for (const auto& p : kp) target += p;
  target /= static_cast<double>(kp.size());
  const double cos_theta = rng.uniform(-0.3, 0.7);
  const double phi = rng.uniform(0.0, 2.0 * M_PI);
  const double sin_theta = std::sqrt(1.0 - cos_theta * cos_theta);
  const Eigen::Vector3d eye0 =
      target + rng.uniform(ranges.r_min, ranges.r_max) *
                   Eigen::Vector3d(sin_theta * std::cos(phi),
                                   sin_theta * std::sin(phi), cos_theta);
  const double roll = rng.uniform(-0.5, 0.5);

  CameraMotion motion;
  if (o.camera_motion == "orbit") {
    const double rate = o.orbit_rate;
    motion = [eye0, target, roll, rate](double t) {
      const Eigen::Vector3d arm = eye0 - target;
      const Eigen::Matrix3d rot =
          so3_exp(Eigen::Vector3d(0.0, 0.0, rate * t));
      return look_at_camera(target + rot * arm, target, roll);
    };
  } else if (o.camera_motion == "static") {
    const SE3Pose fixed = look_at_camera(eye0, target, roll);
    motion = [fixed](double) { return fixed; };
  } else {
    throw Error("camera motion must be static or orbit");
  }

  PoseEstimator estimator;
  if (o.estimator == "gt") {
    estimator = make_gt_estimator();
  } else if (o.estimator.rfind("biased:", 0) == 0) {
    estimator = make_biased_estimator(std::stod(o.estimator.substr(7)));
  } else if (o.estimator.rfind("ctrnet:", 0) == 0) {
    const Checkpoint ckpt = load_checkpoint(o.estimator.substr(7));
    estimator = make_ctrnet_estimator(robot, K, ckpt, o.seed);
  } else {
    throw Error("estimator must be gt, biased:<m>, or ctrnet:<ckpt>");
  }

  ServoState initial;
  initial.q.q = q0;
  initial.cam_pose_true = motion(0.0);
  const SE3Pose goal_base = fk_frames(robot, JointConfig{q_goal}).back();
  initial.goal_cam = pose_compose(initial.cam_pose_true, goal_base);

  const ServoTrace trace =
      run_servo(robot, initial, estimator, o.gain, o.duration, motion);

  ensure_fresh_dir(o.out);
  std::ofstream cf(fs::path(o.out) / "trace.csv");
  if (!cf) throw IoError("cannot write trace.csv");
  cf << "t,trans_err,rot_err,fault\n";
  std::vector<double> ts, errs;
  for (const auto& step : trace.steps) {
    cf << format_double(step.t) << "," << format_double(step.translational_err)
       << "," << format_double(step.rotational_err) << ","
       << (step.fault ? 1 : 0) << "\n";
    ts.push_back(step.t);
    errs.push_back(step.translational_err);
  }
  cf.close();
  write_polyline_plot((fs::path(o.out) / "distance_to_goal.png").string(), ts,
                      errs);
  write_manifest(o.out, "servo", servo_config_json(o), o.seed,
                 {"trace.csv", "distance_to_goal.png"});
  std::cout << "servo: final translational error "
            << trace.steps.back().translational_err * 1000.0 << " mm\n";
  return 0;
}

// ------------------------------------------------------------ plumbing ----

json load_config_file(int argc, const char* const argv[]) {
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string(argv[i]) == "--config") {
      std::ifstream in(argv[i + 1]);
      if (!in) throw IoError(std::string("cannot read config ") + argv[i + 1]);
      json j;
      try {
        in >> j;
      } catch (const json::exception& e) {
        throw IoError(std::string("bad config json: ") + e.what());
      }
      return j;
    }
  }
  return json::object();
}

}  // namespace

int run_command(int argc, const char* const argv[]) {
  CLI::App app{"camera-to-robot pose estimation pipeline"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path,
                 "JSON config file; explicit flags take precedence")
      ->expected(1);

  GenOpts gen;
  PretrainOpts pretrain;
  TrainOpts train;
  EvalOpts eval;
  GradcheckOpts gradcheck;
  ServoOpts servo;

  json cfg;
  try {
    cfg = load_config_file(argc, argv);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  // Config file values become defaults; parsed flags override them.
  maybe_get(cfg, "robot", &gen.robot);
  maybe_get(cfg, "out", &gen.out);
  maybe_get(cfg, "n", &gen.n);
  maybe_get(cfg, "seed", &gen.seed);
  maybe_get(cfg, "width", &gen.width);
  maybe_get(cfg, "height", &gen.height);
  maybe_get(cfg, "fx", &gen.fx);
  maybe_get(cfg, "fy", &gen.fy);
  maybe_get(cfg, "cx", &gen.cx);
  maybe_get(cfg, "cy", &gen.cy);
  maybe_get(cfg, "r_min", &gen.r_min);
  maybe_get(cfg, "r_max", &gen.r_max);
  maybe_get(cfg, "margin_px", &gen.margin_px);
  maybe_get(cfg, "joint_span", &gen.joint_span);
  maybe_get(cfg, "cache_masks", &gen.cache_masks);
  maybe_get(cfg, "dataset", &pretrain.dataset);
  maybe_get(cfg, "out", &pretrain.out);
  maybe_get(cfg, "perturb_px", &pretrain.perturb_px);
  maybe_get(cfg, "seed", &pretrain.seed);
  maybe_get(cfg, "sharpness", &pretrain.sharpness);
  maybe_get(cfg, "mask_init", &pretrain.mask_init);
  maybe_get(cfg, "rho", &pretrain.rho);
  maybe_get(cfg, "radius", &pretrain.radius);
  maybe_get(cfg, "robot", &train.robot);
  maybe_get(cfg, "dataset", &train.dataset);
  maybe_get(cfg, "ckpt", &train.ckpt);
  maybe_get(cfg, "out", &train.out);
  maybe_get(cfg, "epochs", &train.epochs);
  maybe_get(cfg, "lr", &train.lr);
  maybe_get(cfg, "s", &train.s);
  maybe_get(cfg, "clip", &train.clip);
  maybe_get(cfg, "seed", &train.seed);
  maybe_get(cfg, "mask_mode", &train.mask_mode);
  maybe_get(cfg, "alternation", &train.alternation);
  maybe_get(cfg, "temperature", &train.temperature);
  maybe_get(cfg, "rho", &train.rho);
  maybe_get(cfg, "radius", &train.radius);
  maybe_get(cfg, "dataset", &eval.dataset);
  maybe_get(cfg, "ckpt", &eval.ckpt);
  maybe_get(cfg, "out", &eval.out);
  maybe_get(cfg, "pck_threshold", &eval.pck_threshold);
  maybe_get(cfg, "temperature", &eval.temperature);
  maybe_get(cfg, "seed", &eval.seed);
  maybe_get(cfg, "out", &gradcheck.out);
  maybe_get(cfg, "seed", &gradcheck.seed);
  maybe_get(cfg, "robot", &servo.robot);
  maybe_get(cfg, "estimator", &servo.estimator);
  maybe_get(cfg, "gain", &servo.gain);
  maybe_get(cfg, "duration", &servo.duration);
  maybe_get(cfg, "camera_motion", &servo.camera_motion);
  maybe_get(cfg, "orbit_rate", &servo.orbit_rate);
  maybe_get(cfg, "seed", &servo.seed);
  maybe_get(cfg, "out", &servo.out);

  CLI::App* gen_cmd = app.add_subcommand("gen", "generate a synthetic dataset");
  gen_cmd->add_option("--robot", gen.robot, "robot json or builtin:arm3");
  gen_cmd->add_option("--out", gen.out, "output dataset directory")->required();
  gen_cmd->add_option("--n", gen.n, "number of scenes");
  gen_cmd->add_option("--seed", gen.seed, "master seed");
  gen_cmd->add_option("--width", gen.width, "image width");
  gen_cmd->add_option("--height", gen.height, "image height");
  gen_cmd->add_option("--fx", gen.fx, "focal length x, px");
  gen_cmd->add_option("--fy", gen.fy, "focal length y, px");
  gen_cmd->add_option("--cx", gen.cx, "principal point x (default center)");
  gen_cmd->add_option("--cy", gen.cy, "principal point y (default center)");
  gen_cmd->add_option("--r-min", gen.r_min, "camera shell inner radius, m");
  gen_cmd->add_option("--r-max", gen.r_max, "camera shell outer radius, m");
  gen_cmd->add_option("--margin", gen.margin_px, "keypoint image margin, px");
  gen_cmd->add_option("--joint-span", gen.joint_span,
                      "fraction of joint range sampled");
  gen_cmd->add_flag("--cache-masks", gen.cache_masks, "also write mask PNGs");

  CLI::App* pre_cmd =
      app.add_subcommand("pretrain", "fit the bump model to dataset labels");
  pre_cmd->add_option("--dataset", pretrain.dataset, "dataset directory")
      ->required();
  pre_cmd->add_option("--out", pretrain.out, "checkpoint path")->required();
  pre_cmd->add_option("--perturb-px", pretrain.perturb_px,
                      "offset centers by this many pixels");
  pre_cmd->add_option("--seed", pretrain.seed, "perturbation seed");
  pre_cmd->add_option("--sharpness", pretrain.sharpness, "bump sharpness");
  pre_cmd->add_option("--mask-init", pretrain.mask_init,
                      "mask logit init: oracle or corrupted");
  pre_cmd->add_option("--rho", pretrain.rho, "salt-and-pepper rate");
  pre_cmd->add_option("--radius", pretrain.radius, "boundary noise radius, px");

  CLI::App* train_cmd =
      app.add_subcommand("train", "self-supervised training loop");
  train_cmd->add_option("--robot", train.robot, "override dataset robot");
  train_cmd->add_option("--dataset", train.dataset, "dataset directory")
      ->required();
  train_cmd->add_option("--ckpt", train.ckpt, "pretrained checkpoint")
      ->required();
  train_cmd->add_option("--out", train.out, "output directory")->required();
  train_cmd->add_option("--epochs", train.epochs, "training epochs");
  train_cmd->add_option("--lr", train.lr, "learning rate");
  train_cmd->add_option("--s", train.s, "residual weight scale");
  train_cmd->add_option("--clip", train.clip, "gradient norm clip");
  train_cmd->add_option("--seed", train.seed, "run seed");
  train_cmd->add_option("--mask-mode", train.mask_mode,
                        "oracle, corrupted, or trainable");
  train_cmd->add_flag("--alternation", train.alternation,
                      "alternate kp/seg updates per scene");
  train_cmd->add_option("--temperature", train.temperature,
                        "spatial softmax temperature");
  train_cmd->add_option("--rho", train.rho, "mask salt-and-pepper rate");
  train_cmd->add_option("--radius", train.radius, "mask boundary radius, px");

  CLI::App* eval_cmd = app.add_subcommand("eval", "metric report on a dataset");
  eval_cmd->add_option("--dataset", eval.dataset, "dataset directory")
      ->required();
  eval_cmd->add_option("--ckpt", eval.ckpt, "checkpoint path")->required();
  eval_cmd->add_option("--out", eval.out, "output directory")->required();
  eval_cmd->add_option("--pck-threshold", eval.pck_threshold,
                       "PCK threshold, px");
  eval_cmd->add_option("--temperature", eval.temperature,
                       "spatial softmax temperature");
  eval_cmd->add_option("--seed", eval.seed, "manifest seed");

  CLI::App* grad_cmd =
      app.add_subcommand("gradcheck", "finite-difference gradient audit");
  grad_cmd->add_flag("--all", gradcheck.all, "run every stage");
  grad_cmd->add_option("--out", gradcheck.out, "report directory");
  grad_cmd->add_option("--seed", gradcheck.seed, "rng seed");

  CLI::App* servo_cmd =
      app.add_subcommand("servo", "closed-loop visual servoing simulation");
  servo_cmd->add_option("--robot", servo.robot, "robot json or builtin:arm3");
  servo_cmd->add_option("--estimator", servo.estimator,
                        "gt, biased:<m>, or ctrnet:<ckpt>");
  servo_cmd->add_option("--gain", servo.gain, "proportional gain");
  servo_cmd->add_option("--duration", servo.duration, "simulated seconds");
  servo_cmd->add_option("--camera-motion", servo.camera_motion,
                        "static or orbit");
  servo_cmd->add_option("--orbit-rate", servo.orbit_rate, "orbit rad/s");
  servo_cmd->add_option("--seed", servo.seed, "trial seed");
  servo_cmd->add_option("--out", servo.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen_cmd->parsed()) return cmd_gen(gen);
    if (pre_cmd->parsed()) return cmd_pretrain(pretrain);
    if (train_cmd->parsed()) return cmd_train(train);
    if (eval_cmd->parsed()) return cmd_eval(eval);
    if (grad_cmd->parsed()) return cmd_gradcheck(gradcheck);
    if (servo_cmd->parsed()) return cmd_servo(servo);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "fault: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace ctrpose::cli
