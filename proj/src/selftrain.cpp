#include "ctrpose/selftrain.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ctrpose/errors.hpp"
#include "ctrpose/metrics.hpp"
#include "ctrpose/rng.hpp"

namespace ctrpose {

namespace {

// IoU of the 0.5 level sets.
double mask_overlap(const Eigen::ArrayXXd& a, const Eigen::ArrayXXd& b) {
  double inter = 0.0;
  double uni = 0.0;
  for (long y = 0; y < a.rows(); ++y) {
    for (long x = 0; x < a.cols(); ++x) {
      const bool av = a(y, x) > 0.5;
      const bool bv = b(y, x) > 0.5;
      inter += av && bv ? 1.0 : 0.0;
      uni += av || bv ? 1.0 : 0.0;
    }
  }
  return uni > 0.0 ? inter / uni : 1.0;
}

struct PoseChoice {
  PnpResult result;
  bool any = false;
};

// Picks the scene's pose estimate among certified stationary points by
// silhouette agreement with the observed mask. The reprojection residual
// alone cannot tell mirror poses apart once the keypoints carry noise;
// the mask usually can, and silhouette agreement is the quantity the
// training loss optimizes anyway. Candidates come from the warm start and
// the closed-form start, plus the full start grid when asked (or when
// nothing certifies). Only candidates within res_gate of the best
// residual join the silhouette vote: an imperfect mask happily endorses a
// distant basin whose residual already rules it out, and late in training
// that endorsement is self-reinforcing. Falls back to the lowest-residual
// uncertified candidate so callers still get a best-effort estimate.
PoseChoice choose_pose(const Correspondences& corr, const CameraIntrinsics& K,
                       const PnpOptions& opts,
                       const std::optional<SE3Pose>& warm,
                       const RobotModel& robot, const JointConfig& q,
                       const Eigen::ArrayXXd& mask, bool full_sweep,
                       double res_gate, std::string* faults) {
  std::vector<PnpResult> certified;
  PnpResult loose;
  bool any_loose = false;
  auto consider = [&](const std::optional<SE3Pose>& init) {
    try {
      const PnpResult r = pnp_solve(corr, K, init, opts);
      if (r.converged) {
        for (const PnpResult& c : certified) {
          if (std::abs(c.residual - r.residual) < 1e-6) return;
        }
        certified.push_back(r);
      } else if (!any_loose || r.residual < loose.residual) {
        loose = r;
        any_loose = true;
      }
    } catch (const Error& e) {
      if (faults) *faults += std::string(e.what()) + "; ";
    }
  };

  const std::vector<std::optional<SE3Pose>> starts = pnp_start_grid(corr, K);
  if (warm) consider(*warm);
  consider(starts[0]);
  if (full_sweep || certified.empty()) {
    for (size_t i = 1; i < starts.size(); ++i) consider(starts[i]);
  }

  PoseChoice out;
  if (certified.size() == 1) {
    out.result = certified[0];
    out.any = true;
  } else if (!certified.empty()) {
    double min_res = certified[0].residual;
    for (const PnpResult& c : certified) min_res = std::min(min_res, c.residual);
    int best = -1;
    double best_iou = -1.0;
    for (size_t i = 0; i < certified.size(); ++i) {
      if (certified[i].residual > res_gate * min_res) continue;
      const TriangleMesh mesh = assemble_camera_mesh(robot, q, certified[i].pose);
      const double v =
          mask_overlap(hard_rasterize(mesh, K, K.width, K.height), mask);
      if (v > best_iou ||
          (v == best_iou && certified[i].residual < certified[best].residual)) {
        best = static_cast<int>(i);
        best_iou = v;
      }
    }
    out.result = certified[best];
    out.any = true;
  } else if (any_loose) {
    out.result = loose;
    out.any = true;
  }
  return out;
}

}  // namespace

void TrainConfig::Validate() const {
  if (!(lr > 0.0)) throw Error("lr must be > 0");
  if (!(grad_clip > 0.0)) throw Error("grad_clip must be > 0");
  if (!(s > 0.0)) throw Error("s must be > 0");
  if (epochs < 0) throw Error("epochs must be >= 0");
  if (!(temperature > 0.0)) throw Error("temperature must be > 0");
  render.Validate();
}

LossValue mask_loss(const SilhouetteImage& S, const MaskImage& M) {
  if (S.height != M.height || S.width != M.width) {
    throw ShapeMismatchError("mask_loss needs equal shapes");
  }
  LossValue out;
  const Eigen::ArrayXXd diff = S.pixels - M.pixels;
  out.value = (diff * diff).sum();
  out.cotangent = 2.0 * diff;
  return out;
}

double sample_weight(double residual, double s) {
  if (residual < 0.0) throw Error("residual must be >= 0");
  return std::exp(-s * residual);
}

LossValue seg_loss(const SilhouetteImage& S, const MaskImage& M, double w) {
  if (S.height != M.height || S.width != M.width) {
    throw ShapeMismatchError("seg_loss needs equal shapes");
  }
  constexpr double kEps = 1e-7;
  const double hw = static_cast<double>(S.height) * S.width;
  LossValue out;
  out.cotangent.resize(S.height, S.width);
  double total = 0.0;
  for (int y = 0; y < S.height; ++y) {
    for (int x = 0; x < S.width; ++x) {
      const double sv = std::clamp(S.pixels(y, x), kEps, 1.0 - kEps);
      const double mv = M.pixels(y, x);
      total += mv * std::log(sv) + (1.0 - mv) * std::log(1.0 - sv);
      out.cotangent(y, x) = -(w / hw) * (std::log(sv) - std::log(1.0 - sv));
    }
  }
  out.value = -(w / hw) * total;
  return out;
}

void adam_step(Eigen::VectorXd* params, AdamState* state,
               const Eigen::VectorXd& grad, double lr) {
  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kEps = 1e-8;
  if (state->m.size() != params->size()) {
    state->m = Eigen::VectorXd::Zero(params->size());
    state->v = Eigen::VectorXd::Zero(params->size());
    state->step = 0;
  }
  if (grad.size() != params->size()) {
    throw ShapeMismatchError("adam gradient size mismatch");
  }
  state->step += 1;
  state->m = kBeta1 * state->m + (1.0 - kBeta1) * grad;
  state->v =
      kBeta2 * state->v + (1.0 - kBeta2) * grad.cwiseProduct(grad);
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(state->step));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(state->step));
  for (long i = 0; i < params->size(); ++i) {
    const double mhat = state->m[i] / bc1;
    const double vhat = state->v[i] / bc2;
    (*params)[i] -= lr * mhat / (std::sqrt(vhat) + kEps);
  }
}

TrainerState make_trainer(const Dataset& ds, PerceptionParams params,
                          const TrainConfig& cfg) {
  cfg.Validate();
  params.Validate();
  TrainerState st;
  st.params = std::move(params);
  st.warm_poses.assign(ds.samples.size(), std::nullopt);
  st.skip_streak.assign(ds.samples.size(), 0);
  st.jitter_base.assign(ds.samples.size(), Eigen::VectorXd());
  st.lr = cfg.lr;
  st.mask_ctx.corrupt_seed = cfg.seed;
  st.mask_ctx.oracle_masks.reserve(ds.samples.size());
  for (const auto& sample : ds.samples) {
    const TriangleMesh mesh =
        assemble_camera_mesh(ds.robot, sample.q, sample.gt_pose);
    st.mask_ctx.oracle_masks.push_back(
        hard_rasterize(mesh, ds.intrinsics, ds.intrinsics.width,
                       ds.intrinsics.height));
  }
  if (cfg.mask_mode == MaskMode::kTrainable &&
      st.params.theta_seg.size() == 0) {
    std::vector<Eigen::ArrayXXd> init;
    init.reserve(ds.samples.size());
    for (size_t i = 0; i < ds.samples.size(); ++i) {
      init.push_back(corrupt_mask(
          st.mask_ctx.oracle_masks[i], st.mask_ctx.corrupt_radius,
          st.mask_ctx.corrupt_rho,
          Rng::ForIndex(st.mask_ctx.corrupt_seed, static_cast<uint64_t>(i))
              .next_u64()));
    }
    init_trainable_masks(&st.params, init);
  }
  // Initial pose estimates: every scene gets a current best guess before
  // the first epoch, so skipped scenes keep a defined estimate instead of
  // dropping out of the mean. The full start grid runs once here.
  PnpOptions pnp_opts;
  pnp_opts.max_iterations = 400;
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    const HeatmapStack h =
        heatmap_model_forward(st.params, static_cast<int>(i));
    Correspondences corr;
    corr.points2d = spatial_softmax(h, cfg.temperature);
    corr.points3d = keypoints_3d(ds.robot, ds.samples[i].q);
    try {
      const MaskImage mask = mask_provider(static_cast<int>(i), cfg.mask_mode,
                                           st.params, st.mask_ctx);
      const PoseChoice choice =
          choose_pose(corr, ds.intrinsics, pnp_opts, std::nullopt, ds.robot,
                      ds.samples[i].q, mask.pixels, true,
                      std::numeric_limits<double>::infinity(), nullptr);
      if (choice.any) st.warm_poses[i] = choice.result.pose;
    } catch (const Error&) {
    }
  }
  return st;
}

double trainer_mean_add(const TrainerState& state, const Dataset& scenes) {
  double total = 0.0;
  int counted = 0;
  for (size_t i = 0; i < scenes.samples.size(); ++i) {
    if (!state.warm_poses[i]) continue;
    const std::vector<Eigen::Vector3d> pts =
        keypoints_3d(scenes.robot, scenes.samples[i].q);
    total += add_metric(*state.warm_poses[i], scenes.samples[i].gt_pose, pts) *
             1000.0;
    counted += 1;
  }
  return counted > 0 ? total / counted : 0.0;
}

TrainRecord train_epoch(TrainerState* state, const Dataset& scenes,
                        const TrainConfig& cfg, int epoch) {
  cfg.Validate();
  PerceptionParams& params = state->params;
  const int n_scenes = static_cast<int>(scenes.samples.size());
  if (params.n_scenes != n_scenes) {
    throw ShapeMismatchError("params cover a different scene count");
  }
  const bool train_seg = cfg.mask_mode == MaskMode::kTrainable &&
                         params.theta_seg.size() > 0;

  TrainRecord rec;
  rec.epoch = epoch;
  std::vector<double> scene_losses;

  for (int i = 0; i < n_scenes; ++i) {
    const SceneSample& sample = scenes.samples[i];
    const HeatmapStack h = heatmap_model_forward(params, i);
    const std::vector<Eigen::Vector2d> keypoints =
        spatial_softmax(h, cfg.temperature);
    const std::vector<Eigen::Vector3d> points3d =
        keypoints_3d(scenes.robot, sample.q);

    Correspondences corr;
    corr.points2d = keypoints;
    corr.points3d = points3d;

    PnpResult solved;
    Eigen::VectorXd kp_point_cots;
    SilhouetteImage silhouette;
    MaskImage mask;
    LossValue lm;
    std::string skip_reason;
    try {
      mask = mask_provider(i, cfg.mask_mode, params, state->mask_ctx);
      PnpOptions pnp_opts;
      pnp_opts.max_iterations = 400;
      std::string faults;
      // Warm and closed-form starts run every epoch; the full grid runs
      // periodically so a basin the pair keeps missing still gets
      // challenged, without paying the sweep each epoch.
      const bool full_sweep = epoch % 10 == 0;
      const PoseChoice choice = choose_pose(
          corr, scenes.intrinsics, pnp_opts, state->warm_poses[i],
          scenes.robot, sample.q, mask.pixels, full_sweep, 3.0, &faults);
      if (!choice.any) {
        throw DivergedError("no usable pose candidate (" + faults + ")");
      }
      solved = choice.result;
      const TriangleMesh mesh =
          assemble_camera_mesh(scenes.robot, sample.q, solved.pose);
      silhouette = render_silhouette(mesh, scenes.intrinsics, cfg.render);
      lm = mask_loss(silhouette, mask);
      const Eigen::Matrix<double, 6, 1> pose_cot = render_backward(
          mesh, scenes.intrinsics, cfg.render, lm.cotangent);
      kp_point_cots =
          pnp_backward(corr, scenes.intrinsics, solved, pose_cot);
    } catch (const DivergedError& e) {
      skip_reason = e.what();
    } catch (const SingularHessianError& e) {
      skip_reason = e.what();
    } catch (const BehindCameraError& e) {
      skip_reason = e.what();
    } catch (const EmptyFrustumError& e) {
      skip_reason = e.what();
    }
    if (!skip_reason.empty()) {
      rec.skipped += 1;
      rec.skips.emplace_back(i, skip_reason);
      // The warm pose survives a skipped epoch: the keypoints did not
      // move, so the last certified pose stays the best anchor. Once a
      // scene has skipped a few epochs in a row it would otherwise replay
      // the identical failing solve forever (its inputs are frozen), so a
      // small seeded nudge of the centers re-rolls the geometry until a
      // certifiable basin reappears.
      state->skip_streak[i] += 1;
      if (state->skip_streak[i] >= 3) {
        Eigen::VectorXd& base = state->jitter_base[i];
        if (base.size() == 0) {
          base.resize(2 * params.n_keypoints);
          for (int c = 0; c < params.n_keypoints; ++c) {
            base[2 * c] = params.center(i, c)[0];
            base[2 * c + 1] = params.center(i, c)[1];
          }
        }
        const double mag = 0.1 * std::min(state->skip_streak[i], 10);
        Rng rng = Rng::ForIndex(cfg.seed ^ 0x9e3779b97f4a7c15ull,
                                static_cast<uint64_t>(epoch) * n_scenes + i);
        for (int c = 0; c < params.n_keypoints; ++c) {
          params.center(i, c)[0] = base[2 * c] + mag * rng.normal();
          params.center(i, c)[1] = base[2 * c + 1] + mag * rng.normal();
        }
      }
      continue;
    }
    state->skip_streak[i] = 0;
    state->jitter_base[i].resize(0);
    state->warm_poses[i] = solved.pose;

    std::vector<Eigen::Vector2d> out_cots(params.n_keypoints);
    for (int c = 0; c < params.n_keypoints; ++c) {
      out_cots[c] = kp_point_cots.segment<2>(2 * c);
    }
    const HeatmapStack h_cot =
        spatial_softmax_vjp(h, cfg.temperature, out_cots);
    Eigen::VectorXd g_kp = heatmap_model_param_vjp(params, i, h_cot);

    const double w = sample_weight(solved.residual, cfg.s);
    const LossValue ls = seg_loss(silhouette, mask, w);
    Eigen::VectorXd g_seg;
    if (train_seg) {
      g_seg = Eigen::VectorXd::Zero(params.theta_seg.size());
      const long base = static_cast<long>(i) * params.seg_block();
      for (int y = 0; y < params.height; ++y) {
        for (int x = 0; x < params.width; ++x) {
          const double mv = mask.pixels(y, x);
          g_seg[base + y * params.width + x] =
              ls.cotangent(y, x) * mv * (1.0 - mv);
        }
      }
    }

    if (cfg.alternation) {
      if (i % 2 == 0) {
        if (train_seg) g_seg.setZero();
      } else {
        g_kp.setZero();
      }
    }

    const double seg_sq = train_seg ? g_seg.squaredNorm() : 0.0;
    const double total_norm = std::sqrt(g_kp.squaredNorm() + seg_sq);
    if (total_norm > cfg.grad_clip) {
      const double scale = cfg.grad_clip / total_norm;
      g_kp *= scale;
      if (train_seg) g_seg *= scale;
    }

    adam_step(&params.theta_kp, &state->adam_kp, g_kp, state->lr);
    if (train_seg) {
      adam_step(&params.theta_seg, &state->adam_seg, g_seg, state->lr);
    }
    // Projected step: sharpness stays above the floor where the bump
    // response is still localized around its center.
    for (int sc = 0; sc < params.n_scenes; ++sc) {
      for (int c = 0; c < params.n_keypoints; ++c) {
        params.sharpness(sc, c) =
            std::max(params.sharpness(sc, c), kMinSharpness);
      }
    }

    rec.mask_loss += lm.value;
    rec.seg_loss += ls.value;
    scene_losses.push_back(lm.value);
  }

  const int counted = n_scenes - rec.skipped;
  if (counted > 0) {
    rec.mask_loss /= counted;
    rec.seg_loss /= counted;
  }
  rec.mean_add = trainer_mean_add(*state, scenes);

  // Plateau decay: lr / 10 once the mask loss stalls for 5 epochs. The
  // per-epoch signal is the median scene loss (insensitive to scenes
  // entering or leaving the skip set) and stagnation is judged on a
  // trailing median of that signal, so a single lucky epoch cannot set an
  // unreachable best. After a decay the baseline resets to the current
  // level and a cooldown lets the new rate show progress before
  // stagnation counts again.
  double signal = rec.mask_loss;
  if (!scene_losses.empty()) {
    auto mid = scene_losses.begin() + scene_losses.size() / 2;
    std::nth_element(scene_losses.begin(), mid, scene_losses.end());
    signal = *mid;
  }
  state->loss_window.push_back(signal);
  if (state->loss_window.size() > 5) {
    state->loss_window.erase(state->loss_window.begin());
  }
  std::vector<double> window = state->loss_window;
  auto mid = window.begin() + window.size() / 2;
  std::nth_element(window.begin(), mid, window.end());
  const double smoothed = *mid;
  if (state->decay_cooldown > 0) {
    state->decay_cooldown -= 1;
    state->best_loss = std::min(state->best_loss, smoothed);
  } else if (smoothed < state->best_loss - 1e-12) {
    state->best_loss = smoothed;
    state->stagnant_epochs = 0;
  } else {
    state->stagnant_epochs += 1;
    if (state->stagnant_epochs >= 5) {
      state->lr /= 10.0;
      state->best_loss = smoothed;
      state->stagnant_epochs = 0;
      state->decay_cooldown = 10;
    }
  }
  return rec;
}

DescentResult fit_pose_to_mask(const RobotModel& robot, const JointConfig& q,
                               const CameraIntrinsics& K,
                               const RenderConfig& cfg,
                               const Eigen::ArrayXXd& target,
                               const SE3Pose& init, int steps, double lr) {
  MaskImage m;
  m.height = static_cast<int>(target.rows());
  m.width = static_cast<int>(target.cols());
  m.pixels = target;

  DescentResult out;
  out.pose = init;
  AdamState adam;
  Eigen::VectorXd dummy = Eigen::VectorXd::Zero(6);
  for (int step = 0; step < steps; ++step) {
    const TriangleMesh mesh = assemble_camera_mesh(robot, q, out.pose);
    const SilhouetteImage s = render_silhouette(mesh, K, cfg);
    const LossValue lv = mask_loss(s, m);
    out.final_loss = lv.value;
    const Eigen::Matrix<double, 6, 1> g =
        render_backward(mesh, K, cfg, lv.cotangent);
    // Adam moments live in the left tangent at the moving pose; the
    // resulting step is applied multiplicatively.
    dummy.setZero();
    adam_step(&dummy, &adam, Eigen::VectorXd(g), lr);
    const SE3Tangent delta = SE3Tangent::FromVector(dummy);
    out.pose = pose_compose(se3_exp(delta), out.pose);
    out.steps = step + 1;
  }
  const TriangleMesh mesh = assemble_camera_mesh(robot, q, out.pose);
  out.final_loss = mask_loss(render_silhouette(mesh, K, cfg), m).value;
  return out;
}

}  // namespace ctrpose
