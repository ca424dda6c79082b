#include "ctrpose/perception.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "ctrpose/errors.hpp"
#include "ctrpose/rng.hpp"

namespace ctrpose {

using nlohmann::json;

void PerceptionParams::Validate() const {
  if (n_scenes < 0 || n_keypoints <= 0 || width <= 0 || height <= 0) {
    throw Error("perception params dimensions invalid");
  }
  if (theta_kp.size() != static_cast<long>(n_scenes) * kp_block()) {
    throw ShapeMismatchError("theta_kp size mismatch");
  }
  if (theta_seg.size() != 0 &&
      theta_seg.size() != static_cast<long>(n_scenes) * seg_block()) {
    throw ShapeMismatchError("theta_seg size mismatch");
  }
  if (!theta_kp.allFinite() || !theta_seg.allFinite()) {
    throw NonFiniteError("perception params non-finite");
  }
}

PerceptionParams make_bump_params(int n_scenes, int n_keypoints, int width,
                                  int height) {
  PerceptionParams p;
  p.n_scenes = n_scenes;
  p.n_keypoints = n_keypoints;
  p.width = width;
  p.height = height;
  p.theta_kp.resize(static_cast<long>(n_scenes) * p.kp_block());
  for (int s = 0; s < n_scenes; ++s) {
    for (int c = 0; c < n_keypoints; ++c) {
      p.center(s, c)[0] = (width - 1) / 2.0;
      p.center(s, c)[1] = (height - 1) / 2.0;
      p.sharpness(s, c) = kDefaultSharpness;
    }
  }
  p.theta_seg.resize(0);
  p.theta_bb.resize(0);
  return p;
}

std::vector<Eigen::Vector2d> spatial_softmax(const HeatmapStack& h,
                                             double temperature) {
  if (!(temperature > 0.0)) throw Error("temperature must be > 0");
  std::vector<Eigen::Vector2d> out(h.n);
  for (int c = 0; c < h.n; ++c) {
    const Eigen::ArrayXXd& a = h.activations[c];
    if (!a.allFinite()) throw NonFiniteError("non-finite heatmap");
    const double mx = a.maxCoeff();
    double z = 0.0;
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    for (int y = 0; y < h.height; ++y) {
      for (int x = 0; x < h.width; ++x) {
        const double w = std::exp((a(y, x) - mx) / temperature);
        z += w;
        mean.x() += w * x;
        mean.y() += w * y;
      }
    }
    out[c] = mean / z;
  }
  return out;
}

HeatmapStack spatial_softmax_vjp(const HeatmapStack& h, double temperature,
                                 const std::vector<Eigen::Vector2d>& out_cots) {
  if (static_cast<int>(out_cots.size()) != h.n) {
    throw ShapeMismatchError("one output cotangent per channel expected");
  }
  const std::vector<Eigen::Vector2d> o = spatial_softmax(h, temperature);
  HeatmapStack cot;
  cot.n = h.n;
  cot.width = h.width;
  cot.height = h.height;
  cot.activations.resize(h.n);
  for (int c = 0; c < h.n; ++c) {
    const Eigen::ArrayXXd& a = h.activations[c];
    const double mx = a.maxCoeff();
    Eigen::ArrayXXd p(h.height, h.width);
    double z = 0.0;
    for (int y = 0; y < h.height; ++y) {
      for (int x = 0; x < h.width; ++x) {
        p(y, x) = std::exp((a(y, x) - mx) / temperature);
        z += p(y, x);
      }
    }
    cot.activations[c].resize(h.height, h.width);
    for (int y = 0; y < h.height; ++y) {
      for (int x = 0; x < h.width; ++x) {
        const double dot = (x - o[c].x()) * out_cots[c].x() +
                           (y - o[c].y()) * out_cots[c].y();
        cot.activations[c](y, x) = p(y, x) / z * dot / temperature;
      }
    }
  }
  return cot;
}

HeatmapStack heatmap_model_forward(const PerceptionParams& params,
                                   int scene_id) {
  params.Validate();
  if (scene_id < 0 || scene_id >= params.n_scenes) {
    throw UnknownSceneError("scene_id out of range");
  }
  HeatmapStack h;
  h.n = params.n_keypoints;
  h.width = params.width;
  h.height = params.height;
  h.activations.resize(h.n);
  for (int c = 0; c < h.n; ++c) {
    const double u = params.center(scene_id, c)[0];
    const double v = params.center(scene_id, c)[1];
    const double s = params.sharpness(scene_id, c);
    h.activations[c].resize(h.height, h.width);
    for (int y = 0; y < h.height; ++y) {
      for (int x = 0; x < h.width; ++x) {
        const double dx = x - u;
        const double dy = y - v;
        h.activations[c](y, x) = -s * (dx * dx + dy * dy);
      }
    }
  }
  return h;
}

Eigen::VectorXd heatmap_model_param_vjp(const PerceptionParams& params,
                                        int scene_id,
                                        const HeatmapStack& cotangent) {
  if (scene_id < 0 || scene_id >= params.n_scenes) {
    throw UnknownSceneError("scene_id out of range");
  }
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(params.theta_kp.size());
  const int base = scene_id * params.kp_block();
  for (int c = 0; c < params.n_keypoints; ++c) {
    const double u = params.center(scene_id, c)[0];
    const double v = params.center(scene_id, c)[1];
    const double s = params.sharpness(scene_id, c);
    double gu = 0.0, gv = 0.0, gs = 0.0;
    for (int y = 0; y < params.height; ++y) {
      for (int x = 0; x < params.width; ++x) {
        const double g = cotangent.activations[c](y, x);
        if (g == 0.0) continue;
        const double dx = x - u;
        const double dy = y - v;
        gu += g * 2.0 * s * dx;
        gv += g * 2.0 * s * dy;
        gs += -g * (dx * dx + dy * dy);
      }
    }
    grad[base + 2 * c] = gu;
    grad[base + 2 * c + 1] = gv;
    grad[base + 2 * params.n_keypoints + c] = gs;
  }
  return grad;
}

Eigen::ArrayXXd corrupt_mask(const Eigen::ArrayXXd& oracle, int radius,
                             double rho, uint64_t seed) {
  Rng rng(seed);
  const int h = static_cast<int>(oracle.rows());
  const int w = static_cast<int>(oracle.cols());
  const bool dilate = rng.bernoulli(0.5);

  // Morphology with an L1 ball, then keep each boundary change with
  // probability 1/2 so the corruption is ragged rather than a uniform
  // offset of the contour.
  Eigen::ArrayXXd morphed(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double extreme = oracle(y, x);
      for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
          if (std::abs(dx) + std::abs(dy) > radius) continue;
          const int yy = y + dy;
          const int xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          extreme = dilate ? std::max(extreme, oracle(yy, xx))
                           : std::min(extreme, oracle(yy, xx));
        }
      }
      morphed(y, x) = extreme;
    }
  }
  Eigen::ArrayXXd out = oracle;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (morphed(y, x) != oracle(y, x) && rng.bernoulli(0.5)) {
        out(y, x) = morphed(y, x);
      }
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (rng.bernoulli(rho)) {
        out(y, x) = 1.0 - out(y, x);
      }
    }
  }
  return out;
}

MaskImage mask_provider(int scene_id, MaskMode mode,
                        const PerceptionParams& params,
                        const MaskProviderContext& ctx) {
  MaskImage m;
  if (mode == MaskMode::kOracle || mode == MaskMode::kCorrupted) {
    if (scene_id < 0 ||
        scene_id >= static_cast<int>(ctx.oracle_masks.size())) {
      throw UnknownSceneError("no oracle mask for scene");
    }
    const Eigen::ArrayXXd& oracle = ctx.oracle_masks[scene_id];
    m.height = static_cast<int>(oracle.rows());
    m.width = static_cast<int>(oracle.cols());
    if (mode == MaskMode::kOracle) {
      m.pixels = oracle;
    } else {
      m.pixels = corrupt_mask(
          oracle, ctx.corrupt_radius, ctx.corrupt_rho,
          Rng::ForIndex(ctx.corrupt_seed, static_cast<uint64_t>(scene_id))
              .next_u64());
    }
    return m;
  }
  if (scene_id < 0 || scene_id >= params.n_scenes) {
    throw UnknownSceneError("scene_id out of range");
  }
  if (params.theta_seg.size() == 0) {
    throw Error("trainable masks not initialized");
  }
  m.width = params.width;
  m.height = params.height;
  m.pixels.resize(m.height, m.width);
  const long base = static_cast<long>(scene_id) * params.seg_block();
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      const double logit = params.theta_seg[base + y * m.width + x];
      m.pixels(y, x) = 1.0 / (1.0 + std::exp(-logit));
    }
  }
  return m;
}

void init_trainable_masks(PerceptionParams* params,
                          const std::vector<Eigen::ArrayXXd>& masks) {
  if (static_cast<int>(masks.size()) != params->n_scenes) {
    throw ShapeMismatchError("one mask per scene expected");
  }
  params->theta_seg.resize(static_cast<long>(params->n_scenes) *
                           params->seg_block());
  constexpr double kEps = 1e-7;
  for (int s = 0; s < params->n_scenes; ++s) {
    const Eigen::ArrayXXd& m = masks[s];
    if (m.rows() != params->height || m.cols() != params->width) {
      throw ShapeMismatchError("mask resolution mismatch");
    }
    const long base = static_cast<long>(s) * params->seg_block();
    for (int y = 0; y < params->height; ++y) {
      for (int x = 0; x < params->width; ++x) {
        const double v = std::clamp(m(y, x), kEps, 1.0 - kEps);
        params->theta_seg[base + y * params->width + x] =
            std::log(v / (1.0 - v));
      }
    }
  }
}

double intersection_over_union(const Eigen::ArrayXXd& a,
                               const Eigen::ArrayXXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeMismatchError("IoU needs equal shapes");
  }
  long inter = 0, uni = 0;
  for (long i = 0; i < a.size(); ++i) {
    const bool fa = a(i) > 0.5;
    const bool fb = b(i) > 0.5;
    inter += (fa && fb) ? 1 : 0;
    uni += (fa || fb) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const PerceptionParams& p = ckpt.params;
  p.Validate();
  json root;
  root["n_scenes"] = p.n_scenes;
  root["n_keypoints"] = p.n_keypoints;
  root["width"] = p.width;
  root["height"] = p.height;
  json scenes = json::array();
  for (int s = 0; s < p.n_scenes; ++s) {
    json centers = json::array();
    json sharp = json::array();
    for (int c = 0; c < p.n_keypoints; ++c) {
      centers.push_back({p.center(s, c)[0], p.center(s, c)[1]});
      sharp.push_back(p.sharpness(s, c));
    }
    scenes.push_back({{"centers", centers}, {"sharpness", sharp}});
  }
  root["scenes"] = scenes;

  if (p.theta_seg.size() > 0) {
    const std::filesystem::path side =
        std::filesystem::path(path).replace_extension(".masklogits.json");
    json logits = json::array();
    for (long i = 0; i < p.theta_seg.size(); ++i) {
      logits.push_back(p.theta_seg[i]);
    }
    std::ofstream fs(side);
    if (!fs) throw IoError("cannot write " + side.string());
    fs << json{{"logits", logits}};
    root["mask_logits_path"] = side.filename().string();
  } else {
    root["mask_logits_path"] = nullptr;
  }

  json residuals = json::array();
  for (const auto& r : ckpt.residual_pool) {
    residuals.push_back({r.x(), r.y()});
  }
  root["keypoint_residuals"] = residuals;

  std::ofstream fs(path);
  if (!fs) throw IoError("cannot write " + path);
  fs << root.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream fs(path);
  if (!fs) throw IoError("cannot read " + path);
  json root;
  try {
    fs >> root;
  } catch (const json::exception& e) {
    throw IoError(std::string("bad checkpoint json: ") + e.what());
  }
  Checkpoint ckpt;
  PerceptionParams& p = ckpt.params;
  p.n_scenes = root.at("n_scenes").get<int>();
  p.n_keypoints = root.at("n_keypoints").get<int>();
  p.width = root.at("width").get<int>();
  p.height = root.at("height").get<int>();
  p.theta_kp.resize(static_cast<long>(p.n_scenes) * p.kp_block());
  const json& scenes = root.at("scenes");
  for (int s = 0; s < p.n_scenes; ++s) {
    const json& scene = scenes.at(s);
    for (int c = 0; c < p.n_keypoints; ++c) {
      p.center(s, c)[0] = scene.at("centers").at(c).at(0).get<double>();
      p.center(s, c)[1] = scene.at("centers").at(c).at(1).get<double>();
      p.sharpness(s, c) = scene.at("sharpness").at(c).get<double>();
    }
  }
  if (!root.at("mask_logits_path").is_null()) {
    const std::filesystem::path side =
        std::filesystem::path(path).parent_path() /
        root.at("mask_logits_path").get<std::string>();
    std::ifstream ls(side);
    if (!ls) throw IoError("cannot read " + side.string());
    json logits_root;
    ls >> logits_root;
    const json& logits = logits_root.at("logits");
    p.theta_seg.resize(static_cast<long>(logits.size()));
    for (long i = 0; i < p.theta_seg.size(); ++i) {
      p.theta_seg[i] = logits.at(i).get<double>();
    }
  }
  if (root.contains("keypoint_residuals")) {
    for (const auto& r : root.at("keypoint_residuals")) {
      ckpt.residual_pool.emplace_back(r.at(0).get<double>(),
                                      r.at(1).get<double>());
    }
  }
  p.Validate();
  return ckpt;
}

}  // namespace ctrpose
