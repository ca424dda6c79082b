#include "ctrpose/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "ctrpose/errors.hpp"

namespace ctrpose {

double add_metric(const SE3Pose& est, const SE3Pose& gt,
                  const std::vector<Eigen::Vector3d>& points) {
  if (points.empty()) throw EmptyPointsError("add_metric needs points");
  double total = 0.0;
  for (const auto& p : points) {
    total += (est.Apply(p) - gt.Apply(p)).norm();
  }
  return total / static_cast<double>(points.size());
}

namespace {

double fraction_at_or_under(const std::vector<double>& sorted, double t) {
  auto it = std::upper_bound(sorted.begin(), sorted.end(), t);
  return static_cast<double>(it - sorted.begin()) /
         static_cast<double>(sorted.size());
}

}  // namespace

double auc(const std::vector<double>& errors, double max_threshold,
           int steps) {
  if (errors.empty()) throw EmptyInputError("auc needs errors");
  if (max_threshold <= 0.0) throw Error("auc needs max_threshold > 0");
  if (steps <= 0) throw Error("auc needs steps > 0");
  std::vector<double> sorted = errors;
  std::sort(sorted.begin(), sorted.end());
  double total = 0.0;
  for (int k = 0; k < steps; ++k) {
    total += fraction_at_or_under(sorted, max_threshold * k / steps);
  }
  return total / steps * 100.0;
}

double pck(const std::vector<double>& errors2d, double threshold) {
  if (errors2d.empty()) throw EmptyInputError("pck needs errors");
  int count = 0;
  for (double e : errors2d) {
    if (e <= threshold) ++count;
  }
  return static_cast<double>(count) / static_cast<double>(errors2d.size());
}

std::vector<std::pair<double, double>> accuracy_curve(
    const std::vector<double>& errors, double max_threshold, int steps) {
  if (errors.empty()) throw EmptyInputError("accuracy_curve needs errors");
  std::vector<double> sorted = errors;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::pair<double, double>> curve;
  curve.reserve(steps);
  for (int k = 0; k < steps; ++k) {
    const double t = max_threshold * k / steps;
    curve.emplace_back(t, fraction_at_or_under(sorted, t));
  }
  return curve;
}

}  // namespace ctrpose
