#pragma once

#include <Eigen/Dense>
#include <vector>

#include "ctrpose/geometry.hpp"

namespace ctrpose {

struct MetricReport {
  std::vector<double> per_frame_add;  // meters
  double mean_add = 0.0;              // meters
  double auc_add = 0.0;               // percentage in [0, 100]
  double pck_at_threshold = 0.0;      // fraction in [0, 1]
  double mean_2d_err = 0.0;           // pixels
};

// Threshold grids for the accuracy curves: 0..0.1 m (3D) and 0..100 px (2D),
// 1000 uniform steps each.
constexpr double kAucMaxAdd = 0.1;
constexpr double kAucMaxPx = 100.0;
constexpr int kAucSteps = 1000;
constexpr double kPckThresholdPx = 50.0;

// Average distance between the two transforms of a point set:
// (1/n) sum_i ||est(p_i) - gt(p_i)||. Throws EmptyPointsError.
double add_metric(const SE3Pose& est, const SE3Pose& gt,
                  const std::vector<Eigen::Vector3d>& points);

// Accuracy-threshold area: mean over thresholds t_k = max_threshold * k /
// steps, k = 0..steps-1, of the fraction of errors <= t_k, times 100.
// Throws EmptyInputError on empty errors, Error on max_threshold <= 0.
double auc(const std::vector<double>& errors, double max_threshold, int steps);

// Fraction of errors at or under the threshold. Throws EmptyInputError.
double pck(const std::vector<double>& errors2d, double threshold);

// Accuracy curve samples (threshold, fraction) on the same grid auc uses;
// backs the CSV the eval command writes.
std::vector<std::pair<double, double>> accuracy_curve(
    const std::vector<double>& errors, double max_threshold, int steps);

}  // namespace ctrpose
