#pragma once

#include <Eigen/Dense>
#include <functional>

#include "ctrpose/errors.hpp"

namespace ctrpose {

// Default central-difference step; balances truncation against round-off
// for doubles.
inline constexpr double kFdStep = 1e-5;

using ScalarFn = std::function<double(const Eigen::VectorXd&)>;
using VectorFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

// One reverse-mode stage: a forward value together with the map from an
// output-cotangent to the input-cotangent. Every differentiable operation
// in the pipeline realizes this contract (most with typed signatures; this
// vector form is the common denominator used by gradcheck and composition).
struct VjpNode {
  Eigen::VectorXd value;
  VectorFn vjp;
};

// Chain two stages: x -> first -> second. The composed vjp applies the
// stage cotangent maps in reverse order.
VjpNode compose_vjp(const VjpNode& first,
                    const std::function<VjpNode(const Eigen::VectorXd&)>& second);

// Max relative error between the analytic gradient and central finite
// differences of f at x:
//   max_i |(f(x+h e_i) - f(x-h e_i))/2h - g_i| / max(1, |g_i|)
// Throws NonFiniteError if any evaluation of f is NaN or Inf.
double fd_check(const ScalarFn& f, const Eigen::VectorXd& x,
                const Eigen::VectorXd& analytic_grad, double h = kFdStep);

// Central-difference gradient of f at x, for tests that need the raw vector.
Eigen::VectorXd fd_gradient(const ScalarFn& f, const Eigen::VectorXd& x,
                            double h = kFdStep);

}  // namespace ctrpose
