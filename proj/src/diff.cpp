#include "ctrpose/diff.hpp"

#include <cmath>

namespace ctrpose {

VjpNode compose_vjp(
    const VjpNode& first,
    const std::function<VjpNode(const Eigen::VectorXd&)>& second) {
  VjpNode stage2 = second(first.value);
  VjpNode out;
  out.value = stage2.value;
  out.vjp = [first_vjp = first.vjp,
             second_vjp = stage2.vjp](const Eigen::VectorXd& cot) {
    return first_vjp(second_vjp(cot));
  };
  return out;
}

Eigen::VectorXd fd_gradient(const ScalarFn& f, const Eigen::VectorXd& x,
                            double h) {
  Eigen::VectorXd grad(x.size());
  Eigen::VectorXd probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    probe(i) = x(i) + h;
    const double fp = f(probe);
    probe(i) = x(i) - h;
    const double fm = f(probe);
    probe(i) = x(i);
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NonFiniteError("fd_gradient: non-finite function evaluation");
    }
    grad(i) = (fp - fm) / (2.0 * h);
  }
  return grad;
}

double fd_check(const ScalarFn& f, const Eigen::VectorXd& x,
                const Eigen::VectorXd& analytic_grad, double h) {
  if (analytic_grad.size() != x.size()) {
    throw ShapeMismatchError("fd_check: gradient/input size mismatch");
  }
  const Eigen::VectorXd fd = fd_gradient(f, x, h);
  double max_rel = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double denom = std::max(1.0, std::abs(analytic_grad(i)));
    max_rel = std::max(max_rel, std::abs(fd(i) - analytic_grad(i)) / denom);
  }
  return max_rel;
}

}  // namespace ctrpose
