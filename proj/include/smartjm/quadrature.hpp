#pragma once

#include <array>
#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "smartjm/errors.hpp"

namespace smartjm {

// 15-point Kronrod extension of the 7-point Gauss-Legendre rule on [-1, 1].
struct GaussKronrod15 {
  std::array<double, 15> nodes;
  std::array<double, 15> weights;

  static const GaussKronrod15& get();
};

// Sum of w_k f(t_k) with t_k = (b - a)/2 (chi_k + 1) + a.
template <class F>
double integrate_gk15(F&& f, double a, double b) {
  if (a > b) throw PreconditionError("integrate_gk15: require a <= b");
  if (a == b) return 0.0;
  const auto& rule = GaussKronrod15::get();
  const double half = 0.5 * (b - a);
  double sum = 0.0;
  for (int k = 0; k < 15; ++k) {
    const double v = f(half * (rule.nodes[k] + 1.0) + a);
    if (!std::isfinite(v)) throw EvaluationError("integrate_gk15: non-finite integrand");
    sum += rule.weights[k] * v;
  }
  return half * sum;
}

// K-point Gauss-Hermite rule for the weight exp(-x^2).
struct HermiteRule {
  int order = 0;
  std::vector<double> nodes;
  std::vector<double> weights;
};

// Supported orders are 3, 5, 7 and 9; rules are computed once and cached.
const HermiteRule& hermite_rule(int order);

// Uncached rule of any order in [1, 200], for integrals outside the
// likelihood (e.g. over a normal covariate).
HermiteRule compute_hermite_rule(int order);

// Tensor-product quadrature for a bivariate random-effect integral,
// recentred at a posterior mode and scaled by the posterior curvature.
//
// `weights` are pi^{-1} |rho^{-1}| w_{r1} w_{r2}: the weights of the
// adapted Gaussian N(mode, curvature^{-1}) scaled by |rho^{-1}|.
// `log_integration_weights` additionally undo the Gaussian kernel, so that
// sum_r exp(log_integration_weights[r]) f(nodes[r]) approximates the plain
// integral of f over R^2.
struct SubjectQuadrature {
  std::vector<Eigen::Vector2d> nodes;
  std::vector<double> weights;
  std::vector<double> log_integration_weights;

  std::size_t size() const { return nodes.size(); }
};

SubjectQuadrature pseudo_adaptive_nodes(const Eigen::Vector2d& mode,
                                        const Eigen::Matrix2d& curvature,
                                        const HermiteRule& rule);

// Nodes/weights for E[f(b)], b ~ N(0, cov), by standard Gauss-Hermite after
// the change of variables b = sqrt(2) L u with cov = L L^T.
struct GaussianExpectationRule {
  std::vector<Eigen::Vector2d> nodes;
  std::vector<double> weights;  // sum to 1
};

GaussianExpectationRule gaussian_expectation_rule(const Eigen::Matrix2d& cov,
                                                  const HermiteRule& rule);

}  // namespace smartjm
