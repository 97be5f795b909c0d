#pragma once

// Limited-memory BFGS for box-constrained minimization.
//
// Iterations restrict the two-loop quasi-Newton direction to the variables
// that are not held at a bound, then backtrack along the projected path
// P(x + a d) until an Armijo decrease holds. Convergence is declared when
// the projected gradient P(x - g) - x has infinity norm below the tolerance.

#include <functional>
#include <string>

#include <Eigen/Dense>

namespace smartjm {

struct BoxBounds {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
};

struct LbfgsbOptions {
  int memory = 10;
  int max_iterations = 500;
  double pg_tolerance = 1e-3;
  // Relative objective reduction treated as stagnation.
  double f_tolerance = 1e-14;
  int max_line_search = 40;
};

struct LbfgsbResult {
  Eigen::VectorXd x;
  double f = 0.0;
  Eigen::VectorXd gradient;
  double projected_grad_norm = 0.0;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  std::string message;
};

// Objective returns f(x) and writes the gradient into `grad`.
using ObjectiveWithGradient = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd& grad)>;

Eigen::VectorXd project(const Eigen::VectorXd& x, const BoxBounds& bounds);

// Infinity norm of P(x - g) - x.
double projected_gradient_norm(const Eigen::VectorXd& x, const Eigen::VectorXd& g,
                               const BoxBounds& bounds);

LbfgsbResult minimize_lbfgsb(const ObjectiveWithGradient& objective, Eigen::VectorXd x0,
                             const BoxBounds& bounds, const LbfgsbOptions& opts = {});

}  // namespace smartjm
