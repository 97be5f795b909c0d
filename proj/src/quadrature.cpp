#include "smartjm/quadrature.hpp"

#include <algorithm>
#include <numbers>

namespace smartjm {

const GaussKronrod15& GaussKronrod15::get() {
  // Abscissae and weights of the positive half of the standard rule.
  static const GaussKronrod15 rule = [] {
    constexpr std::array<double, 8> x = {
        0.00000000000000000000000000000000000e+00,
        2.07784955007898467600689403773244913e-01,
        4.05845151377397166906606412076961463e-01,
        5.86087235467691130294144838258729598e-01,
        7.41531185599394439863864773280788407e-01,
        8.64864423359769072789712788640926201e-01,
        9.49107912342758524526189684047851262e-01,
        9.91455371120812639206854697526328517e-01,
    };
    constexpr std::array<double, 8> w = {
        2.09482141084727828012999174891714264e-01,
        2.04432940075298892414161999234649085e-01,
        1.90350578064785409913256402421013683e-01,
        1.69004726639267902826583426598550284e-01,
        1.40653259715525918745189590510237920e-01,
        1.04790010322250183839876322541518017e-01,
        6.30920926299785532907006631892042867e-02,
        2.29353220105292249637320080589695920e-02,
    };
    GaussKronrod15 r{};
    for (int k = 0; k < 7; ++k) {
      r.nodes[k] = -x[7 - k];
      r.weights[k] = w[7 - k];
      r.nodes[14 - k] = x[7 - k];
      r.weights[14 - k] = w[7 - k];
    }
    r.nodes[7] = x[0];
    r.weights[7] = w[0];
    return r;
  }();
  return rule;
}

namespace {

// Golub-Welsch: eigenvalues of the symmetric Jacobi matrix of the
// physicists' Hermite recurrence are the nodes; weights are sqrt(pi) times
// the squared first eigenvector components.
HermiteRule golub_welsch(int order) {
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(order, order);
  for (int i = 1; i < order; ++i) {
    const double off = std::sqrt(0.5 * i);
    jacobi(i, i - 1) = off;
    jacobi(i - 1, i) = off;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi);
  HermiteRule rule;
  rule.order = order;
  rule.nodes.resize(order);
  rule.weights.resize(order);
  const double sqrt_pi = std::sqrt(std::numbers::pi);
  for (int k = 0; k < order; ++k) {
    rule.nodes[k] = eig.eigenvalues()[k];
    const double v0 = eig.eigenvectors()(0, k);
    rule.weights[k] = sqrt_pi * v0 * v0;
  }
  // Exact symmetry: average mirrored pairs.
  for (int k = 0; k < order / 2; ++k) {
    const int j = order - 1 - k;
    const double x = 0.5 * (rule.nodes[j] - rule.nodes[k]);
    const double w = 0.5 * (rule.weights[j] + rule.weights[k]);
    rule.nodes[k] = -x;
    rule.nodes[j] = x;
    rule.weights[k] = w;
    rule.weights[j] = w;
  }
  if (order % 2 == 1) rule.nodes[order / 2] = 0.0;
  return rule;
}

}  // namespace

HermiteRule compute_hermite_rule(int order) {
  if (order < 1 || order > 200) {
    throw ConfigError("compute_hermite_rule: order must lie in [1, 200]");
  }
  return golub_welsch(order);
}

const HermiteRule& hermite_rule(int order) {
  static const std::array<HermiteRule, 4> cache = {golub_welsch(3), golub_welsch(5),
                                                   golub_welsch(7), golub_welsch(9)};
  switch (order) {
    case 3: return cache[0];
    case 5: return cache[1];
    case 7: return cache[2];
    case 9: return cache[3];
    default: break;
  }
  throw ConfigError("hermite_rule: unsupported order " + std::to_string(order) +
                    " (supported: 3, 5, 7, 9)");
}

SubjectQuadrature pseudo_adaptive_nodes(const Eigen::Vector2d& mode,
                                        const Eigen::Matrix2d& curvature,
                                        const HermiteRule& rule) {
  if ((curvature - curvature.transpose()).cwiseAbs().maxCoeff() >
      1e-10 * std::max(1.0, curvature.cwiseAbs().maxCoeff())) {
    throw DecompositionError("pseudo_adaptive_nodes: curvature is not symmetric");
  }
  Eigen::LLT<Eigen::Matrix2d> llt(curvature);
  if (llt.info() != Eigen::Success) {
    throw DecompositionError("pseudo_adaptive_nodes: curvature is not positive definite");
  }
  // curvature = L L^T. With rho = L^T, rho^T rho = curvature and the
  // displacement sqrt(2) rho^{-1} phi turns (b - mode)^T curvature (b - mode)
  // into 2 |phi|^2.
  const Eigen::Matrix2d lower = llt.matrixL();
  const Eigen::Matrix2d rho_inv = lower.transpose().inverse();
  const double det_rho_inv = 1.0 / (lower(0, 0) * lower(1, 1));
  const double log_det_rho_inv = std::log(det_rho_inv);
  const double inv_pi = 1.0 / std::numbers::pi;
  const double log_two_pi = std::log(2.0 * std::numbers::pi);

  SubjectQuadrature q;
  const int k = rule.order;
  q.nodes.reserve(k * k);
  q.weights.reserve(k * k);
  q.log_integration_weights.reserve(k * k);
  for (int r1 = 0; r1 < k; ++r1) {
    for (int r2 = 0; r2 < k; ++r2) {
      const Eigen::Vector2d phi(rule.nodes[r1], rule.nodes[r2]);
      const double w = rule.weights[r1] * rule.weights[r2];
      q.nodes.push_back(mode + std::sqrt(2.0) * rho_inv * phi);
      q.weights.push_back(inv_pi * det_rho_inv * w);
      q.log_integration_weights.push_back(std::log(inv_pi * w) + log_det_rho_inv +
                                          log_two_pi + phi.squaredNorm());
    }
  }
  return q;
}

GaussianExpectationRule gaussian_expectation_rule(const Eigen::Matrix2d& cov,
                                                  const HermiteRule& rule) {
  Eigen::Matrix2d lower = Eigen::Matrix2d::Zero();
  // Positive semidefinite covariances (including the zero matrix) are allowed.
  const double a = cov(0, 0);
  const double c = cov(1, 1);
  if (a < 0 || c < 0) throw DecompositionError("gaussian_expectation_rule: negative variance");
  if (a > 0) {
    lower(0, 0) = std::sqrt(a);
    lower(1, 0) = cov(1, 0) / lower(0, 0);
    lower(1, 1) = std::sqrt(std::max(0.0, c - lower(1, 0) * lower(1, 0)));
  } else {
    lower(1, 1) = std::sqrt(c);
  }
  GaussianExpectationRule out;
  const int k = rule.order;
  const double inv_pi = 1.0 / std::numbers::pi;
  for (int r1 = 0; r1 < k; ++r1) {
    for (int r2 = 0; r2 < k; ++r2) {
      const Eigen::Vector2d u(rule.nodes[r1], rule.nodes[r2]);
      out.nodes.push_back(std::sqrt(2.0) * lower * u);
      out.weights.push_back(inv_pi * rule.weights[r1] * rule.weights[r2]);
    }
  }
  return out;
}

}  // namespace smartjm
