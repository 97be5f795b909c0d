#pragma once

// Linear mixed model with random intercept and slope.

#include <vector>

#include <Eigen/Dense>

#include "smartjm/model.hpp"

namespace smartjm {

// Per-subject response vector and design matrices on the model clock.
// Columns of X follow longitudinal_coefficients(); Z = [1, t].
struct LongitudinalDesign {
  Eigen::VectorXd y;
  Eigen::VectorXd t;
  Eigen::MatrixXd X;
  Eigen::MatrixXd Z;
};

LongitudinalDesign longitudinal_design(const SubjectRecord& s, const DesignConfig& cfg);

// log f(y | b) for y | b ~ N(X beta + Z b, sigma^2 I).
double lmm_conditional_logdensity(const Eigen::VectorXd& y, const Eigen::MatrixXd& X,
                                  const Eigen::MatrixXd& Z, const Eigen::Vector2d& b,
                                  const Eigen::VectorXd& beta, double sigma_eps);

struct LmmFit {
  Eigen::VectorXd beta;
  double sigma_eps = 1.0;
  Eigen::Matrix2d G = Eigen::Matrix2d::Identity();
  double loglik = 0.0;
  bool converged = false;
  int iterations = 0;
  double projected_grad_norm = 0.0;
};

struct LmmOptions {
  int max_iterations = 1000;
  double pg_tolerance = 1e-6;
  int threads = 1;
};

// Sum over subjects of log N(y_i; X_i beta, Z_i G Z_i^T + sigma^2 I).
double lmm_marginal_loglik(const std::vector<LongitudinalDesign>& designs,
                           const Eigen::VectorXd& beta, double sigma_eps,
                           const Eigen::Matrix2d& G, int threads = 1);

// Maximum likelihood (not REML) fit on the working scale
// (beta, log sigma_eps, log sigma_b0, log sigma_b1, atanh rho).
// Throws FitError when the optimizer does not converge.
LmmFit fit_lmm(const std::vector<SubjectRecord>& data, const DesignConfig& cfg,
               const LmmOptions& opts = {});
LmmFit fit_lmm(const std::vector<LongitudinalDesign>& designs, const LmmOptions& opts = {});

// Gaussian posterior of b given y under the LMM: mode and negative Hessian.
struct EbEstimate {
  Eigen::Vector2d mode;
  Eigen::Matrix2d curvature;
};

EbEstimate empirical_bayes(const SubjectRecord& s, const LmmFit& fit, const DesignConfig& cfg);
EbEstimate empirical_bayes(const LongitudinalDesign& d, const LmmFit& fit);

// G from (sigma_b0, sigma_b1, rho).
Eigen::Matrix2d random_effects_cov(double sigma_b0, double sigma_b1, double rho);

}  // namespace smartjm
