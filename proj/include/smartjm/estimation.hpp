#pragma once

// Joint longitudinal-survival likelihood integrated over the random effects
// by pseudo-adaptive Gauss-Hermite quadrature, its analytic score, and the
// maximum-likelihood fit.

#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "smartjm/longitudinal.hpp"
#include "smartjm/model.hpp"
#include "smartjm/optimizer.hpp"
#include "smartjm/quadrature.hpp"
#include "smartjm/survival.hpp"

namespace smartjm {

// Unconstrained parameterization: identity for regression coefficients and
// alpha, log for sigma_b0, sigma_b1, sigma_eps, lambda0, kappa, atanh for rho.
// Vectors use the flat ParamLayout ordering.
Eigen::VectorXd to_working(const Theta& theta);
Theta from_working(const Eigen::VectorXd& w, const ParamLayout& layout);
// d natural / d working, elementwise (the transforms act coordinatewise).
Eigen::VectorXd natural_jacobian(const Eigen::VectorXd& w, const ParamLayout& layout);
BoxBounds working_bounds(const ParamLayout& layout);

// log f(y | b) + log f(T, delta | b) + log f(b; G) for one subject.
double complete_data_loglik(const SubjectRecord& s, const RandomEffects& b, const Theta& theta,
                            const DesignConfig& cfg);

// Quadrature plans centred at the LMM empirical Bayes posterior of each subject.
std::vector<SubjectQuadrature> build_plans(const std::vector<SubjectRecord>& data,
                                           const LmmFit& lmm, const DesignConfig& cfg,
                                           int order = 5);

// Precomputes everything about the data that does not depend on theta so
// repeated likelihood and score evaluations only touch the parameters.
class JointLikelihood {
 public:
  JointLikelihood(const std::vector<SubjectRecord>& data, const DesignConfig& cfg,
                  std::vector<SubjectQuadrature> plans, int threads = 1);
  ~JointLikelihood();
  JointLikelihood(JointLikelihood&&) noexcept;
  JointLikelihood& operator=(JointLikelihood&&) noexcept;

  std::size_t size() const;
  const ParamLayout& layout() const;

  double loglik(const Theta& theta) const;
  // Log-likelihood and its gradient with respect to the working parameters.
  double loglik_and_score(const Theta& theta, Eigen::VectorXd& score_working) const;
  std::vector<double> subject_logliks(const Theta& theta) const;
  // Normalized posterior weights over each subject's quadrature nodes.
  std::vector<std::vector<double>> posterior_weights(const Theta& theta) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

double observed_loglik(const std::vector<SubjectRecord>& data, const Theta& theta,
                       const std::vector<SubjectQuadrature>& plans, const DesignConfig& cfg);

// Gradient on the working scale.
Eigen::VectorXd observed_score(const std::vector<SubjectRecord>& data, const Theta& theta,
                               const std::vector<SubjectQuadrature>& plans,
                               const DesignConfig& cfg);

struct InitialValues {
  Theta theta;
  LmmFit lmm;
};

// Longitudinal parameters from the LMM fit, hazard coefficients from a
// Weibull relative-risk fit with alpha = 0, (lambda0, kappa) from a log-log
// regression of a Breslow cumulative baseline hazard, alpha = 0.
// Throws FitError when there are no events.
InitialValues initialize_theta(const std::vector<SubjectRecord>& data, const DesignConfig& cfg,
                               int threads = 1);

struct Information {
  Eigen::MatrixXd vcov;          // natural scale
  Eigen::MatrixXd vcov_working;  // working scale
  Eigen::VectorXd se;            // natural scale
  bool pseudo_inverse = false;
};

// Central finite-difference Hessian of the log-likelihood on the working
// scale (differencing the analytic score), inverted and mapped to the
// natural scale by the delta method.
Information observed_information(const JointLikelihood& lik, const Theta& theta_hat);
Information observed_information(const std::vector<SubjectRecord>& data, const Theta& theta_hat,
                                 const std::vector<SubjectQuadrature>& plans,
                                 const DesignConfig& cfg);

struct FitOptions {
  int quadrature_order = 5;
  int max_iterations = 500;
  double pg_tolerance = 1e-3;
  double relative_tolerance = 1e-3;
  int memory = 10;
  int threads = 1;
  bool compute_vcov = true;
};

struct FitResult {
  Theta theta_hat;
  Eigen::VectorXd working;
  Eigen::MatrixXd vcov;
  Eigen::MatrixXd vcov_working;
  Eigen::VectorXd se;
  double loglik = 0.0;
  bool converged = false;
  double projected_grad_norm = 0.0;
  int iterations = 0;
  bool pseudo_inverse = false;
  std::string message;
};

FitResult fit_joint_model(const std::vector<SubjectRecord>& data, const DesignConfig& cfg,
                          const FitOptions& opts = {});

}  // namespace smartjm
