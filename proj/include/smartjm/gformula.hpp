#pragma once

// Plug-in parametric g-formula for regimen-specific survival and restricted
// mean survival time. Public times are in weeks.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "smartjm/estimation.hpp"
#include "smartjm/model.hpp"

namespace smartjm {

enum class EstimandKind { Survival, Rmst };

struct Estimand {
  EstimandKind kind = EstimandKind::Rmst;
  double horizon = 16.0;  // weeks

  std::string label() const;  // "S(16)", "RMST(24)"
  bool operator==(const Estimand&) const = default;
};

Estimand parse_estimand(std::string_view s);

// RMST(16), RMST(24), S(16), S(24).
std::vector<Estimand> default_estimands();

// Baseline covariate distribution to standardize over: points and weights
// summing to one.
struct Standardization {
  std::vector<std::vector<double>> x0;
  std::vector<double> weights;

  static Standardization empirical(const std::vector<SubjectRecord>& data);
  static Standardization uniform(std::vector<std::vector<double>> x0);
  std::size_t size() const { return x0.size(); }
};

struct GFormulaOptions {
  int marginal_order = 3;  // Gauss-Hermite nodes per random-effect dimension
  int grid_size = 100;     // RMST trapezoid points on [0, horizon]
};

// Phi((m(0) - m(tau) - c) / (sqrt(2) sigma_eps)) under the stage-1 treatment of g.
double response_probability(std::span<const double> x0, const RandomEffects& b,
                            const Theta& theta, const Dtr& g, const DesignConfig& cfg);

// Times and horizons below are in weeks.
double regimen_conditional_survival(double t, std::span<const double> x0, const RandomEffects& b,
                                    const Theta& theta, const Dtr& g, const DesignConfig& cfg);

double marginal_survival(double t, const std::vector<std::vector<double>>& baselines,
                         const Theta& theta, const Dtr& g, const DesignConfig& cfg,
                         int marginal_order = 3);

double marginal_rmst(double t_star, const std::vector<std::vector<double>>& baselines,
                     const Theta& theta, const Dtr& g, const DesignConfig& cfg,
                     int grid_size = 100, int marginal_order = 3);

// Marginal survival curves of every regimen on a uniform grid of
// `grid_size` points over [0, horizon].
struct SurvivalCurves {
  std::vector<double> times;  // weeks
  Eigen::MatrixXd survival;   // grid point x regimen
};

SurvivalCurves marginal_curves(double horizon, const Standardization& baselines,
                               const Theta& theta, const std::vector<Dtr>& regimens,
                               const DesignConfig& cfg, const GFormulaOptions& opts = {});

// All estimands for all regimens in one pass: rows follow `estimands`,
// columns follow `regimens`.
Eigen::MatrixXd regimen_values(const Theta& theta, const Standardization& baselines,
                               const std::vector<Dtr>& regimens,
                               const std::vector<Estimand>& estimands, const DesignConfig& cfg,
                               const GFormulaOptions& opts = {}, int threads = 1);

struct RegimenValueTable {
  std::vector<Dtr> regimens;
  std::vector<Estimand> estimands;
  Eigen::MatrixXd values;            // estimand x regimen
  Eigen::MatrixXd se;                // estimand x regimen
  std::vector<Eigen::MatrixXd> cov;  // per estimand, regimen x regimen
  int redraws = 0;
};

// Draws working-scale parameters from N(fit.working, fit.vcov_working),
// recomputes all regimen values per draw and returns the plug-in values with
// the sample covariance of the draws. Invalid draws are redrawn, at most
// 10 attempts per draw.
RegimenValueTable propagate_uncertainty(const FitResult& fit, const std::vector<Dtr>& regimens,
                                        const std::vector<Estimand>& estimands,
                                        const Standardization& baselines,
                                        const DesignConfig& cfg, int n_draws, std::uint64_t seed,
                                        const GFormulaOptions& opts = {}, int threads = 1);

// Sample covariance of rows of `draws` (n x M), symmetrized.
Eigen::MatrixXd sample_covariance(const Eigen::MatrixXd& draws);

}  // namespace smartjm
