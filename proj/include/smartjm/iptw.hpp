#pragma once

// Inverse-probability-of-treatment-weighted Kaplan-Meier estimation of
// regimen-specific survival with known randomization probabilities.
// Times are in weeks.

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "smartjm/gformula.hpp"
#include "smartjm/model.hpp"

namespace smartjm {

// 0 when the observed path is incompatible with g, 1/p1 when v1 matches and
// the subject is a responder or left follow-up before tau, 1/(p1 p2) for a
// nonresponder whose v1 and v2 both match.
double iptw_weight(const SubjectRecord& s, const Dtr& g, const DesignConfig& cfg);

// Right-continuous step function equal to 1 before times.front().
struct SurvivalStepFunction {
  std::vector<double> times;   // strictly increasing jump times
  std::vector<double> values;  // value from each jump time onwards

  double operator()(double t) const;
};

// Weighted product-limit estimator. Subjects censored at an event time stay
// in the risk set for that time. Throws EstimationError when the total
// weight is zero.
SurvivalStepFunction weighted_km(const std::vector<double>& time, const std::vector<bool>& event,
                                 const std::vector<double>& weight);
SurvivalStepFunction weighted_km(const std::vector<SubjectRecord>& data, const Dtr& g,
                                 const DesignConfig& cfg);

// Area under the step function on [0, t_star].
double km_rmst(const SurvivalStepFunction& sf, double t_star);

// All estimands for all regimens: rows follow `estimands`, columns `regimens`.
Eigen::MatrixXd iptw_values(const std::vector<SubjectRecord>& data,
                            const std::vector<Dtr>& regimens,
                            const std::vector<Estimand>& estimands, const DesignConfig& cfg);

struct BootstrapResult {
  Eigen::MatrixXd values;                  // point estimates on the original data
  std::vector<Eigen::MatrixXd> cov;        // per estimand, full regimen covariance
  std::vector<Eigen::MatrixXd> block_cov;  // cross-first-stage entries set to zero
  Eigen::MatrixXd se;                      // estimand x regimen
  int dropped = 0;                         // resamples redrawn for a zero-weight regimen
};

// Subject-level nonparametric bootstrap; resample b uses stream
// derive_seed(seed, b).
BootstrapResult bootstrap_covariance(const std::vector<SubjectRecord>& data,
                                     const std::vector<Dtr>& regimens,
                                     const std::vector<Estimand>& estimands,
                                     const DesignConfig& cfg, int n_boot, std::uint64_t seed,
                                     int threads = 1);

}  // namespace smartjm
