#pragma once

// Simulated two-stage SMART trials from the joint model.

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "smartjm/model.hpp"
#include "smartjm/survival.hpp"

namespace smartjm {

struct DgmTruth {
  Theta theta = reference_truth();
  double censor_rate = 0.15;  // exponential censoring, per model time unit
  double p_x01 = 0.6;         // X01 ~ Bernoulli(p_x01), X02 ~ N(0, 1)

  void validate() const;
};

// Cumulative hazard over [a, b] (model clock) by composite Simpson with 24
// subintervals. The hazard at t = 0 is taken as its limit, so kappa < 1 is
// rejected when a = 0.
double simpson_cumulative_hazard(double a, double b, const HazardContext& ctx);

// Solves H(T) - H(a) = E for T in (a, b] by bisection to 1e-10, with H
// evaluated by simpson_cumulative_hazard. Absent when H(b) - H(a) < E.
std::optional<double> invert_cumulative_hazard(double E, const HazardContext& ctx, double a,
                                               double b);

SubjectRecord simulate_subject(std::mt19937_64& rng, const DgmTruth& truth,
                               const DesignConfig& cfg, int id = 0);

// Subject i draws from its own stream derive_seed(seed, i), so the dataset
// does not depend on the thread count.
std::vector<SubjectRecord> simulate_trial(std::uint64_t seed, int n, const DgmTruth& truth,
                                          const DesignConfig& cfg, int threads = 1);

}  // namespace smartjm
