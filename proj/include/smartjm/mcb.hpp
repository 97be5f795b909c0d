#pragma once

// Multiple comparisons with the best: Monte Carlo multiplicity cutoffs and
// the confidence set of regimens indistinguishable from the best.

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

namespace smartjm {

// Contrast variances at or below this are treated as ties.
inline constexpr double kDegenerateContrastVariance = 1e-12;

// sqrt(cov(g,g) + cov(h,h) - 2 cov(g,h)); throws EstimationError when the
// contrast variance is degenerate.
double pairwise_se(const Eigen::MatrixXd& cov, int g, int h);

// Nearest-rank (1 - zeta) quantile of max_{h != g} (xi_h - xi_g) / se_gh over
// n_mc draws xi ~ N(0, cov) generated from `seed`.
double mcb_cutoff(const Eigen::MatrixXd& cov, int g, double zeta, int n_mc, std::uint64_t seed);

struct McbResult {
  Eigen::VectorXd q_hat;
  Eigen::MatrixXd cov;
  Eigen::VectorXd cutoff;
  Eigen::VectorXd margin;
  std::vector<bool> in_best_set;

  int best_set_size() const;
};

// margin_g = cutoff_g - max_{h != g} (q_h - q_g) / se_gh; g is in the best
// set when margin_g >= 0. One set of draws is shared by every g.
McbResult mcb_best_set(const Eigen::VectorXd& q_hat, const Eigen::MatrixXd& cov, double zeta,
                       int n_mc, std::uint64_t seed);

}  // namespace smartjm
