#include "smartjm/mcb.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "smartjm/errors.hpp"

namespace smartjm {

namespace {

void check_inputs(const Eigen::MatrixXd& cov, double zeta, int n_mc) {
  SMARTJM_REQUIRE(cov.rows() == cov.cols() && cov.rows() >= 1, "mcb: covariance must be square");
  SMARTJM_REQUIRE((cov - cov.transpose()).cwiseAbs().maxCoeff() <=
                      1e-10 * std::max(1.0, cov.cwiseAbs().maxCoeff()),
                  "mcb: covariance must be symmetric");
  SMARTJM_REQUIRE(zeta > 0.0 && zeta < 1.0, "mcb: zeta must lie in (0, 1)");
  SMARTJM_REQUIRE(n_mc >= 1000, "mcb: n_mc must be at least 1000");
}

double contrast_variance(const Eigen::MatrixXd& cov, int g, int h) {
  return cov(g, g) + cov(h, h) - 2.0 * cov(g, h);
}

// se_gh, or 0 for a degenerate pair.
Eigen::MatrixXd contrast_se(const Eigen::MatrixXd& cov) {
  const int M = static_cast<int>(cov.rows());
  Eigen::MatrixXd se = Eigen::MatrixXd::Zero(M, M);
  for (int g = 0; g < M; ++g) {
    for (int h = 0; h < M; ++h) {
      const double v = contrast_variance(cov, g, h);
      if (g != h && v > kDegenerateContrastVariance) se(g, h) = std::sqrt(v);
    }
  }
  return se;
}

Eigen::MatrixXd draw_normals(const Eigen::MatrixXd& cov, int n_mc, std::uint64_t seed) {
  const int M = static_cast<int>(cov.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (cov + cov.transpose()));
  const Eigen::MatrixXd root =
      es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd z(M, n_mc);
  for (int d = 0; d < n_mc; ++d) {
    for (int k = 0; k < M; ++k) z(k, d) = normal(rng);
  }
  return root * z;  // column d is one draw
}

double max_standardized_gap(const Eigen::VectorXd& x, const Eigen::MatrixXd& se, int g) {
  double best = -std::numeric_limits<double>::infinity();
  for (int h = 0; h < x.size(); ++h) {
    if (h == g) continue;
    const double gap = se(g, h) > 0.0 ? (x[h] - x[g]) / se(g, h) : 0.0;
    best = std::max(best, gap);
  }
  return best;
}

double cutoff_from_draws(const Eigen::MatrixXd& xi, const Eigen::MatrixXd& se, int g,
                         double zeta) {
  if (xi.rows() == 1) return 0.0;
  const int n = static_cast<int>(xi.cols());
  std::vector<double> stat(n);
  for (int d = 0; d < n; ++d) stat[d] = max_standardized_gap(xi.col(d), se, g);
  const int rank = std::clamp(static_cast<int>(std::ceil((1.0 - zeta) * n)), 1, n);
  std::nth_element(stat.begin(), stat.begin() + (rank - 1), stat.end());
  return stat[rank - 1];
}

}  // namespace

double pairwise_se(const Eigen::MatrixXd& cov, int g, int h) {
  SMARTJM_REQUIRE(g >= 0 && h >= 0 && g < cov.rows() && h < cov.rows(),
                  "pairwise_se: index out of range");
  const double v = contrast_variance(cov, g, h);
  if (!(v > kDegenerateContrastVariance)) {
    throw EstimationError("pairwise_se: contrast variance is not positive");
  }
  return std::sqrt(v);
}

double mcb_cutoff(const Eigen::MatrixXd& cov, int g, double zeta, int n_mc, std::uint64_t seed) {
  check_inputs(cov, zeta, n_mc);
  SMARTJM_REQUIRE(g >= 0 && g < cov.rows(), "mcb_cutoff: index out of range");
  return cutoff_from_draws(draw_normals(cov, n_mc, seed), contrast_se(cov), g, zeta);
}

int McbResult::best_set_size() const {
  return static_cast<int>(std::count(in_best_set.begin(), in_best_set.end(), true));
}

McbResult mcb_best_set(const Eigen::VectorXd& q_hat, const Eigen::MatrixXd& cov, double zeta,
                       int n_mc, std::uint64_t seed) {
  check_inputs(cov, zeta, n_mc);
  SMARTJM_REQUIRE(q_hat.size() == cov.rows(), "mcb_best_set: dimension mismatch");
  const int M = static_cast<int>(q_hat.size());
  McbResult out;
  out.q_hat = q_hat;
  out.cov = cov;
  out.cutoff = Eigen::VectorXd::Zero(M);
  out.margin = Eigen::VectorXd::Zero(M);
  out.in_best_set.assign(M, true);
  if (M == 1) return out;
  const Eigen::MatrixXd se = contrast_se(cov);
  const Eigen::MatrixXd xi = draw_normals(cov, n_mc, seed);
  for (int g = 0; g < M; ++g) {
    out.cutoff[g] = cutoff_from_draws(xi, se, g, zeta);
    out.margin[g] = out.cutoff[g] - max_standardized_gap(q_hat, se, g);
    out.in_best_set[g] = out.margin[g] >= 0.0;
  }
  return out;
}

}  // namespace smartjm
