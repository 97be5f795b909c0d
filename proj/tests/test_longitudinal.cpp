#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"

#include "smartjm/longitudinal.hpp"
#include "smartjm/optimizer.hpp"
#include "smartjm/quadrature.hpp"
#include "smartjm/simgen.hpp"

using namespace smartjm;

namespace {

double normal_logpdf(double y, double mean, double sd) {
  const double z = (y - mean) / sd;
  return -0.5 * std::log(2.0 * std::numbers::pi) - std::log(sd) - 0.5 * z * z;
}

// Dense multivariate-normal log-density through a full LDLT.
double mvn_logpdf(const Eigen::VectorXd& y, const Eigen::VectorXd& mean, const Eigen::MatrixXd& V) {
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(V);
  const Eigen::VectorXd r = y - mean;
  const double logdet = ldlt.vectorD().array().log().sum();
  return -0.5 * (y.size() * std::log(2.0 * std::numbers::pi) + logdet + r.dot(ldlt.solve(r)));
}

std::vector<SubjectRecord> lmm_only_trial(int n, std::uint64_t seed) {
  DgmTruth truth;
  truth.theta.alpha = 0.0;
  return simulate_trial(seed, n, truth, DesignConfig{});
}

std::vector<LongitudinalDesign> designs_of(const std::vector<SubjectRecord>& data) {
  std::vector<LongitudinalDesign> out;
  for (const auto& s : data) out.push_back(longitudinal_design(s, DesignConfig{}));
  return out;
}

// Natural-scale parameters (beta, sigma_eps, sigma_b0, sigma_b1, rho).
double loglik_at(const std::vector<LongitudinalDesign>& d, const Eigen::VectorXd& p) {
  const int k = static_cast<int>(p.size()) - 4;
  return lmm_marginal_loglik(d, p.head(k), p[k],
                             random_effects_cov(p[k + 1], p[k + 2], p[k + 3]));
}

Eigen::VectorXd pack(const LmmFit& fit) {
  const int k = static_cast<int>(fit.beta.size());
  Eigen::VectorXd p(k + 4);
  p.head(k) = fit.beta;
  p[k] = fit.sigma_eps;
  p[k + 1] = std::sqrt(fit.G(0, 0));
  p[k + 2] = std::sqrt(fit.G(1, 1));
  p[k + 3] = fit.G(0, 1) / (p[k + 1] * p[k + 2]);
  return p;
}

}  // namespace

TEST_SUITE("longitudinal") {
  TEST_CASE("conditional density with zero residual") {
    Eigen::MatrixXd X(1, 2), Z(1, 2);
    X << 1.0, 0.5;
    Z << 1.0, 0.0;
    const Eigen::VectorXd beta = Eigen::Vector2d(2.0, -1.0);
    const Eigen::Vector2d b(0.3, 0.2);
    const Eigen::VectorXd y = X * beta + Z * b;
    CHECK(lmm_conditional_logdensity(y, X, Z, b, beta, 1.0) ==
          doctest::Approx(-0.5 * std::log(2.0 * std::numbers::pi)).epsilon(1e-15));
  }

  TEST_CASE("conditional density equals the sum of univariate normals") {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> z(0.0, 1.0);
    const int n = 9;
    Eigen::MatrixXd X(n, 3), Z(n, 2);
    Eigen::VectorXd y(n);
    for (int j = 0; j < n; ++j) {
      X.row(j) << 1.0, z(rng), 0.1 * j;
      Z.row(j) << 1.0, 0.1 * j;
      y[j] = z(rng);
    }
    const Eigen::VectorXd beta = Eigen::Vector3d(0.5, -0.2, 1.0);
    const Eigen::Vector2d b(0.1, -0.4);
    for (double sigma : {0.5, 1.0}) {
      double direct = 0.0;
      const Eigen::VectorXd mean = X * beta + Z * b;
      for (int j = 0; j < n; ++j) direct += normal_logpdf(y[j], mean[j], sigma);
      CHECK(lmm_conditional_logdensity(y, X, Z, b, beta, sigma) == doctest::Approx(direct).epsilon(1e-13));
    }
    // Doubling sigma: -n log 2 plus three quarters of the residual term.
    const Eigen::VectorXd r = y - X * beta - Z * b;
    const double rss = r.squaredNorm();
    const double at1 = lmm_conditional_logdensity(y, X, Z, b, beta, 1.0);
    const double at2 = lmm_conditional_logdensity(y, X, Z, b, beta, 2.0);
    CHECK(at2 - at1 == doctest::Approx(-n * std::log(2.0) + 0.375 * rss).epsilon(1e-12));
  }

  TEST_CASE("marginal likelihood matches a dense multivariate normal") {
    const auto data = lmm_only_trial(40, 8);
    const auto d = designs_of(data);
    const Theta th = reference_truth();
    const Eigen::VectorXd beta = longitudinal_coefficients(th);
    const Eigen::Matrix2d G = th.random_effects_cov();
    double oracle = 0.0;
    for (const auto& s : d) {
      const Eigen::MatrixXd V = s.Z * G * s.Z.transpose() +
                                th.sigma_eps * th.sigma_eps * Eigen::MatrixXd::Identity(s.y.size(), s.y.size());
      oracle += mvn_logpdf(s.y, s.X * beta, V);
    }
    const double v = lmm_marginal_loglik(d, beta, th.sigma_eps, G);
    CHECK(std::abs(v - oracle) / std::abs(oracle) <= 1e-8);
  }

  TEST_CASE("degenerate random effects reduce to independent errors") {
    const auto data = lmm_only_trial(20, 9);
    const auto d = designs_of(data);
    const Theta th = reference_truth();
    const Eigen::VectorXd beta = longitudinal_coefficients(th);
    const Eigen::Matrix2d G = random_effects_cov(1e-7, 1e-7, 0.0);
    double oracle = 0.0;
    for (const auto& s : d) {
      const Eigen::VectorXd mean = s.X * beta;
      for (Eigen::Index j = 0; j < s.y.size(); ++j) oracle += normal_logpdf(s.y[j], mean[j], th.sigma_eps);
    }
    CHECK(lmm_marginal_loglik(d, beta, th.sigma_eps, G) == doctest::Approx(oracle).epsilon(1e-10));
  }

  TEST_CASE("fit recovers the generating values at N=1200") {
    const auto data = lmm_only_trial(1200, 21);
    const auto d = designs_of(data);
    const LmmFit fit = fit_lmm(d);
    CHECK(fit.converged);
    const Eigen::VectorXd p = pack(fit);
    // Observed information by central differences on the natural scale.
    const int m = static_cast<int>(p.size());
    Eigen::MatrixXd H(m, m);
    for (int i = 0; i < m; ++i) {
      for (int j = i; j < m; ++j) {
        const double hi = 1e-4 * std::max(1.0, std::abs(p[i]));
        const double hj = 1e-4 * std::max(1.0, std::abs(p[j]));
        auto at = [&](double si, double sj) {
          Eigen::VectorXd q = p;
          q[i] += si * hi;
          q[j] += sj * hj;
          return loglik_at(d, q);
        };
        H(i, j) = H(j, i) = (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / (4 * hi * hj);
      }
    }
    const Eigen::VectorXd se = (-H).inverse().diagonal().cwiseSqrt();
    const Theta th = reference_truth();
    Eigen::VectorXd truth(m);
    truth << longitudinal_coefficients(th), th.sigma_eps, th.sigma_b0, th.sigma_b1, th.rho;
    for (int k = 0; k < m; ++k) {
      INFO("parameter " << k << " estimate " << p[k] << " truth " << truth[k] << " se " << se[k]);
      CHECK(std::abs(p[k] - truth[k]) <= 3.0 * se[k]);
    }
  }

  TEST_CASE("fitted likelihood is a local maximum on the working scale") {
    const auto d = designs_of(lmm_only_trial(300, 4));
    const LmmFit fit = fit_lmm(d);
    const Eigen::VectorXd p = pack(fit);
    const int k = static_cast<int>(fit.beta.size());
    const double best = loglik_at(d, p);
    CHECK(best == doctest::Approx(fit.loglik).epsilon(1e-10));
    for (int j = 0; j < p.size(); ++j) {
      for (double s : {-1e-3, 1e-3}) {
        Eigen::VectorXd q = p;
        if (j < k) q[j] += s;
        else if (j < k + 3) q[j] *= std::exp(s);
        else q[j] = std::tanh(std::atanh(q[j]) + s);
        CHECK(loglik_at(d, q) <= best + 1e-9);
      }
    }
  }

  TEST_CASE("fit does not depend on subject order") {
    auto data = lmm_only_trial(200, 6);
    const LmmFit a = fit_lmm(data, DesignConfig{});
    std::reverse(data.begin(), data.end());
    const LmmFit b = fit_lmm(data, DesignConfig{});
    CHECK(a.loglik == doctest::Approx(b.loglik).epsilon(1e-10));
    CHECK((a.beta - b.beta).cwiseAbs().maxCoeff() <= 1e-5);
  }

  TEST_CASE("fixed effects are the GLS solution at the fitted covariance") {
    const auto d = designs_of(lmm_only_trial(300, 12));
    const LmmFit fit = fit_lmm(d);
    const int k = static_cast<int>(fit.beta.size());
    Eigen::MatrixXd XtVX = Eigen::MatrixXd::Zero(k, k);
    Eigen::VectorXd XtVy = Eigen::VectorXd::Zero(k);
    for (const auto& s : d) {
      const Eigen::MatrixXd V = s.Z * fit.G * s.Z.transpose() +
                                fit.sigma_eps * fit.sigma_eps * Eigen::MatrixXd::Identity(s.y.size(), s.y.size());
      const Eigen::LLT<Eigen::MatrixXd> llt(V);
      XtVX += s.X.transpose() * llt.solve(s.X);
      XtVy += s.X.transpose() * llt.solve(s.y);
    }
    const Eigen::VectorXd gls = XtVX.ldlt().solve(XtVy);
    CHECK((gls - fit.beta).cwiseAbs().maxCoeff() <= 1e-6);
  }

  TEST_CASE("empirical Bayes with zero residual") {
    LongitudinalDesign d;
    d.t = Eigen::Vector3d(0.0, 0.1, 0.2);
    d.Z.resize(3, 2);
    d.Z << 1, 0, 1, 0.1, 1, 0.2;
    d.X.resize(3, 2);
    d.X << 1, 0, 1, 0.1, 1, 0.2;
    LmmFit fit;
    fit.beta = Eigen::Vector2d(3.0, -1.0);
    fit.sigma_eps = 0.5;
    fit.G = random_effects_cov(0.5, 0.2, -0.3);
    d.y = d.X * fit.beta;
    const EbEstimate eb = empirical_bayes(d, fit);
    CHECK(eb.mode.norm() <= 1e-14);
    const Eigen::Matrix2d expect = d.Z.transpose() * d.Z / 0.25 + fit.G.inverse();
    CHECK((eb.curvature - expect).cwiseAbs().maxCoeff() <= 1e-10);
  }

  TEST_CASE("empirical Bayes mode maximizes the log-posterior") {
    const auto data = lmm_only_trial(5, 30);
    LmmFit fit;
    const Theta th = reference_truth();
    fit.beta = longitudinal_coefficients(th);
    fit.sigma_eps = th.sigma_eps;
    fit.G = th.random_effects_cov();
    const Eigen::Matrix2d Ginv = fit.G.inverse();
    for (const auto& s : data) {
      const auto d = longitudinal_design(s, DesignConfig{});
      const EbEstimate eb = empirical_bayes(d, fit);
      auto objective = [&](const Eigen::VectorXd& b, Eigen::VectorXd& g) {
        const Eigen::VectorXd r = d.y - d.X * fit.beta - d.Z * b;
        g = -d.Z.transpose() * r / 0.25 + Ginv * b;
        return 0.5 * r.squaredNorm() / 0.25 + 0.5 * b.dot(Ginv * b);
      };
      BoxBounds box{Eigen::Vector2d::Constant(-50), Eigen::Vector2d::Constant(50)};
      LbfgsbOptions opts;
      opts.pg_tolerance = 1e-12;
      opts.max_iterations = 1000;
      const auto res = minimize_lbfgsb(objective, Eigen::Vector2d::Zero(), box, opts);
      CHECK((res.x - eb.mode).cwiseAbs().maxCoeff() <= 1e-6);
    }
  }

  TEST_CASE("empirical Bayes with a single baseline measurement") {
    LongitudinalDesign d;
    d.t = Eigen::VectorXd::Zero(1);
    d.Z = Eigen::RowVector2d(1.0, 0.0);
    d.X = Eigen::RowVector2d(1.0, 0.0);
    d.y = Eigen::VectorXd::Constant(1, 4.0);
    LmmFit fit;
    fit.beta = Eigen::Vector2d(3.0, 0.0);
    fit.sigma_eps = 0.5;
    fit.G = random_effects_cov(0.5, 0.2, -0.3);
    const EbEstimate eb = empirical_bayes(d, fit);
    // G^{-1} by hand for (s0, s1, r) = (0.5, 0.2, -0.3).
    const double det = 0.25 * 0.04 * (1 - 0.09);
    const double g00 = 0.04 / det, g11 = 0.25 / det, g01 = 0.3 * 0.1 / det;
    CHECK(eb.curvature(0, 0) == doctest::Approx(4.0 + g00).epsilon(1e-12));
    CHECK(eb.curvature(0, 1) == doctest::Approx(g01).epsilon(1e-12));
    CHECK(eb.curvature(1, 1) == doctest::Approx(g11).epsilon(1e-12));
    // Mode solves H b = Z^T r / sigma^2 with r = 1.
    const Eigen::Vector2d mode = eb.curvature.inverse() * Eigen::Vector2d(4.0, 0.0);
    CHECK((eb.mode - mode).cwiseAbs().maxCoeff() <= 1e-12);
  }

  TEST_CASE("pseudo-adaptive quadrature of the LMM posterior is exact") {
    const auto data = lmm_only_trial(30, 14);
    const Theta th = reference_truth();
    LmmFit fit;
    fit.beta = longitudinal_coefficients(th);
    fit.sigma_eps = th.sigma_eps;
    fit.G = th.random_effects_cov();
    const Eigen::Matrix2d Ginv = fit.G.inverse();
    const double log_norm = -std::log(2.0 * std::numbers::pi) - 0.5 * std::log(fit.G.determinant());
    for (const auto& s : data) {
      const auto d = longitudinal_design(s, DesignConfig{});
      const EbEstimate eb = empirical_bayes(d, fit);
      const auto q = pseudo_adaptive_nodes(eb.mode, eb.curvature, hermite_rule(5));
      double total = 0.0;
      for (std::size_t r = 0; r < q.size(); ++r) {
        const Eigen::Vector2d& b = q.nodes[r];
        total += std::exp(q.log_integration_weights[r] +
                          lmm_conditional_logdensity(d.y, d.X, d.Z, b, fit.beta, fit.sigma_eps) +
                          log_norm - 0.5 * b.dot(Ginv * b));
      }
      const double closed = lmm_marginal_loglik({d}, fit.beta, fit.sigma_eps, fit.G);
      CHECK(std::abs(std::log(total) - closed) <= 1e-8 * std::abs(closed));
    }
  }
}
