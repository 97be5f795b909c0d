#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"

#include "smartjm/errors.hpp"
#include "smartjm/estimation.hpp"
#include "smartjm/simgen.hpp"

using namespace smartjm;

namespace {

double bivariate_normal_logpdf(const RandomEffects& b, const Eigen::Matrix2d& G) {
  const Eigen::Vector2d v(b[0], b[1]);
  return -std::log(2.0 * std::numbers::pi) - 0.5 * std::log(G.determinant()) -
         0.5 * v.dot(G.inverse() * v);
}

LmmFit lmm_at(const Theta& theta) {
  LmmFit lmm;
  lmm.beta = longitudinal_coefficients(theta);
  lmm.sigma_eps = theta.sigma_eps;
  lmm.G = theta.random_effects_cov();
  return lmm;
}

std::vector<SubjectRecord> trial(int n, std::uint64_t seed, double alpha = 0.2) {
  DgmTruth truth;
  truth.theta.alpha = alpha;
  return simulate_trial(seed, n, truth, DesignConfig{});
}

double survival_term(const SubjectRecord& s, const RandomEffects& b, const Theta& theta,
                     const DesignConfig& cfg) {
  const HazardContext ctx{s.x0, b, s.v1, s.v2, theta, cfg};
  return survival_logdensity(cfg.to_model(s.obs_time), s.event, ctx);
}

// Published N=1200 Monte Carlo standard errors in flat layout order.
constexpr std::array<double, 21> kMcse1200{0.0250, 0.0303, 0.0150, 0.0299, 0.0359, 0.0376,
                                           0.0380, 0.0123, 0.0103, 0.0481, 0.0029, 0.0378,
                                           0.0987, 0.0922, 0.0697, 0.1269, 0.2286, 0.2208,
                                           0.1926, 0.1796, 0.0817};

}  // namespace

TEST_SUITE("estimation") {
  TEST_CASE("complete-data log-likelihood is the sum of its three factors") {
    const DesignConfig cfg;
    const Theta theta = reference_truth();
    const auto data = trial(20, 5);
    const RandomEffects b{0.3, -0.1};
    for (const auto& s : data) {
      const LongitudinalDesign d = longitudinal_design(s, cfg);
      const double expected =
          lmm_conditional_logdensity(d.y, d.X, d.Z, Eigen::Vector2d(b[0], b[1]),
                                     longitudinal_coefficients(theta), theta.sigma_eps) +
          survival_term(s, b, theta, cfg) + bivariate_normal_logpdf(b, theta.random_effects_cov());
      CHECK(complete_data_loglik(s, b, theta, cfg) == doctest::Approx(expected).epsilon(1e-12));
    }
  }

  TEST_CASE("random-effects density at the origin with identity covariance") {
    const DesignConfig cfg;
    Theta theta = reference_truth();
    theta.sigma_b0 = 1.0;
    theta.sigma_b1 = 1.0;
    theta.rho = 0.0;
    const auto data = trial(1, 9);
    const SubjectRecord& s = data[0];
    const RandomEffects b{0.0, 0.0};
    const LongitudinalDesign d = longitudinal_design(s, cfg);
    const double rest = lmm_conditional_logdensity(d.y, d.X, d.Z, Eigen::Vector2d::Zero(),
                                                   longitudinal_coefficients(theta),
                                                   theta.sigma_eps) +
                        survival_term(s, b, theta, cfg);
    CHECK(complete_data_loglik(s, b, theta, cfg) - rest ==
          doctest::Approx(-std::log(2.0 * std::numbers::pi)).epsilon(1e-12));
  }

  TEST_CASE("with no association the likelihood separates into LMM and survival parts") {
    const DesignConfig cfg;
    Theta theta = reference_truth();
    theta.alpha = 0.0;
    const auto data = trial(150, 11, 0.0);
    const auto plans = build_plans(data, lmm_at(theta), cfg, 5);
    double surv = 0.0;
    std::vector<LongitudinalDesign> designs;
    for (const auto& s : data) {
      surv += survival_term(s, {0.0, 0.0}, theta, cfg);
      designs.push_back(longitudinal_design(s, cfg));
    }
    const double lmm = lmm_marginal_loglik(designs, longitudinal_coefficients(theta),
                                           theta.sigma_eps, theta.random_effects_cov());
    const double ll = observed_loglik(data, theta, plans, cfg);
    CHECK(std::abs(ll - (lmm + surv)) <= 1e-8 * std::abs(ll));
  }

  TEST_CASE("duplicating every subject doubles the log-likelihood") {
    const DesignConfig cfg;
    const Theta theta = reference_truth();
    const auto data = trial(60, 13);
    auto doubled = data;
    doubled.insert(doubled.end(), data.begin(), data.end());
    const LmmFit lmm = lmm_at(theta);
    const double once = observed_loglik(data, theta, build_plans(data, lmm, cfg), cfg);
    const double twice = observed_loglik(doubled, theta, build_plans(doubled, lmm, cfg), cfg);
    CHECK(twice == doctest::Approx(2.0 * once).epsilon(1e-12));
  }

  TEST_CASE("truth is more likely than a shifted intercept") {
    const DesignConfig cfg;
    const Theta theta = reference_truth();
    const auto data = trial(300, 17);
    const auto plans = build_plans(data, lmm_at(theta), cfg);
    Theta shifted = theta;
    shifted.beta0 += 1.0;
    CHECK(observed_loglik(data, theta, plans, cfg) > observed_loglik(data, shifted, plans, cfg));
  }

  TEST_CASE("likelihood is invariant to subject order") {
    const DesignConfig cfg;
    const Theta theta = reference_truth();
    auto data = trial(80, 19);
    const LmmFit lmm = lmm_at(theta);
    const double a = observed_loglik(data, theta, build_plans(data, lmm, cfg), cfg);
    std::mt19937_64 rng(4);
    std::shuffle(data.begin(), data.end(), rng);
    const double b = observed_loglik(data, theta, build_plans(data, lmm, cfg), cfg);
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
    for (auto& s : data) s.id += 1000;
    const double c = observed_loglik(data, theta, build_plans(data, lmm, cfg), cfg);
    CHECK(c == b);
    CHECK(observed_loglik(data, theta, build_plans(data, lmm, cfg), cfg) == c);
  }

  TEST_CASE("analytic score matches central differences") {
    const DesignConfig cfg;
    const auto data = trial(60, 23);
    const Theta truth = reference_truth();
    const ParamLayout layout = ParamLayout::of(truth);
    const JointLikelihood lik(data, cfg, build_plans(data, lmm_at(truth), cfg));
    std::mt19937_64 rng(8);
    std::normal_distribution<double> z(0.0, 0.1);
    for (int rep = 0; rep < 3; ++rep) {
      Eigen::VectorXd w = to_working(truth);
      for (int j = 0; j < w.size(); ++j) w[j] += z(rng);
      Eigen::VectorXd score;
      lik.loglik_and_score(from_working(w, layout), score);
      for (int j = 0; j < w.size(); ++j) {
        const double h = 1e-5 * std::max(1.0, std::abs(w[j]));
        Eigen::VectorXd wp = w, wm = w;
        wp[j] += h;
        wm[j] -= h;
        const double fd = (lik.loglik(from_working(wp, layout)) -
                           lik.loglik(from_working(wm, layout))) / (2.0 * h);
        CAPTURE(j);
        CHECK(std::abs(score[j] - fd) <= 1e-4 * std::max(1.0, std::abs(fd)));
      }
    }
  }

  TEST_CASE("posterior weights sum to one") {
    const DesignConfig cfg;
    const Theta theta = reference_truth();
    const auto data = trial(40, 29);
    const JointLikelihood lik(data, cfg, build_plans(data, lmm_at(theta), cfg));
    for (const auto& w : lik.posterior_weights(theta)) {
      double total = 0.0;
      for (double x : w) {
        CHECK(x >= 0.0);
        total += x;
      }
      CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }
  }

  TEST_CASE("association score at zero is the posterior mean of the survival residual") {
    const DesignConfig cfg;
    Theta theta = reference_truth();
    theta.alpha = 0.0;
    const auto data = trial(50, 31);
    const auto plans = build_plans(data, lmm_at(theta), cfg);
    const JointLikelihood lik(data, cfg, plans);
    const auto omega = lik.posterior_weights(theta);
    double expected = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const SubjectRecord& s = data[i];
      const double T = cfg.to_model(s.obs_time);
      for (std::size_t r = 0; r < plans[i].size(); ++r) {
        const RandomEffects b{plans[i].nodes[r][0], plans[i].nodes[r][1]};
        const HazardContext ctx{s.x0, b, s.v1, s.v2, theta, cfg};
        auto mh = [&](double u) {
          return latent_trajectory(u, s.x0, b, s.v1, s.v2, theta, cfg) * hazard(u, ctx);
        };
        double integral = integrate_gk15(mh, 0.0, std::min(T, cfg.tau_model()));
        if (T > cfg.tau_model()) integral += integrate_gk15(mh, cfg.tau_model(), T);
        const double at_T =
            s.event ? latent_trajectory(T, s.x0, b, s.v1, s.v2, theta, cfg) : 0.0;
        expected += omega[i][r] * (at_T - integral);
      }
    }
    Eigen::VectorXd score;
    lik.loglik_and_score(theta, score);
    CHECK(score[ParamLayout::of(theta).alpha()] ==
          doctest::Approx(expected).epsilon(1e-8));
  }

  TEST_CASE("initial values") {
    const DesignConfig cfg;
    const auto data = trial(600, 37);
    const InitialValues init = initialize_theta(data, cfg);
    CHECK(init.theta.alpha == 0.0);
    CHECK(longitudinal_coefficients(init.theta).isApprox(init.lmm.beta, 1e-15));
    CHECK(init.theta.sigma_eps == doctest::Approx(init.lmm.sigma_eps).epsilon(1e-15));
    CHECK(init.theta.random_effects_cov().isApprox(init.lmm.G, 1e-12));
  }

  TEST_CASE("initial shape is near one for exponential event times") {
    const DesignConfig cfg;
    DgmTruth truth;
    truth.theta.kappa = 1.0;
    truth.theta.lambda0 = 0.8;
    truth.theta.alpha = 0.0;
    const auto data = simulate_trial(41, 600, truth, cfg);
    const InitialValues init = initialize_theta(data, cfg);
    CHECK(init.theta.kappa >= 0.7);
    CHECK(init.theta.kappa <= 1.3);
  }

  TEST_CASE("initialization without events throws") {
    const DesignConfig cfg;
    auto data = trial(50, 43);
    for (auto& s : data) s.event = false;
    CHECK_THROWS_AS(initialize_theta(data, cfg), FitError);
  }

  TEST_CASE("working transforms round-trip and the delta method scales standard errors") {
    const Theta theta = reference_truth();
    const ParamLayout layout = ParamLayout::of(theta);
    const Eigen::VectorXd w = to_working(theta);
    CHECK(flatten(from_working(w, layout)).isApprox(flatten(theta), 1e-14));
    const Eigen::VectorXd jac = natural_jacobian(w, layout);
    CHECK(jac[layout.sigma_eps()] == doctest::Approx(theta.sigma_eps).epsilon(1e-14));
    CHECK(jac[layout.kappa()] == doctest::Approx(theta.kappa).epsilon(1e-14));
    CHECK(jac[layout.rho()] == doctest::Approx(1.0 - theta.rho * theta.rho).epsilon(1e-14));
    CHECK(jac[layout.alpha()] == 1.0);

    const DesignConfig cfg;
    const auto data = trial(200, 47);
    const Information info =
        observed_information(data, theta, build_plans(data, lmm_at(theta), cfg), cfg);
    for (int j : {layout.sigma_eps(), layout.sigma_b0(), layout.lambda0(), layout.kappa()}) {
      const double se_log = std::sqrt(info.vcov_working(j, j));
      CHECK(info.se[j] == doctest::Approx(flatten(theta)[j] * se_log).epsilon(1e-12));
    }
    CHECK(info.vcov.isApprox(info.vcov.transpose(), 1e-12));
  }

  TEST_CASE("fit recovers the generating parameters at N=1200") {
    const DesignConfig cfg;
    const auto data = trial(1200, 53);
    const FitResult fit = fit_joint_model(data, cfg);
    REQUIRE(fit.converged);
    CHECK(fit.projected_grad_norm < 1e-3);
    const Eigen::VectorXd truth = flatten(reference_truth());
    const Eigen::VectorXd est = flatten(fit.theta_hat);
    const auto names = ParamLayout::of(reference_truth()).names(cfg.coding);
    for (int j = 0; j < truth.size(); ++j) {
      CAPTURE(names[j]);
      CHECK(std::abs(est[j] - truth[j]) <= 4.0 * kMcse1200[j]);
      CHECK(fit.se[j] > 0.25 * kMcse1200[j]);
      CHECK(fit.se[j] < 4.0 * kMcse1200[j]);
    }
  }

  TEST_CASE("association interval covers zero under the null") {
    const DesignConfig cfg;
    const int reps = 40;
    int covered = 0;
    int converged = 0;
    for (int r = 0; r < reps; ++r) {
      const auto data = trial(300, 1000 + r, 0.0);
      const FitResult fit = fit_joint_model(data, cfg);
      if (fit.converged) ++converged;
      const int a = ParamLayout::of(fit.theta_hat).alpha();
      if (std::abs(fit.theta_hat.alpha) <= 1.959963984540054 * fit.se[a]) ++covered;
    }
    CHECK(covered >= 34);
    CHECK(converged == reps);
  }

  TEST_CASE("fit is invariant to subject order") {
    const DesignConfig cfg;
    auto data = trial(300, 59);
    FitOptions opts;
    opts.compute_vcov = false;
    const FitResult a = fit_joint_model(data, cfg, opts);
    std::mt19937_64 rng(6);
    std::shuffle(data.begin(), data.end(), rng);
    const FitResult b = fit_joint_model(data, cfg, opts);
    CHECK(a.loglik == doctest::Approx(b.loglik).epsilon(1e-9));
    CHECK((flatten(a.theta_hat) - flatten(b.theta_hat)).cwiseAbs().maxCoeff() < 1e-3);
  }
}
