#include "smartjm/gformula.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "smartjm/errors.hpp"
#include "smartjm/parallel.hpp"
#include "smartjm/quadrature.hpp"
#include "smartjm/survival.hpp"

namespace smartjm {

std::string Estimand::label() const {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s(%g)", kind == EstimandKind::Survival ? "S" : "RMST", horizon);
  return buf;
}

Estimand parse_estimand(std::string_view s) {
  const auto open = s.find('(');
  const auto close = s.rfind(')');
  if (open == std::string_view::npos || close == std::string_view::npos || close < open + 2) {
    throw PreconditionError("cannot parse estimand '" + std::string(s) + "'");
  }
  const std::string head(s.substr(0, open));
  Estimand e;
  if (head == "S") {
    e.kind = EstimandKind::Survival;
  } else if (head == "RMST" || head == "Psi") {
    e.kind = EstimandKind::Rmst;
  } else {
    throw PreconditionError("unknown estimand kind '" + head + "'");
  }
  const std::string num(s.substr(open + 1, close - open - 1));
  std::size_t used = 0;
  try {
    e.horizon = std::stod(num, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != num.size() || !(e.horizon > 0.0)) {
    throw PreconditionError("invalid estimand horizon in '" + std::string(s) + "'");
  }
  return e;
}

std::vector<Estimand> default_estimands() {
  return {{EstimandKind::Rmst, 16.0},
          {EstimandKind::Rmst, 24.0},
          {EstimandKind::Survival, 16.0},
          {EstimandKind::Survival, 24.0}};
}

Standardization Standardization::empirical(const std::vector<SubjectRecord>& data) {
  std::vector<std::vector<double>> x;
  x.reserve(data.size());
  for (const auto& s : data) x.push_back(s.x0);
  return uniform(std::move(x));
}

Standardization Standardization::uniform(std::vector<std::vector<double>> x0) {
  SMARTJM_REQUIRE(!x0.empty(), "standardization set is empty");
  Standardization out;
  out.weights.assign(x0.size(), 1.0 / static_cast<double>(x0.size()));
  out.x0 = std::move(x0);
  return out;
}

namespace {

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

double response_probability_stage1(const PiecewiseLinear& m, double tau, double c,
                                   double sigma_eps) {
  const double drop = -m.pre.slope * tau;  // m(0) - m(tau)
  return normal_cdf((drop - c) / (std::sqrt(2.0) * sigma_eps));
}

}  // namespace

double response_probability(std::span<const double> x0, const RandomEffects& b,
                            const Theta& theta, const Dtr& g, const DesignConfig& cfg) {
  const PiecewiseLinear m = trajectory_pieces(x0, b, g.v1, std::nullopt, theta, cfg);
  return response_probability_stage1(m, cfg.tau_model(), cfg.c, theta.sigma_eps);
}

double regimen_conditional_survival(double t, std::span<const double> x0, const RandomEffects& b,
                                    const Theta& theta, const Dtr& g, const DesignConfig& cfg) {
  SMARTJM_REQUIRE(t >= 0.0, "regimen_conditional_survival: t must be nonnegative");
  const double tm = cfg.to_model(t);
  const double p = response_probability(x0, b, theta, g, cfg);
  const HazardContext resp{x0, b, g.v1, g.v2_responder, theta, cfg};
  const HazardContext nonresp{x0, b, g.v1, g.v2_nonresponder, theta, cfg};
  return p * survival_probability(tm, resp) + (1.0 - p) * survival_probability(tm, nonresp);
}

double marginal_survival(double t, const std::vector<std::vector<double>>& baselines,
                         const Theta& theta, const Dtr& g, const DesignConfig& cfg,
                         int marginal_order) {
  SMARTJM_REQUIRE(!baselines.empty(), "marginal_survival: no baseline covariates");
  const GaussianExpectationRule rule =
      gaussian_expectation_rule(theta.random_effects_cov(), hermite_rule(marginal_order));
  CompensatedSum total;
  for (const auto& x : baselines) {
    for (std::size_t r = 0; r < rule.nodes.size(); ++r) {
      const RandomEffects b{rule.nodes[r][0], rule.nodes[r][1]};
      total.add(rule.weights[r] * regimen_conditional_survival(t, x, b, theta, g, cfg));
    }
  }
  return total.value() / static_cast<double>(baselines.size());
}

double marginal_rmst(double t_star, const std::vector<std::vector<double>>& baselines,
                     const Theta& theta, const Dtr& g, const DesignConfig& cfg, int grid_size,
                     int marginal_order) {
  SMARTJM_REQUIRE(grid_size >= 2, "marginal_rmst: grid_size must be at least 2");
  SMARTJM_REQUIRE(t_star > 0.0, "marginal_rmst: t_star must be positive");
  const double dt = t_star / (grid_size - 1);
  double area = 0.0;
  double prev = 1.0;
  for (int j = 1; j < grid_size; ++j) {
    const double s = marginal_survival(j * dt, baselines, theta, g, cfg, marginal_order);
    area += 0.5 * (prev + s) * dt;
    prev = s;
  }
  return area;
}

namespace {

// Weighted marginal survival of each regimen on a grid per horizon.
std::vector<Eigen::MatrixXd> accumulate_curves(const Theta& theta,
                                               const Standardization& baselines,
                                               const std::vector<Dtr>& regimens,
                                               const std::vector<double>& horizons,
                                               const DesignConfig& cfg,
                                               const GFormulaOptions& opts, int threads) {
  SMARTJM_REQUIRE(!regimens.empty(), "g-formula: no regimens");
  SMARTJM_REQUIRE(baselines.size() > 0 && baselines.weights.size() == baselines.size(),
                  "g-formula: malformed standardization set");
  SMARTJM_REQUIRE(opts.grid_size >= 2, "g-formula: grid_size must be at least 2");
  for (double h : horizons) {
    SMARTJM_REQUIRE(h > 0.0 && h <= cfg.t_max, "g-formula: horizon must lie in (0, t_max]");
  }
  for (const auto& g : regimens) {
    SMARTJM_REQUIRE(g.v2_responder == g.v1, "g-formula: responders must continue v1");
  }
  const double tau = cfg.tau_model();
  std::vector<CumulativeHazardGrid> grids;
  for (double h : horizons) {
    std::vector<double> t(opts.grid_size);
    const double tm = cfg.to_model(h);
    for (int j = 0; j < opts.grid_size; ++j) {
      t[j] = j == opts.grid_size - 1 ? tm : tm * j / (opts.grid_size - 1);
    }
    grids.emplace_back(std::move(t), tau, theta.lambda0, theta.kappa);
  }
  const GaussianExpectationRule rule =
      gaussian_expectation_rule(theta.random_effects_cov(), hermite_rule(opts.marginal_order));

  // Distinct stage-1 treatments and, per stage-1 treatment, the stage-2
  // sequences the regimens need.
  struct Branch {
    Treatment v1;
    std::vector<Treatment> v2s;
    std::vector<std::pair<int, int>> uses;  // (regimen, nonresponder v2 slot)
    int responder_slot = 0;
  };
  std::vector<Branch> branches;
  for (std::size_t gi = 0; gi < regimens.size(); ++gi) {
    const Dtr& g = regimens[gi];
    auto it = std::find_if(branches.begin(), branches.end(),
                           [&](const Branch& b) { return b.v1 == g.v1; });
    if (it == branches.end()) {
      branches.push_back(Branch{g.v1, {g.v1}, {}, 0});
      it = branches.end() - 1;
    }
    auto slot = std::find(it->v2s.begin(), it->v2s.end(), g.v2_nonresponder);
    if (slot == it->v2s.end()) {
      it->v2s.push_back(g.v2_nonresponder);
      slot = it->v2s.end() - 1;
    }
    it->uses.emplace_back(static_cast<int>(gi), static_cast<int>(slot - it->v2s.begin()));
  }

  const std::size_t nh = horizons.size();
  const std::size_t M = regimens.size();
  const int G = opts.grid_size;
  const std::size_t n = baselines.size();
  const int workers = static_cast<int>(std::min<std::size_t>(std::max(1, threads), n));
  std::vector<std::vector<Eigen::MatrixXd>> partial(
      workers, std::vector<Eigen::MatrixXd>(nh, Eigen::MatrixXd::Zero(G, M)));

  parallel_for(static_cast<std::size_t>(workers), workers, [&](std::size_t w) {
    std::vector<Eigen::MatrixXd>& acc = partial[w];
    std::vector<std::vector<Eigen::VectorXd>> surv;  // [v2 slot][horizon]
    std::vector<double> H(G);
    for (std::size_t i = w; i < n; i += workers) {
      const auto& x = baselines.x0[i];
      for (std::size_t r = 0; r < rule.nodes.size(); ++r) {
        const double wt = baselines.weights[i] * rule.weights[r];
        if (wt == 0.0) continue;
        const RandomEffects b{rule.nodes[r][0], rule.nodes[r][1]};
        for (const Branch& br : branches) {
          const PiecewiseLinear m = trajectory_pieces(x, b, br.v1, std::nullopt, theta, cfg);
          const double p = response_probability_stage1(m, tau, cfg.c, theta.sigma_eps);
          surv.assign(br.v2s.size(), std::vector<Eigen::VectorXd>(nh));
          for (std::size_t k = 0; k < br.v2s.size(); ++k) {
            const PiecewiseLinear eta = predictor_pieces(x, b, br.v1, br.v2s[k], theta, cfg);
            for (std::size_t h = 0; h < nh; ++h) {
              grids[h].evaluate(eta, H);
              Eigen::VectorXd s(G);
              for (int j = 0; j < G; ++j) s[j] = std::exp(-H[j]);
              surv[k][h] = std::move(s);
            }
          }
          for (const auto& [gi, slot] : br.uses) {
            for (std::size_t h = 0; h < nh; ++h) {
              acc[h].col(gi) +=
                  wt * (p * surv[br.responder_slot][h] + (1.0 - p) * surv[slot][h]);
            }
          }
        }
      }
    }
  });
  std::vector<Eigen::MatrixXd> out(nh, Eigen::MatrixXd::Zero(G, M));
  for (const auto& part : partial) {
    for (std::size_t h = 0; h < nh; ++h) out[h] += part[h];
  }
  return out;
}

}  // namespace

SurvivalCurves marginal_curves(double horizon, const Standardization& baselines,
                               const Theta& theta, const std::vector<Dtr>& regimens,
                               const DesignConfig& cfg, const GFormulaOptions& opts) {
  SurvivalCurves out;
  out.survival = accumulate_curves(theta, baselines, regimens, {horizon}, cfg, opts, 1).front();
  out.times.resize(opts.grid_size);
  for (int j = 0; j < opts.grid_size; ++j) {
    out.times[j] = horizon * j / (opts.grid_size - 1);
  }
  return out;
}

Eigen::MatrixXd regimen_values(const Theta& theta, const Standardization& baselines,
                               const std::vector<Dtr>& regimens,
                               const std::vector<Estimand>& estimands, const DesignConfig& cfg,
                               const GFormulaOptions& opts, int threads) {
  SMARTJM_REQUIRE(!estimands.empty(), "regimen_values: no estimands");
  std::vector<double> horizons;
  for (const auto& e : estimands) {
    if (std::find(horizons.begin(), horizons.end(), e.horizon) == horizons.end()) {
      horizons.push_back(e.horizon);
    }
  }
  const std::vector<Eigen::MatrixXd> curves =
      accumulate_curves(theta, baselines, regimens, horizons, cfg, opts, threads);
  Eigen::MatrixXd out(estimands.size(), regimens.size());
  const int G = opts.grid_size;
  for (std::size_t e = 0; e < estimands.size(); ++e) {
    const auto h = std::find(horizons.begin(), horizons.end(), estimands[e].horizon) -
                   horizons.begin();
    const Eigen::MatrixXd& c = curves[h];
    if (estimands[e].kind == EstimandKind::Survival) {
      out.row(e) = c.row(G - 1);
    } else {
      const double dt = estimands[e].horizon / (G - 1);
      out.row(e) = dt * (c.colwise().sum() - 0.5 * (c.row(0) + c.row(G - 1)));
    }
  }
  return out;
}

Eigen::MatrixXd sample_covariance(const Eigen::MatrixXd& draws) {
  SMARTJM_REQUIRE(draws.rows() >= 2, "sample_covariance: need at least two draws");
  const Eigen::RowVectorXd mean = draws.colwise().mean();
  const Eigen::MatrixXd centred = draws.rowwise() - mean;
  Eigen::MatrixXd cov = centred.transpose() * centred / static_cast<double>(draws.rows() - 1);
  return 0.5 * (cov + cov.transpose());
}

RegimenValueTable propagate_uncertainty(const FitResult& fit, const std::vector<Dtr>& regimens,
                                        const std::vector<Estimand>& estimands,
                                        const Standardization& baselines,
                                        const DesignConfig& cfg, int n_draws, std::uint64_t seed,
                                        const GFormulaOptions& opts, int threads) {
  SMARTJM_REQUIRE(n_draws >= 2, "propagate_uncertainty: need at least two draws");
  const ParamLayout lay = ParamLayout::of(fit.theta_hat);
  const int p = lay.size();
  SMARTJM_REQUIRE(fit.working.size() == p && fit.vcov_working.rows() == p &&
                      fit.vcov_working.cols() == p,
                  "propagate_uncertainty: fit has no working-scale covariance");

  // Square root of the (possibly singular) covariance.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(
      0.5 * (fit.vcov_working + fit.vcov_working.transpose()));
  const Eigen::MatrixXd root =
      es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();

  RegimenValueTable table;
  table.regimens = regimens;
  table.estimands = estimands;
  table.values = regimen_values(fit.theta_hat, baselines, regimens, estimands, cfg, opts, threads);

  const std::size_t E = estimands.size();
  const std::size_t M = regimens.size();
  std::vector<Eigen::MatrixXd> draws(static_cast<std::size_t>(n_draws));
  std::vector<int> attempts(static_cast<std::size_t>(n_draws), 0);
  constexpr int kMaxAttempts = 10;
  parallel_for(draws.size(), threads, [&](std::size_t d) {
    for (int k = 0; k < kMaxAttempts; ++k) {
      ++attempts[d];
      std::mt19937_64 rng(derive_seed(derive_seed(seed, d), static_cast<std::uint64_t>(k)));
      std::normal_distribution<double> normal(0.0, 1.0);
      Eigen::VectorXd z(p);
      for (int j = 0; j < p; ++j) z[j] = normal(rng);
      const Eigen::VectorXd w = fit.working + root * z;
      if (!w.allFinite()) continue;
      try {
        const Theta th = from_working(w, lay);
        th.validate();
        Eigen::MatrixXd v = regimen_values(th, baselines, regimens, estimands, cfg, opts, 1);
        if (!v.allFinite()) continue;
        draws[d] = std::move(v);
        return;
      } catch (const EvaluationError&) {
      } catch (const PreconditionError&) {
      } catch (const DecompositionError&) {
      }
    }
    throw EstimationError("propagate_uncertainty: too many invalid parameter draws");
  });
  for (int a : attempts) table.redraws += a - 1;

  table.se = Eigen::MatrixXd::Zero(E, M);
  table.cov.assign(E, Eigen::MatrixXd::Zero(M, M));
  Eigen::MatrixXd block(n_draws, M);
  for (std::size_t e = 0; e < E; ++e) {
    for (int d = 0; d < n_draws; ++d) block.row(d) = draws[d].row(e);
    table.cov[e] = sample_covariance(block);
    table.se.row(e) = table.cov[e].diagonal().cwiseMax(0.0).cwiseSqrt().transpose();
  }
  return table;
}

}  // namespace smartjm
