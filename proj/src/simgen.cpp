#include "smartjm/simgen.hpp"

#include <cmath>
#include <limits>

#include "smartjm/errors.hpp"
#include "smartjm/parallel.hpp"

namespace smartjm {

void DgmTruth::validate() const {
  theta.validate();
  if (!(censor_rate > 0.0)) throw ConfigError("truth: censor rate must be positive");
  if (!(p_x01 >= 0.0 && p_x01 <= 1.0)) throw ConfigError("truth: p_x01 must lie in [0,1]");
  if (theta.beta_x.size() != 2) throw ConfigError("truth: the generator uses two covariates");
}

namespace {

constexpr int kSimpsonIntervals = 24;

struct PathHazard {
  PiecewiseLinear eta;
  double lambda0;
  double kappa;

  double operator()(double t) const {
    const double e = eta(t);
    if (std::abs(e) > kMaxLinearPredictor) {
      throw EvaluationError("linear predictor outside the bounded domain (|eta| > 50)");
    }
    if (t <= 0.0) {
      if (kappa > 1.0) return 0.0;
      if (kappa == 1.0) return lambda0 * std::exp(e);
      throw PreconditionError("hazard is unbounded at t = 0 when kappa < 1");
    }
    return lambda0 * kappa * std::pow(t, kappa - 1.0) * std::exp(e);
  }

  double simpson(double a, double b) const {
    if (b <= a) return 0.0;
    const double h = (b - a) / kSimpsonIntervals;
    double s = (*this)(a) + (*this)(b);
    for (int k = 1; k < kSimpsonIntervals; ++k) {
      s += (k % 2 == 1 ? 4.0 : 2.0) * (*this)(a + k * h);
    }
    return s * h / 3.0;
  }

  std::optional<double> invert(double E, double a, double b) const {
    SMARTJM_REQUIRE(E > 0.0, "invert_cumulative_hazard: E must be positive");
    SMARTJM_REQUIRE(a < b, "invert_cumulative_hazard: require a < b");
    if (simpson(a, b) < E) return std::nullopt;
    double lo = a, hi = b;
    while (hi - lo > 1e-10) {
      const double mid = 0.5 * (lo + hi);
      if (simpson(a, mid) >= E) {
        hi = mid;
      } else {
        lo = mid;
      }
    }
    return 0.5 * (lo + hi);
  }
};

PathHazard path_hazard(const HazardContext& ctx) {
  return PathHazard{predictor_pieces(ctx.x0, ctx.b, ctx.v1, ctx.v2, ctx.theta, ctx.cfg),
                    ctx.theta.lambda0, ctx.theta.kappa};
}

}  // namespace

double simpson_cumulative_hazard(double a, double b, const HazardContext& ctx) {
  SMARTJM_REQUIRE(a >= 0.0 && a <= b, "simpson_cumulative_hazard: require 0 <= a <= b");
  return path_hazard(ctx).simpson(a, b);
}

std::optional<double> invert_cumulative_hazard(double E, const HazardContext& ctx, double a,
                                               double b) {
  return path_hazard(ctx).invert(E, a, b);
}

SubjectRecord simulate_subject(std::mt19937_64& rng, const DgmTruth& truth,
                               const DesignConfig& cfg, int id) {
  const Theta& th = truth.theta;
  const auto& coding = cfg.coding;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::exponential_distribution<double> unit_exp(1.0);

  SubjectRecord s;
  s.id = id;
  s.x0 = {unif(rng) < truth.p_x01 ? 1.0 : 0.0, normal(rng)};
  const double z0 = normal(rng);
  const double z1 = normal(rng);
  const RandomEffects b{th.sigma_b0 * z0,
                        th.sigma_b1 * (th.rho * z0 + std::sqrt(1.0 - th.rho * th.rho) * z1)};
  s.v1 = unif(rng) < cfg.p1 ? coding.stage1[0] : coding.stage1[1];
  const double E = unit_exp(rng);
  std::vector<double> noise(cfg.measurement_schedule.size());
  for (double& e : noise) e = th.sigma_eps * normal(rng);
  const double censor = unit_exp(rng) / truth.censor_rate;  // model clock
  const bool draw_c = unif(rng) < cfg.p2;

  const double tau = cfg.tau_model();
  const double t_max = cfg.to_model(cfg.t_max);
  auto observed = [&](std::size_t j, std::optional<Treatment> v2) {
    return latent_trajectory(cfg.to_model(cfg.measurement_schedule[j]), s.x0, b, s.v1, v2, th,
                             cfg) +
           noise[j];
  };

  const HazardContext stage1{s.x0, b, s.v1, std::nullopt, th, cfg};
  const PathHazard h1 = path_hazard(stage1);
  const std::optional<double> early = h1.invert(E, 0.0, tau);

  double event_time = std::numeric_limits<double>::infinity();
  if (early || censor < tau) {
    event_time = early.value_or(event_time);
  } else {
    std::size_t j0 = 0, jt = 0;
    for (std::size_t j = 0; j < cfg.measurement_schedule.size(); ++j) {
      if (cfg.measurement_schedule[j] == 0.0) j0 = j;
      if (std::abs(cfg.measurement_schedule[j] - cfg.tau) < 1e-12) jt = j;
    }
    const bool responder =
        response_indicator(observed(j0, std::nullopt), observed(jt, std::nullopt), cfg.c);
    s.responder = responder;
    s.v2 = responder ? s.v1 : (draw_c ? coding.stage2[0] : coding.stage2[1]);
    const HazardContext full{s.x0, b, s.v1, s.v2, th, cfg};
    const PathHazard h2 = path_hazard(full);
    const double remaining = E - h1.simpson(0.0, tau);
    if (const auto late = h2.invert(remaining, tau, t_max)) event_time = *late;
  }

  const double end = std::min({event_time, censor, t_max});
  s.event = event_time <= std::min(censor, t_max);
  s.obs_time = end >= t_max ? cfg.t_max : end / cfg.time_scale;
  for (std::size_t j = 0; j < cfg.measurement_schedule.size(); ++j) {
    const double tw = cfg.measurement_schedule[j];
    if (tw > s.obs_time) break;
    s.times.push_back(tw);
    s.values.push_back(observed(j, s.v2));
  }
  return s;
}

std::vector<SubjectRecord> simulate_trial(std::uint64_t seed, int n, const DgmTruth& truth,
                                          const DesignConfig& cfg, int threads) {
  SMARTJM_REQUIRE(n >= 1, "simulate_trial: N must be at least 1");
  truth.validate();
  cfg.validate();
  std::vector<SubjectRecord> out(static_cast<std::size_t>(n));
  parallel_for(out.size(), threads, [&](std::size_t i) {
    std::mt19937_64 rng(derive_seed(seed, i));
    out[i] = simulate_subject(rng, truth, cfg, static_cast<int>(i) + 1);
  });
  return out;
}

}  // namespace smartjm
