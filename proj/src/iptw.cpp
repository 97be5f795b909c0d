#include "smartjm/iptw.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "smartjm/errors.hpp"
#include "smartjm/parallel.hpp"

namespace smartjm {

double iptw_weight(const SubjectRecord& s, const Dtr& g, const DesignConfig& cfg) {
  if (s.v1 != g.v1) return 0.0;
  if (!s.responder || *s.responder) return 1.0 / cfg.p1;
  return *s.v2 == g.v2_nonresponder ? 1.0 / (cfg.p1 * cfg.p2) : 0.0;
}

double SurvivalStepFunction::operator()(double t) const {
  const auto it = std::upper_bound(times.begin(), times.end(), t);
  if (it == times.begin()) return 1.0;
  return values[static_cast<std::size_t>(it - times.begin()) - 1];
}

SurvivalStepFunction weighted_km(const std::vector<double>& time, const std::vector<bool>& event,
                                 const std::vector<double>& weight) {
  SMARTJM_REQUIRE(time.size() == event.size() && time.size() == weight.size(),
                  "weighted_km: input lengths differ");
  double total = 0.0;
  for (double w : weight) {
    SMARTJM_REQUIRE(w >= 0.0, "weighted_km: weights must be nonnegative");
    total += w;
  }
  if (!(total > 0.0)) throw EstimationError("weighted_km: total weight is zero");

  std::vector<std::size_t> order(time.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return time[a] < time[b];
  });
  SurvivalStepFunction sf;
  double at_risk = total;
  double s = 1.0;
  std::size_t k = 0;
  while (k < order.size()) {
    const double t = time[order[k]];
    double deaths = 0.0, leaving = 0.0;
    for (; k < order.size() && time[order[k]] == t; ++k) {
      const double w = weight[order[k]];
      if (event[order[k]]) deaths += w;
      leaving += w;
    }
    if (deaths > 0.0) {
      s *= 1.0 - deaths / at_risk;
      sf.times.push_back(t);
      sf.values.push_back(s);
    }
    at_risk -= leaving;
  }
  return sf;
}

SurvivalStepFunction weighted_km(const std::vector<SubjectRecord>& data, const Dtr& g,
                                 const DesignConfig& cfg) {
  std::vector<double> time, weight;
  std::vector<bool> event;
  time.reserve(data.size());
  weight.reserve(data.size());
  event.reserve(data.size());
  for (const auto& s : data) {
    time.push_back(s.obs_time);
    event.push_back(s.event);
    weight.push_back(iptw_weight(s, g, cfg));
  }
  return weighted_km(time, event, weight);
}

double km_rmst(const SurvivalStepFunction& sf, double t_star) {
  SMARTJM_REQUIRE(t_star > 0.0, "km_rmst: t_star must be positive");
  double area = 0.0;
  double prev_t = 0.0;
  double prev_s = 1.0;
  for (std::size_t k = 0; k < sf.times.size() && sf.times[k] <= t_star; ++k) {
    area += prev_s * (sf.times[k] - prev_t);
    prev_t = sf.times[k];
    prev_s = sf.values[k];
  }
  return area + prev_s * (t_star - prev_t);
}

Eigen::MatrixXd iptw_values(const std::vector<SubjectRecord>& data,
                            const std::vector<Dtr>& regimens,
                            const std::vector<Estimand>& estimands, const DesignConfig& cfg) {
  Eigen::MatrixXd out(estimands.size(), regimens.size());
  for (std::size_t g = 0; g < regimens.size(); ++g) {
    const SurvivalStepFunction sf = weighted_km(data, regimens[g], cfg);
    for (std::size_t e = 0; e < estimands.size(); ++e) {
      out(e, g) = estimands[e].kind == EstimandKind::Survival ? sf(estimands[e].horizon)
                                                              : km_rmst(sf, estimands[e].horizon);
    }
  }
  return out;
}

BootstrapResult bootstrap_covariance(const std::vector<SubjectRecord>& data,
                                     const std::vector<Dtr>& regimens,
                                     const std::vector<Estimand>& estimands,
                                     const DesignConfig& cfg, int n_boot, std::uint64_t seed,
                                     int threads) {
  SMARTJM_REQUIRE(n_boot >= 2, "bootstrap_covariance: need at least two resamples");
  SMARTJM_REQUIRE(!data.empty(), "bootstrap_covariance: no subjects");
  BootstrapResult out;
  out.values = iptw_values(data, regimens, estimands, cfg);
  const std::size_t n = data.size();
  std::vector<Eigen::MatrixXd> reps(static_cast<std::size_t>(n_boot));
  std::vector<int> attempts(reps.size(), 0);
  constexpr int kMaxAttempts = 100;
  parallel_for(reps.size(), threads, [&](std::size_t b) {
    std::vector<SubjectRecord> sample(n);
    for (int k = 0; k < kMaxAttempts; ++k) {
      ++attempts[b];
      std::mt19937_64 rng(derive_seed(derive_seed(seed, b), static_cast<std::uint64_t>(k)));
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      for (std::size_t i = 0; i < n; ++i) sample[i] = data[pick(rng)];
      try {
        reps[b] = iptw_values(sample, regimens, estimands, cfg);
        return;
      } catch (const EstimationError&) {
      }
    }
    throw EstimationError("bootstrap_covariance: too many resamples without a compatible subject");
  });
  for (int a : attempts) out.dropped += a - 1;

  const std::size_t E = estimands.size();
  const std::size_t M = regimens.size();
  out.se = Eigen::MatrixXd::Zero(E, M);
  Eigen::MatrixXd block(n_boot, M);
  for (std::size_t e = 0; e < E; ++e) {
    for (int b = 0; b < n_boot; ++b) block.row(b) = reps[b].row(e);
    Eigen::MatrixXd cov = sample_covariance(block);
    Eigen::MatrixXd diag_blocks = cov;
    for (std::size_t i = 0; i < M; ++i) {
      for (std::size_t j = 0; j < M; ++j) {
        if (regimens[i].v1 != regimens[j].v1) diag_blocks(i, j) = 0.0;
      }
    }
    out.se.row(e) = cov.diagonal().cwiseMax(0.0).cwiseSqrt().transpose();
    out.cov.push_back(std::move(cov));
    out.block_cov.push_back(std::move(diag_blocks));
  }
  return out;
}

}  // namespace smartjm
