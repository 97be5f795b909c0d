#include "smartjm/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <mutex>
#include <numbers>
#include <random>

#include "smartjm/errors.hpp"
#include "smartjm/iptw.hpp"
#include "smartjm/parallel.hpp"
#include "smartjm/quadrature.hpp"

namespace smartjm {

TruthMethod parse_truth_method(std::string_view s) {
  if (s == "quadrature") return TruthMethod::Quadrature;
  if (s == "monte-carlo" || s == "mc") return TruthMethod::MonteCarlo;
  throw ConfigError("truth method must be 'quadrature' or 'monte-carlo', got '" +
                    std::string(s) + "'");
}

std::string_view to_string(TruthMethod m) {
  return m == TruthMethod::Quadrature ? "quadrature" : "monte-carlo";
}

namespace {

int index_of(const std::vector<Dtr>& regimens, const Dtr& g) {
  const auto it = std::find(regimens.begin(), regimens.end(), g);
  return it == regimens.end() ? -1 : static_cast<int>(it - regimens.begin());
}

int index_of(const std::vector<Estimand>& estimands, const Estimand& e) {
  const auto it = std::find(estimands.begin(), estimands.end(), e);
  return it == estimands.end() ? -1 : static_cast<int>(it - estimands.begin());
}

Standardization covariate_law(const DgmTruth& truth, const TruthOptions& opts) {
  Standardization out;
  if (opts.method == TruthMethod::MonteCarlo) {
    SMARTJM_REQUIRE(opts.draws >= 1, "truth: draws must be positive");
    std::mt19937_64 rng(opts.seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<std::vector<double>> x;
    x.reserve(opts.draws);
    for (int i = 0; i < opts.draws; ++i) {
      const double x01 = unif(rng) < truth.p_x01 ? 1.0 : 0.0;
      x.push_back({x01, normal(rng)});
    }
    return Standardization::uniform(std::move(x));
  }
  const HermiteRule rule = compute_hermite_rule(opts.covariate_order);
  const double inv_sqrt_pi = 1.0 / std::sqrt(std::numbers::pi);
  for (int level = 0; level < 2; ++level) {
    const double p = level == 1 ? truth.p_x01 : 1.0 - truth.p_x01;
    if (p == 0.0) continue;
    for (int k = 0; k < rule.order; ++k) {
      out.x0.push_back({static_cast<double>(level), std::sqrt(2.0) * rule.nodes[k]});
      out.weights.push_back(p * rule.weights[k] * inv_sqrt_pi);
    }
  }
  return out;
}

}  // namespace

double TruthTable::value(const Estimand& e, const Dtr& g) const {
  const int i = index_of(estimands, e);
  const int j = index_of(regimens, g);
  if (i < 0 || j < 0) {
    throw PreconditionError("truth table has no entry for " + e.label() + " " + g.label());
  }
  return values(i, j);
}

TruthTable compute_true_values(const DgmTruth& truth, const DesignConfig& cfg,
                               const std::vector<Estimand>& estimands, const TruthOptions& opts) {
  truth.validate();
  cfg.validate();
  TruthTable out;
  out.regimens = cfg.coding.embedded_regimens();
  out.estimands = estimands;
  GFormulaOptions go;
  go.marginal_order = opts.marginal_order;
  go.grid_size = opts.grid_size;
  out.values = regimen_values(truth.theta, covariate_law(truth, opts), out.regimens, estimands,
                              cfg, go, opts.threads);
  return out;
}

std::string Contrast::label() const {
  return estimand.label() + " " + first.label() + "-" + second.label();
}

std::vector<Contrast> default_contrasts() {
  return {{{EstimandKind::Rmst, 16.0},
           make_dtr(Treatment::A, Treatment::C),
           make_dtr(Treatment::A, Treatment::D)},
          {{EstimandKind::Survival, 24.0},
           make_dtr(Treatment::A, Treatment::D),
           make_dtr(Treatment::B, Treatment::C)}};
}

DesignConfig StudyConfig::design() const {
  DesignConfig cfg;
  cfg.measurement_schedule = schedule;
  return cfg;
}

std::vector<Estimand> StudyConfig::estimands() const {
  std::vector<Estimand> out;
  for (double h : horizons) out.push_back({EstimandKind::Rmst, h});
  for (double h : horizons) out.push_back({EstimandKind::Survival, h});
  return out;
}

std::vector<Contrast> StudyConfig::contrasts() const {
  const std::vector<Estimand> es = estimands();
  const std::vector<Dtr> regimens = design().coding.embedded_regimens();
  std::vector<Contrast> out;
  for (const auto& c : default_contrasts()) {
    if (index_of(es, c.estimand) >= 0 && index_of(regimens, c.first) >= 0 &&
        index_of(regimens, c.second) >= 0) {
      out.push_back(c);
    }
  }
  return out;
}

void StudyConfig::validate() const {
  if (n < 1 || replications < 1) throw ConfigError("study: n and replications must be >= 1");
  if (k_fit < 1 || k_marg < 1 || n_jm < 2 || n_boot < 2 || n_mc < 1000 || grid_rmst < 2 ||
      grid_truth < 2 || truth_draws < 1 || threads < 1) {
    throw ConfigError("study: counts out of range (n_jm, n_boot >= 2; n_mc >= 1000; grids >= 2)");
  }
  if (horizons.empty()) throw ConfigError("study: no horizons");
  const DesignConfig cfg = design();
  cfg.validate();
  for (double h : horizons) {
    if (!(h > 0.0 && h <= cfg.t_max)) throw ConfigError("study: horizons must lie in (0, t_max]");
  }
  if (!(zeta > 0.0 && zeta < 1.0)) throw ConfigError("study: zeta must lie in (0, 1)");
  truth.validate();
}

namespace {

void fill_contrasts(MethodRecord& m, const StudyConfig& study, const std::vector<Dtr>& regimens,
                    const std::vector<Estimand>& estimands) {
  const auto contrasts = study.contrasts();
  m.contrast.resize(contrasts.size());
  m.contrast_se.resize(contrasts.size());
  for (std::size_t c = 0; c < contrasts.size(); ++c) {
    const int e = index_of(estimands, contrasts[c].estimand);
    const int a = index_of(regimens, contrasts[c].first);
    const int b = index_of(regimens, contrasts[c].second);
    m.contrast[c] = m.values(e, a) - m.values(e, b);
    const Eigen::MatrixXd& cov = m.cov[e];
    m.contrast_se[c] = std::sqrt(std::max(0.0, cov(a, a) + cov(b, b) - 2.0 * cov(a, b)));
  }
}

}  // namespace

ReplicationRecord run_replication_with_seed(std::uint64_t seed, const StudyConfig& study) {
  const DesignConfig cfg = study.design();
  const std::vector<Dtr> regimens = cfg.coding.embedded_regimens();
  const std::vector<Estimand> estimands = study.estimands();
  ReplicationRecord rec;
  rec.seed = seed;
  const std::vector<SubjectRecord> data =
      simulate_trial(derive_seed(seed, 0), study.n, study.truth, cfg);

  FitOptions fo;
  fo.quadrature_order = study.k_fit;
  FitResult fit;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    fit = fit_joint_model(data, cfg, fo);
    rec.fit_ok = true;
  } catch (const Error& e) {
    rec.error = std::string("fit: ") + e.what();
  }
  rec.fit_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (rec.fit_ok) {
    rec.converged = fit.converged;
    rec.iterations = fit.iterations;
    rec.projected_grad_norm = fit.projected_grad_norm;
    rec.theta_hat = flatten(fit.theta_hat);
    rec.theta_se = fit.se;
  }
  if (study.fit_only) return rec;

  GFormulaOptions go;
  go.marginal_order = study.k_marg;
  go.grid_size = study.grid_rmst;
  if (rec.fit_ok) {
    try {
      const RegimenValueTable t =
          propagate_uncertainty(fit, regimens, estimands, Standardization::empirical(data), cfg,
                                study.n_jm, derive_seed(seed, 1), go);
      rec.jm.values = t.values;
      rec.jm.se = t.se;
      rec.jm.cov = t.cov;
      for (std::size_t e = 0; e < estimands.size(); ++e) {
        rec.jm.mcb.push_back(mcb_best_set(t.values.row(e).transpose(), t.cov[e], study.zeta,
                                          study.n_mc, derive_seed(seed, 10 + e)));
      }
      fill_contrasts(rec.jm, study, regimens, estimands);
      rec.jm.available = true;
    } catch (const Error& e) {
      rec.error += std::string(rec.error.empty() ? "" : "; ") + "g-formula: " + e.what();
    }
  }
  try {
    const BootstrapResult b = bootstrap_covariance(data, regimens, estimands, cfg, study.n_boot,
                                                   derive_seed(seed, 2));
    rec.iptw.values = b.values;
    rec.iptw.se = b.se;
    rec.iptw.cov = b.cov;
    for (std::size_t e = 0; e < estimands.size(); ++e) {
      rec.iptw.mcb.push_back(mcb_best_set(b.values.row(e).transpose(), b.block_cov[e],
                                          study.zeta, study.n_mc, derive_seed(seed, 100 + e)));
    }
    fill_contrasts(rec.iptw, study, regimens, estimands);
    rec.iptw.available = true;
  } catch (const Error& e) {
    rec.error += std::string(rec.error.empty() ? "" : "; ") + "iptw: " + e.what();
  }
  return rec;
}

ReplicationRecord run_replication(int index, const StudyConfig& study) {
  ReplicationRecord rec =
      run_replication_with_seed(derive_seed(study.seed, static_cast<std::uint64_t>(index)), study);
  rec.index = index;
  return rec;
}

std::vector<ReplicationRecord> run_study(
    const StudyConfig& study, const std::function<void(const ReplicationRecord&)>& progress) {
  study.validate();
  std::vector<ReplicationRecord> out(static_cast<std::size_t>(study.replications));
  std::mutex mu;
  parallel_for(out.size(), study.threads, [&](std::size_t r) {
    out[r] = run_replication(static_cast<int>(r), study);
    if (progress) {
      std::lock_guard<std::mutex> lock(mu);
      progress(out[r]);
    }
  });
  return out;
}

const MetricRow* StudyMetrics::find(std::string_view kind, std::string_view name,
                                    std::string_view regimen, std::string_view method) const {
  for (const auto& r : rows) {
    if (r.kind == kind && r.name == name && r.regimen == regimen && r.method == method) return &r;
  }
  return nullptr;
}

namespace {

// Estimates and their per-replication SEs for one quantity.
MetricRow summarize(const std::vector<double>& est, const std::vector<double>& se, double truth,
                    bool coverage_uses_aese) {
  MetricRow row;
  row.truth = truth;
  row.count = static_cast<int>(est.size());
  if (est.empty()) return row;
  const double n = static_cast<double>(est.size());
  CompensatedSum sum, sum_se, sq;
  for (std::size_t i = 0; i < est.size(); ++i) {
    sum.add(est[i]);
    sum_se.add(se[i]);
    sq.add((est[i] - truth) * (est[i] - truth));
  }
  row.mean = sum.value() / n;
  row.aese = sum_se.value() / n;
  row.rmse = std::sqrt(sq.value() / n);
  if (truth == 0.0) {
    row.rel_bias = row.mean - truth;
    row.rel_is_absolute = true;
  } else {
    row.rel_bias = (row.mean - truth) / truth * 100.0;
  }
  CompensatedSum dev;
  for (double e : est) dev.add((e - row.mean) * (e - row.mean));
  row.mcse = est.size() > 1 ? std::sqrt(dev.value() / (n - 1.0)) : 0.0;
  int covered = 0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    const double s = coverage_uses_aese ? row.aese : se[i];
    if (std::abs(est[i] - truth) <= 1.959963984540054 * s) ++covered;
  }
  row.coverage = 100.0 * covered / n;
  return row;
}

}  // namespace

StudyMetrics aggregate_metrics(const std::vector<ReplicationRecord>& records,
                               const TruthTable& truths, const StudyConfig& study) {
  SMARTJM_REQUIRE(records.size() >= 2, "aggregate_metrics: need at least two records");
  StudyMetrics out;
  out.replications = static_cast<int>(records.size());
  int converged = 0;
  for (const auto& r : records) converged += (r.fit_ok && r.converged) ? 1 : 0;
  out.convergence_rate = 100.0 * converged / static_cast<double>(records.size());

  const DesignConfig cfg = study.design();
  const Eigen::VectorXd theta_true = flatten(study.truth.theta);
  const ParamLayout lay = ParamLayout::of(study.truth.theta);
  const auto names = lay.names(cfg.coding);
  for (int k = 0; k < lay.size(); ++k) {
    std::vector<double> est, se;
    for (const auto& r : records) {
      if (!r.fit_ok || r.theta_se.size() != lay.size()) continue;
      est.push_back(r.theta_hat[k]);
      se.push_back(r.theta_se[k]);
    }
    MetricRow row = summarize(est, se, theta_true[k], study.coverage_uses_aese);
    row.kind = "parameter";
    row.name = names[k];
    row.method = "MLE";
    out.rows.push_back(std::move(row));
  }
  if (study.fit_only) return out;

  const std::vector<Estimand> estimands = study.estimands();
  const std::vector<Dtr>& regimens = truths.regimens;
  const int M = static_cast<int>(regimens.size());
  const char* method_names[2] = {"JM", "IPTW"};
  std::vector<std::vector<double>> mcse_by_method(2);
  for (int m = 0; m < 2; ++m) {
    auto method_of = [m](const ReplicationRecord& r) -> const MethodRecord& {
      return m == 0 ? r.jm : r.iptw;
    };
    for (std::size_t e = 0; e < estimands.size(); ++e) {
      std::vector<int> selected(M, 0), in_set(M, 0);
      double set_size = 0.0;
      int used = 0;
      for (const auto& r : records) {
        const MethodRecord& mr = method_of(r);
        if (!mr.available) continue;
        ++used;
        Eigen::Index best = 0;
        mr.values.row(e).maxCoeff(&best);
        ++selected[best];
        for (int g = 0; g < M; ++g) in_set[g] += mr.mcb[e].in_best_set[g] ? 1 : 0;
        set_size += mr.mcb[e].best_set_size();
      }
      for (int g = 0; g < M; ++g) {
        std::vector<double> est, se;
        for (const auto& r : records) {
          const MethodRecord& mr = method_of(r);
          if (!mr.available) continue;
          est.push_back(mr.values(e, g));
          se.push_back(mr.se(e, g));
        }
        MetricRow row = summarize(est, se, truths.value(estimands[e], regimens[g]),
                                  study.coverage_uses_aese);
        row.kind = "value";
        row.name = estimands[e].label();
        row.regimen = regimens[g].label();
        row.method = method_names[m];
        if (used > 0) {
          row.point = 100.0 * selected[g] / used;
          row.mcb = 100.0 * in_set[g] / used;
          row.best_set_size = set_size / used;
        }
        mcse_by_method[m].push_back(row.mcse);
        out.rows.push_back(std::move(row));
      }
    }
  }
  // Relative efficiency on the JM rows.
  std::size_t k = 0;
  for (auto& row : out.rows) {
    if (row.kind != "value" || row.method != "JM") continue;
    const double iptw = mcse_by_method[1][k++];
    if (iptw > 0.0) row.re = row.mcse * row.mcse / (iptw * iptw);
  }

  const auto contrasts = study.contrasts();
  for (int m = 0; m < 2; ++m) {
    for (std::size_t c = 0; c < contrasts.size(); ++c) {
      std::vector<double> est, se;
      for (const auto& r : records) {
        const MethodRecord& mr = m == 0 ? r.jm : r.iptw;
        if (!mr.available) continue;
        est.push_back(mr.contrast[c]);
        se.push_back(mr.contrast_se[c]);
      }
      const double truth = truths.value(contrasts[c].estimand, contrasts[c].first) -
                           truths.value(contrasts[c].estimand, contrasts[c].second);
      MetricRow row = summarize(est, se, truth, study.coverage_uses_aese);
      row.kind = "contrast";
      row.name = contrasts[c].label();
      row.method = method_names[m];
      out.rows.push_back(std::move(row));
    }
  }
  return out;
}

}  // namespace smartjm
