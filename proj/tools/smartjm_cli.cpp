#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "smartjm/errors.hpp"
#include "smartjm/estimation.hpp"
#include "smartjm/gformula.hpp"
#include "smartjm/harness.hpp"
#include "smartjm/io.hpp"
#include "smartjm/iptw.hpp"
#include "smartjm/mcb.hpp"
#include "smartjm/parallel.hpp"
#include "smartjm/simgen.hpp"

namespace {

using nlohmann::json;
using namespace smartjm;

enum ExitCode { kOk = 0, kUsage = 1, kInput = 2, kFit = 3, kEstimation = 4, kIo = 5 };

// A failure tagged with the stage that produced it.
struct StageError {
  std::string stage;
  std::string message;
  int code;
};

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<std::string> schedule;
  std::optional<int> n;
  std::optional<int> replications;
  std::optional<double> zeta;
  std::vector<double> horizons;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "Study configuration (JSON)")->check(CLI::ExistingFile);
    app->add_option("--seed", seed, "Master seed");
    app->add_option("--threads", threads, "Worker threads");
    app->add_option("--schedule", schedule, "Measurement schedule: dense or sparse");
    app->add_option("--n", n, "Subjects per trial");
    app->add_option("--replications", replications, "Simulation replications");
    app->add_option("--zeta", zeta, "MCB error rate");
    app->add_option("--horizons", horizons, "Horizons in weeks");
  }

  StudyConfig resolve() const {
    StudyConfig s = config.empty() ? StudyConfig{} : load_study_config(config);
    if (seed) s.seed = *seed;
    if (threads) s.threads = *threads;
    if (schedule) s.schedule = measurement_schedule(parse_schedule(*schedule));
    if (n) s.n = *n;
    if (replications) s.replications = *replications;
    if (zeta) s.zeta = *zeta;
    if (!horizons.empty()) s.horizons = horizons;
    s.validate();
    return s;
  }
};

template <class F>
auto stage(const std::string& name, int code, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const ParseError& e) {
    throw StageError{name, e.what(), kInput};
  } catch (const ConfigError& e) {
    throw StageError{name, e.what(), kInput};
  } catch (const std::exception& e) {
    throw StageError{name, e.what(), code};
  }
}

void emit(const json& doc, const std::string& out) {
  if (out.empty() || out == "-") {
    std::cout << doc.dump(2) << '\n';
  } else {
    stage("write", kIo, [&] { write_json(out, doc); });
  }
}

std::vector<SubjectRecord> load_data(const std::string& dir, const DesignConfig& cfg) {
  return stage("read", kInput, [&] { return load_dataset(DatasetPaths::in(dir), cfg); });
}

FitResult fit_stage(const std::vector<SubjectRecord>& data, const StudyConfig& s) {
  FitOptions fo;
  fo.quadrature_order = s.k_fit;
  return stage("fit", kFit, [&] { return fit_joint_model(data, s.design(), fo); });
}

RegimenValueTable jm_stage(const FitResult& fit, const std::vector<SubjectRecord>& data,
                           const StudyConfig& s) {
  GFormulaOptions go;
  go.marginal_order = s.k_marg;
  go.grid_size = s.grid_rmst;
  const DesignConfig cfg = s.design();
  return stage("gformula", kEstimation, [&] {
    return propagate_uncertainty(fit, cfg.coding.embedded_regimens(), s.estimands(),
                                 Standardization::empirical(data), cfg, s.n_jm,
                                 derive_seed(s.seed, 1), go, s.threads);
  });
}

BootstrapResult iptw_stage(const std::vector<SubjectRecord>& data, const StudyConfig& s) {
  const DesignConfig cfg = s.design();
  return stage("iptw", kEstimation, [&] {
    return bootstrap_covariance(data, cfg.coding.embedded_regimens(), s.estimands(), cfg,
                                s.n_boot, derive_seed(s.seed, 2), s.threads);
  });
}

int run_simulate(const StudyConfig& s, const std::string& out) {
  const DesignConfig cfg = s.design();
  const auto data =
      stage("simulate", kEstimation, [&] { return simulate_trial(s.seed, s.n, s.truth, cfg, s.threads); });
  stage("write", kIo, [&] { save_dataset(DatasetPaths::in(out), data); });
  int events = 0;
  for (const auto& r : data) events += r.event ? 1 : 0;
  json doc = result_envelope("simulate", s);
  doc["config"] = to_json(s);
  doc["truth"] = to_json(s.truth.theta, cfg.coding);
  doc["schedule"] = s.schedule;
  doc["subjects"] = data.size();
  doc["events"] = events;
  stage("write", kIo, [&] { write_json(std::filesystem::path(out) / "provenance.json", doc); });
  std::cout << "wrote " << data.size() << " subjects (" << events << " events) to " << out << '\n';
  return kOk;
}

int run_fit(const StudyConfig& s, const std::string& data_dir, const std::string& out) {
  const auto data = load_data(data_dir, s.design());
  const FitResult fit = fit_stage(data, s);
  json doc = result_envelope("fit", s);
  doc["fit"] = to_json(fit, s.design().coding);
  emit(doc, out);
  return fit.converged ? kOk : kFit;
}

int run_gformula(const StudyConfig& s, const std::string& data_dir, const std::string& out) {
  const auto data = load_data(data_dir, s.design());
  const FitResult fit = fit_stage(data, s);
  const RegimenValueTable table = jm_stage(fit, data, s);
  json doc = result_envelope("gformula", s);
  doc["converged"] = fit.converged;
  doc["values"] = to_json(table);
  emit(doc, out);
  return kOk;
}

int run_iptw(const StudyConfig& s, const std::string& data_dir, const std::string& out) {
  const auto data = load_data(data_dir, s.design());
  const BootstrapResult b = iptw_stage(data, s);
  const auto regimens = s.design().coding.embedded_regimens();
  const auto estimands = s.estimands();
  json doc = result_envelope("iptw", s);
  doc["values"] = value_table_json(regimens, estimands, b.values, b.se);
  doc["dropped_replicates"] = b.dropped;
  emit(doc, out);
  return kOk;
}

int run_mcb(const StudyConfig& s, const std::string& data_dir, const std::string& method,
            const std::string& out) {
  const auto data = load_data(data_dir, s.design());
  const auto regimens = s.design().coding.embedded_regimens();
  const auto estimands = s.estimands();
  Eigen::MatrixXd values;
  std::vector<Eigen::MatrixXd> cov;
  if (method == "jm") {
    const RegimenValueTable t = jm_stage(fit_stage(data, s), data, s);
    values = t.values;
    cov = t.cov;
  } else {
    const BootstrapResult b = iptw_stage(data, s);
    values = b.values;
    cov = b.block_cov;
  }
  json doc = result_envelope("mcb", s);
  doc["method"] = method;
  doc["zeta"] = s.zeta;
  json sets = json::array();
  for (std::size_t e = 0; e < estimands.size(); ++e) {
    const McbResult r = stage("mcb", kEstimation, [&] {
      return mcb_best_set(values.row(e).transpose(), cov[e], s.zeta, s.n_mc,
                          derive_seed(s.seed, 10 + e));
    });
    json j = to_json(r, regimens);
    j["estimand"] = estimands[e].label();
    sets.push_back(j);
  }
  doc["sets"] = sets;
  emit(doc, out);
  return kOk;
}

int run_study_command(const StudyConfig& s, const std::string& out, bool keep_records) {
  const DesignConfig cfg = s.design();
  TruthOptions to;
  to.method = s.truth_method;
  to.draws = s.truth_draws;
  to.grid_size = s.grid_truth;
  to.seed = derive_seed(s.seed, 0xC0FFEE);
  to.threads = s.threads;
  const TruthTable truths = stage("truth", kEstimation, [&] {
    return compute_true_values(s.truth, cfg, s.estimands(), to);
  });
  int done = 0;
  const auto t0 = std::chrono::steady_clock::now();
  const auto records = stage("replications", kEstimation, [&] {
    return run_study(s, [&](const ReplicationRecord& r) {
      ++done;
      const double elapsed =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::fprintf(stderr, "[%d/%d] replication %d %s (%.0fs elapsed)\n", done, s.replications,
                   r.index, r.fit_ok ? (r.converged ? "converged" : "not converged") : "fit failed",
                   elapsed);
    });
  });
  const StudyMetrics metrics =
      stage("aggregate", kEstimation, [&] { return aggregate_metrics(records, truths, s); });

  const auto regimens = cfg.coding.embedded_regimens();
  double horizon = 0.0;
  for (double h : s.horizons) horizon = std::max(horizon, h);
  GFormulaOptions curve_opts;
  curve_opts.marginal_order = 5;
  curve_opts.grid_size = 97;
  json doc = result_envelope("study", s);
  doc["config"] = to_json(s);
  doc["truths"] = to_json(truths);
  doc["metrics"] = to_json(metrics);
  if (keep_records) {
    json recs = json::array();
    for (const auto& r : records) recs.push_back(to_json(r));
    doc["replications"] = recs;
  }

  // Point series for plotting: survival at the true parameters over the
  // empirical covariates of replication 0's trial.
  const auto data0 = simulate_trial(derive_seed(derive_seed(s.seed, 0), 0), s.n, s.truth, cfg);
  const SurvivalCurves truth_curves = stage("curves", kEstimation, [&] {
    return marginal_curves(horizon, Standardization::empirical(data0), s.truth.theta, regimens,
                           cfg, curve_opts);
  });
  json curves{{"truth", to_json(truth_curves, regimens)}};
  if (!records.empty() && records.front().fit_ok) {
    const Theta fitted = unflatten(records.front().theta_hat, ParamLayout::of(s.truth.theta));
    curves["jm_replication_0"] = to_json(
        marginal_curves(horizon, Standardization::empirical(data0), fitted, regimens, cfg,
                        curve_opts),
        regimens);
  }
  json km = json::object();
  for (const auto& g : regimens) {
    const SurvivalStepFunction f = weighted_km(data0, g, cfg);
    km[g.label()] = {{"times", f.times}, {"survival", f.values}};
  }
  curves["iptw_replication_0"] = km;
  doc["curves"] = curves;

  const std::string report = parameter_report(metrics) + "\n" +
                             (s.fit_only ? "" : value_report(metrics) + "\n" + contrast_report(metrics));
  if (out.empty() || out == "-") {
    std::cout << doc.dump(2) << '\n';
  } else {
    const std::filesystem::path dir(out);
    stage("write", kIo, [&] {
      write_json(dir / "study.json", doc);
      std::ofstream r(dir / "report.txt");
      r << report;
      if (!r) throw Error("write failed for report.txt");
    });
    std::cout << report;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint longitudinal-survival evaluation of dynamic treatment regimens"};
  app.require_subcommand(1);

  Overrides common;
  std::string out;
  std::string data_dir;
  std::string method = "jm";
  bool keep_records = false;

  auto* sim = app.add_subcommand("simulate", "Simulate one trial and write its data files");
  auto* fit = app.add_subcommand("fit", "Fit the joint model to a dataset");
  auto* gf = app.add_subcommand("gformula", "Joint-model regimen values with uncertainty");
  auto* ip = app.add_subcommand("iptw", "IPTW regimen values with bootstrap uncertainty");
  auto* mc = app.add_subcommand("mcb", "Multiple comparisons with the best");
  auto* st = app.add_subcommand("study", "Run a simulation study");
  for (auto* sub : {sim, fit, gf, ip, mc, st}) {
    common.attach(sub);
    sub->add_option("--out", out, sub == sim ? "Output directory" : "Output path ('-' for stdout)");
  }
  sim->get_option("--out")->required();
  for (auto* sub : {fit, gf, ip, mc}) {
    sub->add_option("--data", data_dir, "Directory with subjects.csv and longitudinal.csv")
        ->required()
        ->check(CLI::ExistingDirectory);
  }
  mc->add_option("--method", method, "Value estimator: jm or iptw")
      ->check(CLI::IsMember({"jm", "iptw"}));
  st->add_flag("--records", keep_records, "Include per-replication records");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ValidationError& e) {
    app.exit(e);
    return kInput;
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kUsage;
  }

  try {
    const StudyConfig s = stage("config", kInput, [&] { return common.resolve(); });
    if (*sim) return run_simulate(s, out);
    if (*fit) return run_fit(s, data_dir, out);
    if (*gf) return run_gformula(s, data_dir, out);
    if (*ip) return run_iptw(s, data_dir, out);
    if (*mc) return run_mcb(s, data_dir, method, out);
    if (*st) return run_study_command(s, out, keep_records);
  } catch (const StageError& e) {
    std::cerr << "error [" << e.stage << "]: " << e.message << '\n';
    return e.code;
  }
  return kUsage;
}
