#pragma once

// Simulation-study runner: truths, replications and performance metrics.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "smartjm/estimation.hpp"
#include "smartjm/gformula.hpp"
#include "smartjm/mcb.hpp"
#include "smartjm/simgen.hpp"

namespace smartjm {

enum class TruthMethod { Quadrature, MonteCarlo };

TruthMethod parse_truth_method(std::string_view s);
std::string_view to_string(TruthMethod m);

struct TruthOptions {
  // Quadrature integrates the covariate law exactly in X01 and by
  // Gauss-Hermite in X02; MonteCarlo averages over `draws` sampled baselines.
  TruthMethod method = TruthMethod::Quadrature;
  int draws = 5000;
  int covariate_order = 40;
  int marginal_order = 5;
  int grid_size = 500;
  std::uint64_t seed = 1;
  int threads = 1;
};

struct TruthTable {
  std::vector<Dtr> regimens;
  std::vector<Estimand> estimands;
  Eigen::MatrixXd values;  // estimand x regimen

  double value(const Estimand& e, const Dtr& g) const;
};

TruthTable compute_true_values(const DgmTruth& truth, const DesignConfig& cfg,
                               const std::vector<Estimand>& estimands,
                               const TruthOptions& opts = {});

// Difference of two regimen values for one estimand.
struct Contrast {
  Estimand estimand;
  Dtr first;
  Dtr second;

  std::string label() const;  // "RMST(16) (A,A,C)-(A,A,D)"
};

// RMST(16) (A,A,C)-(A,A,D) and S(24) (A,A,D)-(B,B,C).
std::vector<Contrast> default_contrasts();

struct StudyConfig {
  int n = 300;
  int replications = 100;
  std::uint64_t seed = 20240601;
  std::vector<double> schedule = measurement_schedule(Schedule::Dense);  // weeks
  std::vector<double> horizons{16.0, 24.0};
  int k_fit = 5;
  int k_marg = 3;
  int n_jm = 300;
  int n_boot = 1000;
  int n_mc = 20000;
  int grid_rmst = 100;
  int grid_truth = 500;
  int truth_draws = 5000;
  TruthMethod truth_method = TruthMethod::Quadrature;
  double zeta = 0.05;
  int threads = 1;
  // Fit the joint model only (parameter metrics), skipping regimen values.
  bool fit_only = false;
  // Coverage from the cross-replication average SE instead of each
  // replication's own SE.
  bool coverage_uses_aese = false;
  DgmTruth truth{};

  DesignConfig design() const;
  std::vector<Estimand> estimands() const;  // RMST then S at each horizon
  std::vector<Contrast> contrasts() const;
  void validate() const;
};

struct MethodRecord {
  bool available = false;
  Eigen::MatrixXd values;  // estimand x regimen
  Eigen::MatrixXd se;
  std::vector<Eigen::MatrixXd> cov;  // per estimand, used for contrasts
  std::vector<McbResult> mcb;        // per estimand
  Eigen::VectorXd contrast;
  Eigen::VectorXd contrast_se;
};

struct ReplicationRecord {
  int index = 0;
  std::uint64_t seed = 0;
  bool fit_ok = false;
  bool converged = false;
  std::string error;
  int iterations = 0;
  double projected_grad_norm = 0.0;
  double fit_seconds = 0.0;
  Eigen::VectorXd theta_hat;  // natural scale, flat layout
  Eigen::VectorXd theta_se;
  MethodRecord jm;
  MethodRecord iptw;
};

// Replication `index` uses the stream derive_seed(study.seed, index).
ReplicationRecord run_replication(int index, const StudyConfig& study);
ReplicationRecord run_replication_with_seed(std::uint64_t seed, const StudyConfig& study);

std::vector<ReplicationRecord> run_study(
    const StudyConfig& study, const std::function<void(const ReplicationRecord&)>& progress = {});

struct MetricRow {
  std::string kind;     // "parameter", "value" or "contrast"
  std::string name;     // parameter name, estimand label or contrast label
  std::string regimen;  // empty for parameters and contrasts
  std::string method;   // "MLE", "JM" or "IPTW"
  double truth = 0.0;
  double mean = 0.0;
  double rel_bias = 0.0;  // percent; absolute bias when rel_is_absolute
  bool rel_is_absolute = false;
  double mcse = 0.0;
  double aese = 0.0;
  double rmse = 0.0;
  double coverage = 0.0;  // percent
  std::optional<double> point;          // percent of replications selecting this regimen
  std::optional<double> mcb;            // percent of replications with this regimen in the set
  std::optional<double> best_set_size;  // average over replications
  std::optional<double> re;             // JM MCSE^2 / IPTW MCSE^2 on JM rows
  int count = 0;
};

struct StudyMetrics {
  int replications = 0;
  double convergence_rate = 0.0;  // percent
  std::vector<MetricRow> rows;

  const MetricRow* find(std::string_view kind, std::string_view name, std::string_view regimen,
                        std::string_view method) const;
};

// Throws PreconditionError with fewer than two records.
StudyMetrics aggregate_metrics(const std::vector<ReplicationRecord>& records,
                               const TruthTable& truths, const StudyConfig& study);

}  // namespace smartjm
