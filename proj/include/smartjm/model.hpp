#pragma once

// SMART data model, treatment coding and the two time-varying model terms
// shared by every submodel: the latent biomarker trajectory m(t) and the
// hazard linear predictor eta(t).
//
// Unless a function says otherwise, times passed to the evaluators in this
// header are on the *model* clock, i.e. natural weeks multiplied by
// DesignConfig::time_scale. SubjectRecord stores natural weeks.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace smartjm {

enum class Treatment : std::uint8_t { A, B, C, D };

char to_char(Treatment t);
Treatment parse_treatment(std::string_view s);

using RandomEffects = std::array<double, 2>;

// A dynamic treatment regimen (v1, v2 for responders, v2 for nonresponders).
struct Dtr {
  Treatment v1;
  Treatment v2_responder;
  Treatment v2_nonresponder;

  std::string label() const;  // "(A,A,C)"
  bool operator==(const Dtr&) const = default;
};

Dtr make_dtr(Treatment v1, Treatment nonresponder);
Dtr parse_dtr(std::string_view s);

// Reference-cell coding of the treatment effects. Labels absent from a list
// are reference categories whose coefficient is fixed at zero.
struct TreatmentCoding {
  std::array<Treatment, 2> stage1{Treatment::A, Treatment::B};
  std::array<Treatment, 2> stage2{Treatment::C, Treatment::D};
  // Longitudinal treatment slopes, shared between stages (D is reference).
  std::vector<Treatment> slope_labels{Treatment::A, Treatment::B, Treatment::C};
  // Survival stage-1 exposure indicators (B is reference).
  std::vector<Treatment> hazard_stage1_labels{Treatment::A};
  // Survival stage-2 exposure indicators nested in stage 1 (xD reference).
  std::vector<std::pair<Treatment, Treatment>> hazard_stage2_sequences{
      {Treatment::A, Treatment::A},
      {Treatment::B, Treatment::B},
      {Treatment::A, Treatment::C},
      {Treatment::B, Treatment::C}};

  int slope_index(Treatment t) const;
  int stage1_index(Treatment t) const;
  int stage2_index(Treatment v1, Treatment v2) const;
  bool is_stage1(Treatment t) const;
  bool is_stage2(Treatment t) const;

  // Embedded regimens in (v1, nonresponder) lexicographic order:
  // (A,A,C), (A,A,D), (B,B,C), (B,B,D) for the reference design.
  std::vector<Dtr> embedded_regimens() const;
};

enum class Schedule { Dense, Sparse };

std::vector<double> measurement_schedule(Schedule s);
Schedule parse_schedule(std::string_view s);
std::string_view to_string(Schedule s);

struct DesignConfig {
  double tau = 8.0;          // decision point, weeks
  double c = 1.3;            // response threshold on the biomarker scale
  double t_max = 24.0;       // administrative censoring, weeks
  double p1 = 0.5;
  double p2 = 0.5;
  double time_scale = 0.1;   // model clock = weeks * time_scale
  std::vector<double> measurement_schedule = smartjm::measurement_schedule(Schedule::Dense);
  TreatmentCoding coding{};
  // Gauss-Kronrod panels used for the post-decision piece of the
  // cumulative hazard.
  int post_tau_panels = 1;

  double tau_model() const { return tau * time_scale; }
  double to_model(double weeks) const { return weeks * time_scale; }

  // Throws ConfigError when an invariant is violated.
  void validate() const;
};

struct SubjectRecord {
  int id = 0;
  std::vector<double> x0;
  std::vector<double> times;   // weeks, nondecreasing, times[0] == 0
  std::vector<double> values;
  Treatment v1 = Treatment::A;
  std::optional<bool> responder;
  std::optional<Treatment> v2;
  double obs_time = 0.0;       // weeks
  bool event = false;
};

// Throws PreconditionError describing the first violated invariant.
void validate_subject(const SubjectRecord& s, const DesignConfig& cfg);

struct Theta {
  double beta0 = 0.0;
  std::vector<double> beta_x;
  double beta_t = 0.0;
  std::vector<double> beta_trt;      // one per TreatmentCoding::slope_labels
  double sigma_b0 = 1.0;
  double sigma_b1 = 1.0;
  double rho = 0.0;
  double sigma_eps = 1.0;
  double lambda0 = 1.0;
  double kappa = 1.0;
  std::vector<double> gamma_x;
  std::vector<double> gamma_stage1;  // one per hazard_stage1_labels
  std::vector<double> gamma_stage2;  // one per hazard_stage2_sequences
  double alpha = 0.0;

  double slope(Treatment t, const TreatmentCoding& coding) const;
  double stage1_effect(Treatment t, const TreatmentCoding& coding) const;
  double stage2_effect(Treatment v1, Treatment v2, const TreatmentCoding& coding) const;

  Eigen::Matrix2d random_effects_cov() const;

  // Throws PreconditionError on positivity / correlation / PD violations.
  void validate() const;
};

// Flat parameter ordering: beta0, beta_x.., beta_t, beta_trt.., sigma_b0,
// sigma_b1, rho, sigma_eps, lambda0, kappa, gamma_x.., gamma_stage1..,
// gamma_stage2.., alpha.
struct ParamLayout {
  int n_cov = 2;
  int n_slope = 3;
  int n_stage1 = 1;
  int n_stage2 = 4;

  static ParamLayout of(const Theta& theta);
  static ParamLayout of(int n_cov, const TreatmentCoding& coding);

  int n_long() const { return 2 + n_cov + n_slope; }
  int n_surv() const { return n_cov + n_stage1 + n_stage2; }
  int beta_t() const { return 1 + n_cov; }
  int sigma_b0() const { return n_long(); }
  int sigma_b1() const { return n_long() + 1; }
  int rho() const { return n_long() + 2; }
  int sigma_eps() const { return n_long() + 3; }
  int lambda0() const { return n_long() + 4; }
  int kappa() const { return n_long() + 5; }
  int gamma() const { return n_long() + 6; }
  int alpha() const { return gamma() + n_surv(); }
  int size() const { return alpha() + 1; }

  std::vector<std::string> names(const TreatmentCoding& coding) const;
};

Eigen::VectorXd flatten(const Theta& theta);
Theta unflatten(const Eigen::VectorXd& v, const ParamLayout& layout);

// Longitudinal fixed effects (beta0, beta_x, beta_t, beta_trt) as a vector.
Eigen::VectorXd longitudinal_coefficients(const Theta& theta);
// Survival regression coefficients (gamma_x, gamma_stage1, gamma_stage2).
Eigen::VectorXd survival_coefficients(const Theta& theta);

// Data-generating values used throughout the simulation study, on the
// model clock (time-dependent coefficients per 10 weeks).
Theta reference_truth();

struct LinearPiece {
  double intercept = 0.0;
  double slope = 0.0;
  double operator()(double t) const { return intercept + slope * t; }
};

// A function that is linear on [0, tau] and on (tau, inf). The post piece
// is absent when no stage-2 treatment is known.
struct PiecewiseLinear {
  double tau = 0.0;
  LinearPiece pre;
  std::optional<LinearPiece> post;

  double operator()(double t) const;
};

// Coefficient forms of the pieces: on each piece the value is
// intercept.dot(coef) + slope.dot(coef) * t (random effects excluded).
struct AffineDesign {
  Eigen::VectorXd intercept;
  Eigen::VectorXd slope;
};

struct PieceDesign {
  AffineDesign pre;
  std::optional<AffineDesign> post;
};

// d m(t) / d (longitudinal coefficients), piecewise in t.
PieceDesign trajectory_design(std::span<const double> x0, Treatment v1,
                              std::optional<Treatment> v2,
                              const DesignConfig& cfg);
// d eta(t) / d (survival coefficients) excluding the association term.
PieceDesign hazard_design(std::span<const double> x0, Treatment v1,
                          std::optional<Treatment> v2, const DesignConfig& cfg);

double latent_trajectory(double t, std::span<const double> x0,
                         const RandomEffects& b, Treatment v1,
                         std::optional<Treatment> v2, const Theta& theta,
                         const DesignConfig& cfg);

double linear_predictor(double t, std::span<const double> x0,
                        const RandomEffects& b, Treatment v1,
                        std::optional<Treatment> v2, const Theta& theta,
                        const DesignConfig& cfg);

PiecewiseLinear trajectory_pieces(std::span<const double> x0,
                                  const RandomEffects& b, Treatment v1,
                                  std::optional<Treatment> v2,
                                  const Theta& theta, const DesignConfig& cfg);

PiecewiseLinear predictor_pieces(std::span<const double> x0,
                                 const RandomEffects& b, Treatment v1,
                                 std::optional<Treatment> v2,
                                 const Theta& theta, const DesignConfig& cfg);

inline bool response_indicator(double y0, double y_tau, double c) {
  return y0 - y_tau >= c;
}

}  // namespace smartjm
