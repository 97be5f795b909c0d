#include "smartjm/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "smartjm/errors.hpp"

namespace smartjm {

char to_char(Treatment t) {
  switch (t) {
    case Treatment::A: return 'A';
    case Treatment::B: return 'B';
    case Treatment::C: return 'C';
    case Treatment::D: return 'D';
  }
  return '?';
}

Treatment parse_treatment(std::string_view s) {
  if (s.size() == 1) {
    switch (s[0]) {
      case 'A': return Treatment::A;
      case 'B': return Treatment::B;
      case 'C': return Treatment::C;
      case 'D': return Treatment::D;
      default: break;
    }
  }
  throw PreconditionError("unknown treatment label '" + std::string(s) + "'");
}

std::string Dtr::label() const {
  std::string out = "(";
  out += to_char(v1);
  out += ',';
  out += to_char(v2_responder);
  out += ',';
  out += to_char(v2_nonresponder);
  out += ')';
  return out;
}

Dtr make_dtr(Treatment v1, Treatment nonresponder) {
  return Dtr{v1, v1, nonresponder};
}

Dtr parse_dtr(std::string_view s) {
  std::string letters;
  for (char ch : s) {
    if (ch >= 'A' && ch <= 'D') letters += ch;
  }
  if (letters.size() != 3) {
    throw PreconditionError("cannot parse regimen '" + std::string(s) + "'");
  }
  Dtr g{parse_treatment(letters.substr(0, 1)), parse_treatment(letters.substr(1, 1)),
        parse_treatment(letters.substr(2, 1))};
  if (g.v2_responder != g.v1) {
    throw PreconditionError("regimen " + g.label() +
                            ": responders must continue the stage-1 treatment");
  }
  return g;
}

namespace {

template <class Range, class T>
int index_of(const Range& r, const T& v) {
  auto it = std::find(r.begin(), r.end(), v);
  return it == r.end() ? -1 : static_cast<int>(it - r.begin());
}

}  // namespace

int TreatmentCoding::slope_index(Treatment t) const {
  return index_of(slope_labels, t);
}

int TreatmentCoding::stage1_index(Treatment t) const {
  return index_of(hazard_stage1_labels, t);
}

int TreatmentCoding::stage2_index(Treatment v1, Treatment v2) const {
  return index_of(hazard_stage2_sequences, std::pair{v1, v2});
}

bool TreatmentCoding::is_stage1(Treatment t) const {
  return index_of(stage1, t) >= 0;
}

bool TreatmentCoding::is_stage2(Treatment t) const {
  return index_of(stage2, t) >= 0;
}

std::vector<Dtr> TreatmentCoding::embedded_regimens() const {
  std::vector<Dtr> out;
  for (Treatment v1 : stage1) {
    for (Treatment v2 : stage2) out.push_back(make_dtr(v1, v2));
  }
  return out;
}

std::vector<double> measurement_schedule(Schedule s) {
  if (s == Schedule::Sparse) return {0.0, 8.0, 16.0, 24.0};
  std::vector<double> out;
  for (int t = 0; t <= 24; ++t) out.push_back(t);
  return out;
}

Schedule parse_schedule(std::string_view s) {
  if (s == "dense") return Schedule::Dense;
  if (s == "sparse") return Schedule::Sparse;
  throw ConfigError("schedule must be 'dense' or 'sparse', got '" + std::string(s) + "'");
}

std::string_view to_string(Schedule s) {
  return s == Schedule::Dense ? "dense" : "sparse";
}

void DesignConfig::validate() const {
  if (!(tau > 0.0 && tau < t_max)) throw ConfigError("design: require 0 < tau < t_max");
  if (!(p1 > 0.0 && p1 < 1.0) || !(p2 > 0.0 && p2 < 1.0)) {
    throw ConfigError("design: randomization probabilities must lie in (0,1)");
  }
  if (!(time_scale > 0.0)) throw ConfigError("design: time_scale must be positive");
  if (post_tau_panels < 1) throw ConfigError("design: post_tau_panels must be >= 1");
  if (measurement_schedule.empty()) throw ConfigError("design: empty measurement schedule");
  if (!std::is_sorted(measurement_schedule.begin(), measurement_schedule.end())) {
    throw ConfigError("design: measurement schedule must be nondecreasing");
  }
  auto has = [&](double t) {
    return std::any_of(measurement_schedule.begin(), measurement_schedule.end(),
                       [t](double s) { return std::abs(s - t) < 1e-12; });
  };
  if (!has(0.0)) throw ConfigError("design: measurement schedule must include t = 0");
  if (!has(tau)) {
    throw ConfigError("design: measurement schedule must include the decision point tau");
  }
}

void validate_subject(const SubjectRecord& s, const DesignConfig& cfg) {
  auto fail = [&](const std::string& why) {
    throw PreconditionError("subject " + std::to_string(s.id) + ": " + why);
  };
  if (s.times.size() != s.values.size()) fail("times and values differ in length");
  if (s.times.empty()) fail("no longitudinal measurements");
  if (s.times.front() != 0.0) fail("first measurement must be at t = 0");
  if (!std::is_sorted(s.times.begin(), s.times.end())) fail("measurement times decrease");
  if (s.times.back() > s.obs_time + 1e-9) fail("measurement after observed follow-up time");
  if (!(s.obs_time > 0.0)) fail("observed time must be positive");
  if (!cfg.coding.is_stage1(s.v1)) fail("v1 is not a stage-1 treatment");
  if (s.responder.has_value() != s.v2.has_value()) fail("responder and v2 must be jointly present");
  if (s.responder && s.obs_time < cfg.tau) fail("responder status recorded before tau");
  if (!s.responder && s.obs_time > cfg.tau + 1e-12) {
    fail("subject followed past tau without a decision");
  }
  if (s.responder) {
    if (*s.responder && *s.v2 != s.v1) fail("responders must continue v1");
    if (!*s.responder && !cfg.coding.is_stage2(*s.v2)) fail("nonresponder v2 not in stage-2 set");
  }
  for (double v : s.values) {
    if (!std::isfinite(v)) fail("non-finite measurement");
  }
}

double Theta::slope(Treatment t, const TreatmentCoding& coding) const {
  int k = coding.slope_index(t);
  return k < 0 ? 0.0 : beta_trt.at(k);
}

double Theta::stage1_effect(Treatment t, const TreatmentCoding& coding) const {
  int k = coding.stage1_index(t);
  return k < 0 ? 0.0 : gamma_stage1.at(k);
}

double Theta::stage2_effect(Treatment v1, Treatment v2, const TreatmentCoding& coding) const {
  int k = coding.stage2_index(v1, v2);
  return k < 0 ? 0.0 : gamma_stage2.at(k);
}

Eigen::Matrix2d Theta::random_effects_cov() const {
  Eigen::Matrix2d g;
  g << sigma_b0 * sigma_b0, rho * sigma_b0 * sigma_b1, rho * sigma_b0 * sigma_b1,
      sigma_b1 * sigma_b1;
  return g;
}

void Theta::validate() const {
  if (!(sigma_eps > 0 && sigma_b0 > 0 && sigma_b1 > 0 && lambda0 > 0 && kappa > 0)) {
    throw PreconditionError("theta: scale parameters must be positive");
  }
  if (!(std::abs(rho) < 1.0)) throw PreconditionError("theta: |rho| must be < 1");
  if (beta_x.size() != gamma_x.size()) {
    throw PreconditionError("theta: beta_x and gamma_x sizes differ");
  }
}

ParamLayout ParamLayout::of(const Theta& theta) {
  return ParamLayout{static_cast<int>(theta.beta_x.size()),
                     static_cast<int>(theta.beta_trt.size()),
                     static_cast<int>(theta.gamma_stage1.size()),
                     static_cast<int>(theta.gamma_stage2.size())};
}

ParamLayout ParamLayout::of(int n_cov, const TreatmentCoding& coding) {
  return ParamLayout{n_cov, static_cast<int>(coding.slope_labels.size()),
                     static_cast<int>(coding.hazard_stage1_labels.size()),
                     static_cast<int>(coding.hazard_stage2_sequences.size())};
}

std::vector<std::string> ParamLayout::names(const TreatmentCoding& coding) const {
  auto cov = [](const char* stem, int k) {
    std::ostringstream os;
    os << stem << "_x0" << (k + 1);
    return os.str();
  };
  std::vector<std::string> out;
  out.emplace_back("beta0");
  for (int k = 0; k < n_cov; ++k) out.push_back(cov("beta", k));
  out.emplace_back("beta_t");
  for (int k = 0; k < n_slope; ++k) {
    out.push_back(std::string("beta_") + to_char(coding.slope_labels.at(k)));
  }
  out.insert(out.end(), {"sigma_b0", "sigma_b1", "rho", "sigma_eps", "lambda0", "kappa"});
  for (int k = 0; k < n_cov; ++k) out.push_back(cov("gamma", k));
  for (int k = 0; k < n_stage1; ++k) {
    out.push_back(std::string("gamma_") + to_char(coding.hazard_stage1_labels.at(k)));
  }
  for (int k = 0; k < n_stage2; ++k) {
    const auto& [a, b] = coding.hazard_stage2_sequences.at(k);
    out.push_back(std::string("gamma_") + to_char(a) + to_char(b));
  }
  out.emplace_back("alpha");
  return out;
}

Eigen::VectorXd flatten(const Theta& theta) {
  const ParamLayout lay = ParamLayout::of(theta);
  Eigen::VectorXd v(lay.size());
  v.head(lay.n_long()) = longitudinal_coefficients(theta);
  v[lay.sigma_b0()] = theta.sigma_b0;
  v[lay.sigma_b1()] = theta.sigma_b1;
  v[lay.rho()] = theta.rho;
  v[lay.sigma_eps()] = theta.sigma_eps;
  v[lay.lambda0()] = theta.lambda0;
  v[lay.kappa()] = theta.kappa;
  v.segment(lay.gamma(), lay.n_surv()) = survival_coefficients(theta);
  v[lay.alpha()] = theta.alpha;
  return v;
}

Theta unflatten(const Eigen::VectorXd& v, const ParamLayout& lay) {
  SMARTJM_REQUIRE(v.size() == lay.size(), "unflatten: parameter vector has wrong length");
  auto take = [&](int off, int n) { return std::vector<double>(v.data() + off, v.data() + off + n); };
  Theta th;
  th.beta0 = v[0];
  th.beta_x = take(1, lay.n_cov);
  th.beta_t = v[lay.beta_t()];
  th.beta_trt = take(lay.beta_t() + 1, lay.n_slope);
  th.sigma_b0 = v[lay.sigma_b0()];
  th.sigma_b1 = v[lay.sigma_b1()];
  th.rho = v[lay.rho()];
  th.sigma_eps = v[lay.sigma_eps()];
  th.lambda0 = v[lay.lambda0()];
  th.kappa = v[lay.kappa()];
  th.gamma_x = take(lay.gamma(), lay.n_cov);
  th.gamma_stage1 = take(lay.gamma() + lay.n_cov, lay.n_stage1);
  th.gamma_stage2 = take(lay.gamma() + lay.n_cov + lay.n_stage1, lay.n_stage2);
  th.alpha = v[lay.alpha()];
  return th;
}

Eigen::VectorXd longitudinal_coefficients(const Theta& theta) {
  const ParamLayout lay = ParamLayout::of(theta);
  Eigen::VectorXd beta(lay.n_long());
  beta[0] = theta.beta0;
  for (int k = 0; k < lay.n_cov; ++k) beta[1 + k] = theta.beta_x[k];
  beta[lay.beta_t()] = theta.beta_t;
  for (int k = 0; k < lay.n_slope; ++k) beta[lay.beta_t() + 1 + k] = theta.beta_trt[k];
  return beta;
}

Eigen::VectorXd survival_coefficients(const Theta& theta) {
  const ParamLayout lay = ParamLayout::of(theta);
  Eigen::VectorXd gamma(lay.n_surv());
  int k = 0;
  for (double g : theta.gamma_x) gamma[k++] = g;
  for (double g : theta.gamma_stage1) gamma[k++] = g;
  for (double g : theta.gamma_stage2) gamma[k++] = g;
  return gamma;
}

Theta reference_truth() {
  Theta th;
  th.beta0 = 3.5;
  th.beta_x = {0.5, 0.7};
  th.beta_t = -0.5;
  th.beta_trt = {-0.8, -0.6, -0.7};
  th.sigma_b0 = 0.5;
  th.sigma_b1 = 0.2;
  th.rho = -0.3;
  th.sigma_eps = 0.5;
  th.lambda0 = 0.15;
  th.kappa = 2.6;
  th.gamma_x = {0.4, 0.2};
  th.gamma_stage1 = {-0.5};
  th.gamma_stage2 = {-1.5, -1.4, -1.0, -0.9};
  th.alpha = 0.2;
  return th;
}

double PiecewiseLinear::operator()(double t) const {
  if (t <= tau) return pre(t);
  if (!post) throw PreconditionError("evaluation after tau requires a stage-2 treatment");
  return (*post)(t);
}

namespace {

double dot(std::span<const double> a, const std::vector<double>& b) {
  SMARTJM_REQUIRE(a.size() == b.size(), "baseline covariate dimension mismatch");
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

void require_v2(double t, double tau, const std::optional<Treatment>& v2) {
  if (t > tau && !v2) {
    throw PreconditionError("evaluation after tau requires a stage-2 treatment");
  }
}

}  // namespace

double latent_trajectory(double t, std::span<const double> x0, const RandomEffects& b,
                         Treatment v1, std::optional<Treatment> v2, const Theta& theta,
                         const DesignConfig& cfg) {
  const double tau = cfg.tau_model();
  SMARTJM_REQUIRE(t >= 0.0, "latent_trajectory: t must be nonnegative");
  require_v2(t, tau, v2);
  const auto& coding = cfg.coding;
  double m = theta.beta0 + dot(x0, theta.beta_x) + theta.beta_t * t +
             theta.slope(v1, coding) * std::min(t, tau) + b[0] + b[1] * t;
  if (t > tau) m += theta.slope(*v2, coding) * (t - tau);
  return m;
}

double linear_predictor(double t, std::span<const double> x0, const RandomEffects& b,
                        Treatment v1, std::optional<Treatment> v2, const Theta& theta,
                        const DesignConfig& cfg) {
  const double tau = cfg.tau_model();
  SMARTJM_REQUIRE(t >= 0.0, "linear_predictor: t must be nonnegative");
  require_v2(t, tau, v2);
  const auto& coding = cfg.coding;
  double eta = dot(x0, theta.gamma_x) + theta.stage1_effect(v1, coding) * std::min(t, tau);
  if (t > tau) eta += theta.stage2_effect(v1, *v2, coding) * (t - tau);
  return eta + theta.alpha * latent_trajectory(t, x0, b, v1, v2, theta, cfg);
}

PiecewiseLinear trajectory_pieces(std::span<const double> x0, const RandomEffects& b,
                                  Treatment v1, std::optional<Treatment> v2,
                                  const Theta& theta, const DesignConfig& cfg) {
  const double tau = cfg.tau_model();
  const auto& coding = cfg.coding;
  const double level = theta.beta0 + dot(x0, theta.beta_x) + b[0];
  const double s1 = theta.slope(v1, coding);
  PiecewiseLinear m;
  m.tau = tau;
  m.pre = {level, theta.beta_t + s1 + b[1]};
  if (v2) {
    const double s2 = theta.slope(*v2, coding);
    m.post = LinearPiece{level + (s1 - s2) * tau, theta.beta_t + s2 + b[1]};
  }
  return m;
}

PiecewiseLinear predictor_pieces(std::span<const double> x0, const RandomEffects& b,
                                 Treatment v1, std::optional<Treatment> v2,
                                 const Theta& theta, const DesignConfig& cfg) {
  const double tau = cfg.tau_model();
  const auto& coding = cfg.coding;
  const PiecewiseLinear m = trajectory_pieces(x0, b, v1, v2, theta, cfg);
  const double base = dot(x0, theta.gamma_x);
  const double g1 = theta.stage1_effect(v1, coding);
  PiecewiseLinear eta;
  eta.tau = tau;
  eta.pre = {base + theta.alpha * m.pre.intercept, g1 + theta.alpha * m.pre.slope};
  if (v2) {
    const double g2 = theta.stage2_effect(v1, *v2, coding);
    eta.post = LinearPiece{base + (g1 - g2) * tau + theta.alpha * m.post->intercept,
                           g2 + theta.alpha * m.post->slope};
  }
  return eta;
}

PieceDesign trajectory_design(std::span<const double> x0, Treatment v1,
                              std::optional<Treatment> v2, const DesignConfig& cfg) {
  const auto& coding = cfg.coding;
  const int n_cov = static_cast<int>(x0.size());
  const ParamLayout lay = ParamLayout::of(n_cov, coding);
  const double tau = cfg.tau_model();
  const int t_col = lay.beta_t();
  const int k1 = coding.slope_index(v1);

  AffineDesign pre{Eigen::VectorXd::Zero(lay.n_long()), Eigen::VectorXd::Zero(lay.n_long())};
  pre.intercept[0] = 1.0;
  for (int k = 0; k < n_cov; ++k) pre.intercept[1 + k] = x0[k];
  pre.slope[t_col] = 1.0;
  if (k1 >= 0) pre.slope[t_col + 1 + k1] += 1.0;

  PieceDesign out{pre, std::nullopt};
  if (v2) {
    AffineDesign post{pre.intercept, Eigen::VectorXd::Zero(lay.n_long())};
    post.slope[t_col] = 1.0;
    const int k2 = coding.slope_index(*v2);
    if (k1 >= 0) post.intercept[t_col + 1 + k1] += tau;
    if (k2 >= 0) {
      post.intercept[t_col + 1 + k2] -= tau;
      post.slope[t_col + 1 + k2] += 1.0;
    }
    out.post = std::move(post);
  }
  return out;
}

PieceDesign hazard_design(std::span<const double> x0, Treatment v1,
                          std::optional<Treatment> v2, const DesignConfig& cfg) {
  const auto& coding = cfg.coding;
  const int n_cov = static_cast<int>(x0.size());
  const ParamLayout lay = ParamLayout::of(n_cov, coding);
  const double tau = cfg.tau_model();
  const int k1 = coding.stage1_index(v1);

  AffineDesign pre{Eigen::VectorXd::Zero(lay.n_surv()), Eigen::VectorXd::Zero(lay.n_surv())};
  for (int k = 0; k < n_cov; ++k) pre.intercept[k] = x0[k];
  if (k1 >= 0) pre.slope[n_cov + k1] = 1.0;

  PieceDesign out{pre, std::nullopt};
  if (v2) {
    AffineDesign post{pre.intercept, Eigen::VectorXd::Zero(lay.n_surv())};
    if (k1 >= 0) post.intercept[n_cov + k1] += tau;
    const int k2 = coding.stage2_index(v1, *v2);
    if (k2 >= 0) {
      post.intercept[n_cov + lay.n_stage1 + k2] -= tau;
      post.slope[n_cov + lay.n_stage1 + k2] = 1.0;
    }
    out.post = std::move(post);
  }
  return out;
}

}  // namespace smartjm
