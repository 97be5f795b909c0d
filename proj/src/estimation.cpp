#include "smartjm/estimation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>

#include "smartjm/errors.hpp"
#include "smartjm/parallel.hpp"

namespace smartjm {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kBoundRegression = 20.0;
constexpr double kLogLower = -8.0;
constexpr double kLogUpper = 4.0;
constexpr double kAtanhBound = 5.0;

std::vector<int> log_scaled(const ParamLayout& lay) {
  return {lay.sigma_b0(), lay.sigma_b1(), lay.sigma_eps(), lay.lambda0(), lay.kappa()};
}

}  // namespace

Eigen::VectorXd to_working(const Theta& theta) {
  theta.validate();
  const ParamLayout lay = ParamLayout::of(theta);
  Eigen::VectorXd w = flatten(theta);
  for (int k : log_scaled(lay)) w[k] = std::log(w[k]);
  w[lay.rho()] = std::atanh(w[lay.rho()]);
  return w;
}

Theta from_working(const Eigen::VectorXd& w, const ParamLayout& lay) {
  SMARTJM_REQUIRE(w.size() == lay.size(), "from_working: parameter vector has wrong length");
  Eigen::VectorXd v = w;
  for (int k : log_scaled(lay)) v[k] = std::exp(v[k]);
  v[lay.rho()] = std::tanh(v[lay.rho()]);
  return unflatten(v, lay);
}

Eigen::VectorXd natural_jacobian(const Eigen::VectorXd& w, const ParamLayout& lay) {
  Eigen::VectorXd j = Eigen::VectorXd::Ones(lay.size());
  for (int k : log_scaled(lay)) j[k] = std::exp(w[k]);
  const double r = std::tanh(w[lay.rho()]);
  j[lay.rho()] = 1.0 - r * r;
  return j;
}

BoxBounds working_bounds(const ParamLayout& lay) {
  BoxBounds b{Eigen::VectorXd::Constant(lay.size(), -kBoundRegression),
              Eigen::VectorXd::Constant(lay.size(), kBoundRegression)};
  for (int k : log_scaled(lay)) {
    b.lower[k] = kLogLower;
    b.upper[k] = kLogUpper;
  }
  b.lower[lay.rho()] = -kAtanhBound;
  b.upper[lay.rho()] = kAtanhBound;
  return b;
}

namespace {

double random_effects_logdensity(const RandomEffects& b, const Theta& theta) {
  const double u0 = b[0] / theta.sigma_b0;
  const double u1 = b[1] / theta.sigma_b1;
  const double one_m = 1.0 - theta.rho * theta.rho;
  const double q = u0 * u0 - 2.0 * theta.rho * u0 * u1 + u1 * u1;
  return -kLog2Pi - std::log(theta.sigma_b0) - std::log(theta.sigma_b1) - 0.5 * std::log(one_m) -
         0.5 * q / one_m;
}

}  // namespace

double complete_data_loglik(const SubjectRecord& s, const RandomEffects& b, const Theta& theta,
                            const DesignConfig& cfg) {
  const LongitudinalDesign d = longitudinal_design(s, cfg);
  const double longitudinal =
      lmm_conditional_logdensity(d.y, d.X, d.Z, Eigen::Vector2d(b[0], b[1]),
                                 longitudinal_coefficients(theta), theta.sigma_eps);
  const HazardContext ctx{s.x0, b, s.v1, s.v2, theta, cfg};
  const double survival = survival_logdensity(cfg.to_model(s.obs_time), s.event, ctx);
  return longitudinal + survival + random_effects_logdensity(b, theta);
}

std::vector<SubjectQuadrature> build_plans(const std::vector<SubjectRecord>& data,
                                           const LmmFit& lmm, const DesignConfig& cfg,
                                           int order) {
  const HermiteRule& rule = hermite_rule(order);
  std::vector<SubjectQuadrature> plans;
  plans.reserve(data.size());
  for (const auto& s : data) {
    const EbEstimate eb = empirical_bayes(s, lmm, cfg);
    plans.push_back(pseudo_adaptive_nodes(eb.mode, eb.curvature, rule));
  }
  return plans;
}

namespace {

// Everything about one subject that does not depend on theta.
struct SubjectCache {
  Eigen::VectorXd y;
  Eigen::VectorXd t;
  Eigen::MatrixXd X;
  Eigen::VectorXd x_one;  // X^T 1
  Eigen::VectorXd x_t;    // X^T t
  double n = 0.0;
  double sum_t = 0.0;
  double sum_t2 = 0.0;

  double tau = 0.0;
  double T = 0.0;
  double log_T = 0.0;
  bool delta = false;
  bool past_tau = false;  // T > tau: the stage-2 piece is integrated
  PieceDesign traj;
  PieceDesign haz;
  PieceNodes nodes[2];

  std::vector<Eigen::Vector2d> b;
  std::vector<double> log_w;
};

struct ThetaTerms {
  Eigen::VectorXd beta;
  Eigen::VectorXd gamma;
  double sigma2 = 1.0;
  double log_norm = 0.0;  // log(2 pi sigma^2)
  double lambda0 = 1.0;
  double kappa = 1.0;
  double log_lk = 0.0;    // log(lambda0 kappa)
  double alpha = 0.0;
  double s0 = 1.0;
  double s1 = 1.0;
  double rho = 0.0;
  double one_m = 1.0;
  double re_const = 0.0;

  explicit ThetaTerms(const Theta& th)
      : beta(longitudinal_coefficients(th)),
        gamma(survival_coefficients(th)),
        sigma2(th.sigma_eps * th.sigma_eps),
        log_norm(kLog2Pi + std::log(sigma2)),
        lambda0(th.lambda0),
        kappa(th.kappa),
        log_lk(std::log(th.lambda0 * th.kappa)),
        alpha(th.alpha),
        s0(th.sigma_b0),
        s1(th.sigma_b1),
        rho(th.rho),
        one_m(1.0 - th.rho * th.rho),
        re_const(-kLog2Pi - std::log(th.sigma_b0) - std::log(th.sigma_b1) -
                 0.5 * std::log(1.0 - th.rho * th.rho)) {}
};

// Per-node quantities that enter the posterior-weighted score.
struct NodeTerms {
  double lc = 0.0;
  double i0[2] = {0, 0};
  double i1[2] = {0, 0};
  double ilog[2] = {0, 0};
  double mi[2] = {0, 0};  // integral of m(u) h(u) over the piece
  double m_T = 0.0;
  double rss = 0.0;
  double u00 = 0.0, u11 = 0.0, u01 = 0.0;
};

struct Accumulated {
  double i0[2] = {0, 0};
  double i1[2] = {0, 0};
  double ilog[2] = {0, 0};
  double mi[2] = {0, 0};
  double m_T = 0.0;
  double rss = 0.0;
  double u00 = 0.0, u11 = 0.0, u01 = 0.0;
  double b0 = 0.0, b1 = 0.0;

  void add(double w, const NodeTerms& n, const Eigen::Vector2d& b) {
    for (int p = 0; p < 2; ++p) {
      i0[p] += w * n.i0[p];
      i1[p] += w * n.i1[p];
      ilog[p] += w * n.ilog[p];
      mi[p] += w * n.mi[p];
    }
    m_T += w * n.m_T;
    rss += w * n.rss;
    u00 += w * n.u00;
    u11 += w * n.u11;
    u01 += w * n.u01;
    b0 += w * b[0];
    b1 += w * b[1];
  }
};

double dot(const Eigen::VectorXd& a, const Eigen::VectorXd& b) { return a.dot(b); }

class Evaluator {
 public:
  Evaluator(const SubjectCache& sc, const ThetaTerms& tt) : sc_(sc), tt_(tt) {
    // Longitudinal residual sums at b = 0.
    e_ = sc.y - sc.X * tt.beta;
    see_ = e_.squaredNorm();
    se_ = e_.sum();
    set_ = e_.dot(sc.t);
    // Fixed parts of the trajectory and predictor on each piece.
    const AffineDesign* tr[2] = {&sc.traj.pre, sc.traj.post ? &*sc.traj.post : nullptr};
    const AffineDesign* hz[2] = {&sc.haz.pre, sc.haz.post ? &*sc.haz.post : nullptr};
    for (int p = 0; p < 2; ++p) {
      if (!tr[p]) continue;
      mc_[p] = dot(tr[p]->intercept, tt.beta);
      md_[p] = dot(tr[p]->slope, tt.beta);
      hc_[p] = dot(hz[p]->intercept, tt.gamma);
      hd_[p] = dot(hz[p]->slope, tt.gamma);
    }
    for (int p = 0; p < 2; ++p) {
      if (!sc.nodes[p].empty()) baseline_weights(sc.nodes[p], tt.lambda0, tt.kappa, bw_[p]);
    }
    piece_T_ = sc.past_tau ? 1 : 0;
  }

  void node(const Eigen::Vector2d& b, NodeTerms& out) const {
    const double b0 = b[0], b1 = b[1];
    out.rss = see_ - 2.0 * b0 * se_ - 2.0 * b1 * set_ + b0 * b0 * sc_.n +
              2.0 * b0 * b1 * sc_.sum_t + b1 * b1 * sc_.sum_t2;
    const double longitudinal = -0.5 * sc_.n * tt_.log_norm - 0.5 * out.rss / tt_.sigma2;

    double H = 0.0;
    for (int p = 0; p < 2; ++p) {
      out.i0[p] = out.i1[p] = out.ilog[p] = out.mi[p] = 0.0;
      const PieceNodes& nd = sc_.nodes[p];
      if (nd.empty()) continue;
      const double mc = mc_[p] + b0;
      const double md = md_[p] + b1;
      const LinearPiece eta{hc_[p] + tt_.alpha * mc, hd_[p] + tt_.alpha * md};
      check_predictor_range(eta, nd.t.front(), nd.t.back());
      const HazardMoments mom = piece_moments(nd, bw_[p], eta);
      out.i0[p] = mom.zeroth;
      out.i1[p] = mom.first;
      out.ilog[p] = mom.log;
      out.mi[p] = mc * mom.zeroth + md * mom.first;
      H += mom.zeroth;
    }
    const int q = piece_T_;
    const double mc_T = mc_[q] + b0;
    const double md_T = md_[q] + b1;
    out.m_T = mc_T + md_T * sc_.T;
    double survival = -H;
    if (sc_.delta) {
      const double eta_T = hc_[q] + hd_[q] * sc_.T + tt_.alpha * out.m_T;
      if (std::abs(eta_T) > kMaxLinearPredictor) {
        throw EvaluationError("linear predictor outside the bounded domain (|eta| > 50)");
      }
      survival += tt_.log_lk + (tt_.kappa - 1.0) * sc_.log_T + eta_T;
    }

    const double u0 = b0 / tt_.s0;
    const double u1 = b1 / tt_.s1;
    out.u00 = u0 * u0;
    out.u11 = u1 * u1;
    out.u01 = u0 * u1;
    const double Q = out.u00 - 2.0 * tt_.rho * out.u01 + out.u11;
    const double re = tt_.re_const - 0.5 * Q / tt_.one_m;
    out.lc = longitudinal + survival + re;
  }

  // Score contribution on the working scale given posterior expectations.
  void score(const Accumulated& a, const ParamLayout& lay, Eigen::VectorXd& g) const {
    const double alpha = tt_.alpha;
    const int q = piece_T_;
    const AffineDesign* tr[2] = {&sc_.traj.pre, sc_.traj.post ? &*sc_.traj.post : nullptr};
    const AffineDesign* hz[2] = {&sc_.haz.pre, sc_.haz.post ? &*sc_.haz.post : nullptr};
    const int nl = lay.n_long();
    const int ns = lay.n_surv();

    Eigen::VectorXd gb = (sc_.X.transpose() * e_ - sc_.x_one * a.b0 - sc_.x_t * a.b1) / tt_.sigma2;
    Eigen::VectorXd gg = Eigen::VectorXd::Zero(ns);
    Eigen::VectorXd surv_b = Eigen::VectorXd::Zero(nl);
    if (sc_.delta) {
      surv_b += tr[q]->intercept + tr[q]->slope * sc_.T;
      gg += hz[q]->intercept + hz[q]->slope * sc_.T;
    }
    double H = 0.0, ilog = 0.0, mi = 0.0;
    for (int p = 0; p < 2; ++p) {
      if (sc_.nodes[p].empty()) continue;
      surv_b -= tr[p]->intercept * a.i0[p] + tr[p]->slope * a.i1[p];
      gg -= hz[p]->intercept * a.i0[p] + hz[p]->slope * a.i1[p];
      H += a.i0[p];
      ilog += a.ilog[p];
      mi += a.mi[p];
    }
    g.head(nl) += gb + alpha * surv_b;
    g.segment(lay.gamma(), ns) += gg;
    const double d = sc_.delta ? 1.0 : 0.0;
    g[lay.alpha()] += d * a.m_T - mi;
    g[lay.sigma_eps()] += -sc_.n + a.rss / tt_.sigma2;
    g[lay.lambda0()] += d - H;
    g[lay.kappa()] += d * (1.0 + tt_.kappa * sc_.log_T) - (H + tt_.kappa * ilog);
    const double om = tt_.one_m;
    const double rho = tt_.rho;
    g[lay.sigma_b0()] += -1.0 + (a.u00 - rho * a.u01) / om;
    g[lay.sigma_b1()] += -1.0 + (a.u11 - rho * a.u01) / om;
    const double EQ = a.u00 - 2.0 * rho * a.u01 + a.u11;
    g[lay.rho()] += rho + a.u01 - rho * EQ / om;
  }

 private:
  const SubjectCache& sc_;
  const ThetaTerms& tt_;
  Eigen::VectorXd e_;
  double see_ = 0.0, se_ = 0.0, set_ = 0.0;
  double mc_[2] = {0, 0}, md_[2] = {0, 0}, hc_[2] = {0, 0}, hd_[2] = {0, 0};
  std::vector<double> bw_[2];
  int piece_T_ = 0;
};

SubjectCache make_cache(const SubjectRecord& s, const DesignConfig& cfg,
                        const SubjectQuadrature* plan) {
  validate_subject(s, cfg);
  SubjectCache sc;
  const LongitudinalDesign d = longitudinal_design(s, cfg);
  sc.y = d.y;
  sc.t = d.t;
  sc.X = d.X;
  sc.x_one = d.X.transpose() * Eigen::VectorXd::Ones(d.y.size());
  sc.x_t = d.X.transpose() * d.t;
  sc.n = static_cast<double>(d.y.size());
  sc.sum_t = d.t.sum();
  sc.sum_t2 = d.t.squaredNorm();

  const double tau = cfg.tau_model();
  sc.tau = tau;
  sc.T = cfg.to_model(s.obs_time);
  sc.log_T = std::log(sc.T);
  sc.delta = s.event;
  sc.past_tau = sc.T > tau;
  sc.traj = trajectory_design(s.x0, s.v1, s.v2, cfg);
  sc.haz = hazard_design(s.x0, s.v1, s.v2, cfg);
  sc.nodes[0] = PieceNodes::on(0.0, std::min(sc.T, tau));
  if (sc.past_tau) {
    if (!s.v2) throw PreconditionError("subject followed past tau without a stage-2 treatment");
    sc.nodes[1] = PieceNodes::on(tau, sc.T, cfg.post_tau_panels);
  }
  if (plan) {
    sc.b = plan->nodes;
    sc.log_w = plan->log_integration_weights;
  }
  return sc;
}

double log_sum_exp(const std::vector<double>& v) {
  const double mx = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(mx)) throw EvaluationError("likelihood mixture underflows at every node");
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

// Loglik of one subject; fills the working-scale gradient and/or the
// normalized posterior weights when requested.
double subject_loglik(const SubjectCache& sc, const ThetaTerms& tt, const ParamLayout& lay,
                      Eigen::VectorXd* grad, std::vector<double>* weights) {
  const Evaluator ev(sc, tt);
  const std::size_t R = sc.b.size();
  std::vector<NodeTerms> terms(R);
  std::vector<double> logs(R);
  for (std::size_t r = 0; r < R; ++r) {
    ev.node(sc.b[r], terms[r]);
    logs[r] = sc.log_w[r] + terms[r].lc;
  }
  const double ll = log_sum_exp(logs);
  if (!grad && !weights) return ll;
  std::vector<double> omega(R);
  for (std::size_t r = 0; r < R; ++r) omega[r] = std::exp(logs[r] - ll);
  if (grad) {
    Accumulated acc;
    for (std::size_t r = 0; r < R; ++r) acc.add(omega[r], terms[r], sc.b[r]);
    ev.score(acc, lay, *grad);
  }
  if (weights) *weights = std::move(omega);
  return ll;
}

}  // namespace

struct JointLikelihood::Impl {
  std::vector<SubjectCache> subjects;
  ParamLayout layout;
  int threads = 1;

  double evaluate(const Theta& theta, Eigen::VectorXd* grad, std::vector<double>* per_subject,
                  std::vector<std::vector<double>>* weights) const {
    const ParamLayout lay = ParamLayout::of(theta);
    SMARTJM_REQUIRE(lay.size() == layout.size() && lay.n_cov == layout.n_cov,
                    "JointLikelihood: parameter layout does not match the data");
    const ThetaTerms tt(theta);
    const std::size_t n = subjects.size();
    std::vector<double> ll(n);
    std::vector<Eigen::VectorXd> grads;
    if (grad) grads.assign(n, Eigen::VectorXd::Zero(lay.size()));
    if (weights) weights->assign(n, {});
    parallel_for(n, threads, [&](std::size_t i) {
      ll[i] = subject_loglik(subjects[i], tt, lay, grad ? &grads[i] : nullptr,
                             weights ? &(*weights)[i] : nullptr);
    });
    if (grad) {
      grad->setZero(lay.size());
      for (int k = 0; k < lay.size(); ++k) {
        CompensatedSum s;
        for (std::size_t i = 0; i < n; ++i) s.add(grads[i][k]);
        (*grad)[k] = s.value();
      }
    }
    if (per_subject) *per_subject = ll;
    return compensated_sum(ll);
  }
};

JointLikelihood::JointLikelihood(const std::vector<SubjectRecord>& data, const DesignConfig& cfg,
                                 std::vector<SubjectQuadrature> plans, int threads)
    : impl_(std::make_unique<Impl>()) {
  SMARTJM_REQUIRE(!data.empty(), "JointLikelihood: no subjects");
  SMARTJM_REQUIRE(plans.size() == data.size(), "JointLikelihood: need one plan per subject");
  cfg.validate();
  impl_->threads = threads;
  impl_->layout = ParamLayout::of(static_cast<int>(data.front().x0.size()), cfg.coding);
  impl_->subjects.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    SMARTJM_REQUIRE(!plans[i].nodes.empty(), "JointLikelihood: empty quadrature plan");
    impl_->subjects.push_back(make_cache(data[i], cfg, &plans[i]));
  }
}

JointLikelihood::~JointLikelihood() = default;
JointLikelihood::JointLikelihood(JointLikelihood&&) noexcept = default;
JointLikelihood& JointLikelihood::operator=(JointLikelihood&&) noexcept = default;

std::size_t JointLikelihood::size() const { return impl_->subjects.size(); }
const ParamLayout& JointLikelihood::layout() const { return impl_->layout; }

double JointLikelihood::loglik(const Theta& theta) const {
  return impl_->evaluate(theta, nullptr, nullptr, nullptr);
}

double JointLikelihood::loglik_and_score(const Theta& theta, Eigen::VectorXd& score) const {
  return impl_->evaluate(theta, &score, nullptr, nullptr);
}

std::vector<double> JointLikelihood::subject_logliks(const Theta& theta) const {
  std::vector<double> out;
  impl_->evaluate(theta, nullptr, &out, nullptr);
  return out;
}

std::vector<std::vector<double>> JointLikelihood::posterior_weights(const Theta& theta) const {
  std::vector<std::vector<double>> out;
  impl_->evaluate(theta, nullptr, nullptr, &out);
  return out;
}

double observed_loglik(const std::vector<SubjectRecord>& data, const Theta& theta,
                       const std::vector<SubjectQuadrature>& plans, const DesignConfig& cfg) {
  return JointLikelihood(data, cfg, plans).loglik(theta);
}

Eigen::VectorXd observed_score(const std::vector<SubjectRecord>& data, const Theta& theta,
                               const std::vector<SubjectQuadrature>& plans,
                               const DesignConfig& cfg) {
  Eigen::VectorXd g;
  JointLikelihood(data, cfg, plans).loglik_and_score(theta, g);
  return g;
}

namespace {

// Weibull relative-risk fit with alpha = 0 over (gamma, log lambda0, log kappa).
// Returns the fitted theta (other fields copied from `base`).
Theta fit_weibull_rr(const std::vector<SubjectCache>& subjects, const Theta& base,
                     int threads) {
  const ParamLayout lay = ParamLayout::of(base);
  const int ns = lay.n_surv();
  double events = 0.0, exposure = 0.0;
  for (const auto& sc : subjects) {
    events += sc.delta ? 1.0 : 0.0;
    exposure += sc.T;
  }
  Eigen::VectorXd w0 = Eigen::VectorXd::Zero(ns + 2);
  w0[ns] = std::log(std::max(events, 1.0) / exposure);
  w0[ns + 1] = 0.0;
  BoxBounds bounds{Eigen::VectorXd::Constant(ns + 2, -kBoundRegression),
                   Eigen::VectorXd::Constant(ns + 2, kBoundRegression)};
  bounds.lower.tail(2).setConstant(kLogLower);
  bounds.upper.tail(2).setConstant(kLogUpper);

  auto make_theta = [&](const Eigen::VectorXd& w) {
    Eigen::VectorXd flat = flatten(base);
    flat.segment(lay.gamma(), ns) = w.head(ns);
    flat[lay.lambda0()] = std::exp(w[ns]);
    flat[lay.kappa()] = std::exp(w[ns + 1]);
    flat[lay.alpha()] = 0.0;
    return unflatten(flat, lay);
  };
  const Eigen::Vector2d origin = Eigen::Vector2d::Zero();
  auto objective = [&](const Eigen::VectorXd& w, Eigen::VectorXd& g) {
    const Theta th = make_theta(w);
    const ThetaTerms tt(th);
    const std::size_t n = subjects.size();
    std::vector<double> ll(n);
    std::vector<Eigen::VectorXd> grads(n, Eigen::VectorXd::Zero(lay.size()));
    try {
      parallel_for(n, threads, [&](std::size_t i) {
        const Evaluator ev(subjects[i], tt);
        NodeTerms nt;
        ev.node(origin, nt);
        Accumulated acc;
        acc.add(1.0, nt, origin);
        ev.score(acc, lay, grads[i]);
        // Survival part only: remove the longitudinal and random-effect terms.
        ll[i] = -[&] {
          double H = nt.i0[0] + nt.i0[1];
          double out = -H;
          if (subjects[i].delta) {
            const int q = subjects[i].past_tau ? 1 : 0;
            const AffineDesign& hz = q ? *subjects[i].haz.post : subjects[i].haz.pre;
            out += tt.log_lk + (tt.kappa - 1.0) * subjects[i].log_T + hz.intercept.dot(tt.gamma) +
                   hz.slope.dot(tt.gamma) * subjects[i].T;
          }
          return out;
        }();
      });
    } catch (const EvaluationError&) {
      g.setZero(ns + 2);
      return std::numeric_limits<double>::infinity();
    }
    Eigen::VectorXd full = Eigen::VectorXd::Zero(lay.size());
    for (const auto& gi : grads) full += gi;
    g.resize(ns + 2);
    g.head(ns) = -full.segment(lay.gamma(), ns);
    g[ns] = -full[lay.lambda0()];
    g[ns + 1] = -full[lay.kappa()];
    return compensated_sum(ll);
  };
  LbfgsbOptions lo;
  lo.pg_tolerance = 1e-6;
  lo.max_iterations = 1000;
  const LbfgsbResult res = minimize_lbfgsb(objective, w0, bounds, lo);
  if (!std::isfinite(res.f)) throw FitError("initialization: Weibull relative-risk fit failed");
  return make_theta(res.x);
}

// Breslow cumulative baseline hazard at the distinct event times with the
// time-varying predictor at alpha = 0, then least squares of log H0 on log t.
// Returns false when the regression is not identified.
bool breslow_loglog(const std::vector<SubjectCache>& subjects, const Theta& theta,
                    double& lambda0, double& kappa) {
  const ThetaTerms tt(theta);
  std::map<double, double> deaths;
  for (const auto& sc : subjects) {
    if (sc.delta) deaths[sc.T] += 1.0;
  }
  if (deaths.size() < 2) return false;
  auto eta_at = [&](const SubjectCache& sc, double s) {
    const AffineDesign& hz = (s > sc.tau && sc.haz.post) ? *sc.haz.post : sc.haz.pre;
    return hz.intercept.dot(tt.gamma) + hz.slope.dot(tt.gamma) * s;
  };
  double cumulative = 0.0;
  std::vector<double> lx, ly;
  for (const auto& [s, d] : deaths) {
    double risk = 0.0;
    for (const auto& sc : subjects) {
      if (sc.T >= s) risk += std::exp(eta_at(sc, s));
    }
    cumulative += d / risk;
    lx.push_back(std::log(s));
    ly.push_back(std::log(cumulative));
  }
  const double n = static_cast<double>(lx.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t k = 0; k < lx.size(); ++k) {
    mx += lx[k];
    my += ly[k];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t k = 0; k < lx.size(); ++k) {
    sxx += (lx[k] - mx) * (lx[k] - mx);
    sxy += (lx[k] - mx) * (ly[k] - my);
  }
  if (!(sxx > 0.0)) return false;
  const double slope = sxy / sxx;
  const double intercept = my - slope * mx;
  if (!(slope > std::exp(kLogLower) && slope < std::exp(kLogUpper)) ||
      !(intercept > kLogLower && intercept < kLogUpper)) {
    return false;
  }
  kappa = slope;
  lambda0 = std::exp(intercept);
  return true;
}

}  // namespace

InitialValues initialize_theta(const std::vector<SubjectRecord>& data, const DesignConfig& cfg,
                               int threads) {
  SMARTJM_REQUIRE(!data.empty(), "initialize_theta: no subjects");
  cfg.validate();
  if (std::none_of(data.begin(), data.end(), [](const SubjectRecord& s) { return s.event; })) {
    throw FitError("initialization: no events in the data");
  }
  LmmOptions lo;
  lo.threads = threads;
  InitialValues out;
  out.lmm = fit_lmm(data, cfg, lo);

  const int n_cov = static_cast<int>(data.front().x0.size());
  const ParamLayout lay = ParamLayout::of(n_cov, cfg.coding);
  Theta th = unflatten(Eigen::VectorXd::Zero(lay.size()), lay);
  const Eigen::VectorXd& beta = out.lmm.beta;
  th.beta0 = beta[0];
  for (int k = 0; k < n_cov; ++k) th.beta_x[k] = beta[1 + k];
  th.beta_t = beta[lay.beta_t()];
  for (int k = 0; k < lay.n_slope; ++k) th.beta_trt[k] = beta[lay.beta_t() + 1 + k];
  th.sigma_eps = out.lmm.sigma_eps;
  th.sigma_b0 = std::sqrt(out.lmm.G(0, 0));
  th.sigma_b1 = std::sqrt(out.lmm.G(1, 1));
  th.rho = std::clamp(out.lmm.G(0, 1) / (th.sigma_b0 * th.sigma_b1), -0.99, 0.99);
  th.lambda0 = 1.0;
  th.kappa = 1.0;
  th.alpha = 0.0;

  std::vector<SubjectCache> caches;
  caches.reserve(data.size());
  for (const auto& s : data) caches.push_back(make_cache(s, cfg, nullptr));
  th = fit_weibull_rr(caches, th, threads);
  double lambda0 = th.lambda0, kappa = th.kappa;
  if (breslow_loglog(caches, th, lambda0, kappa)) {
    th.lambda0 = lambda0;
    th.kappa = kappa;
  }
  th.alpha = 0.0;
  out.theta = th;
  return out;
}

Information observed_information(const JointLikelihood& lik, const Theta& theta_hat) {
  const ParamLayout lay = ParamLayout::of(theta_hat);
  const Eigen::VectorXd w = to_working(theta_hat);
  const int p = lay.size();
  const double eps3 = std::cbrt(std::numeric_limits<double>::epsilon());
  Eigen::MatrixXd hess(p, p);
  Eigen::VectorXd gp, gm;
  for (int j = 0; j < p; ++j) {
    const double h = eps3 * std::max(1.0, std::abs(w[j]));
    Eigen::VectorXd wp = w, wm = w;
    wp[j] += h;
    wm[j] -= h;
    lik.loglik_and_score(from_working(wp, lay), gp);
    lik.loglik_and_score(from_working(wm, lay), gm);
    hess.col(j) = (gp - gm) / (wp[j] - wm[j]);
  }
  const Eigen::MatrixXd info = -0.5 * (hess + hess.transpose());
  if (!info.allFinite()) throw EstimationError("observed information is not finite");

  Information out;
  Eigen::LLT<Eigen::MatrixXd> llt(info);
  if (llt.info() == Eigen::Success) {
    out.vcov_working = llt.solve(Eigen::MatrixXd::Identity(p, p));
  } else {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(info);
    const Eigen::VectorXd ev = es.eigenvalues();
    const double cutoff = 1e-10 * std::max(1.0, ev.cwiseAbs().maxCoeff());
    Eigen::VectorXd inv = Eigen::VectorXd::Zero(p);
    for (int k = 0; k < p; ++k) {
      if (ev[k] > cutoff) inv[k] = 1.0 / ev[k];
    }
    out.vcov_working = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
    out.pseudo_inverse = true;
  }
  out.vcov_working = 0.5 * (out.vcov_working + out.vcov_working.transpose()).eval();
  const Eigen::VectorXd jac = natural_jacobian(w, lay);
  out.vcov = jac.asDiagonal() * out.vcov_working * jac.asDiagonal();
  out.se = out.vcov.diagonal().cwiseMax(0.0).cwiseSqrt();
  return out;
}

Information observed_information(const std::vector<SubjectRecord>& data, const Theta& theta_hat,
                                 const std::vector<SubjectQuadrature>& plans,
                                 const DesignConfig& cfg) {
  return observed_information(JointLikelihood(data, cfg, plans), theta_hat);
}

FitResult fit_joint_model(const std::vector<SubjectRecord>& data, const DesignConfig& cfg,
                          const FitOptions& opts) {
  const InitialValues init = initialize_theta(data, cfg, opts.threads);
  std::vector<SubjectQuadrature> plans = build_plans(data, init.lmm, cfg, opts.quadrature_order);
  const JointLikelihood lik(data, cfg, std::move(plans), opts.threads);
  const ParamLayout& lay = lik.layout();
  const BoxBounds bounds = working_bounds(lay);

  auto objective = [&](const Eigen::VectorXd& w, Eigen::VectorXd& g) {
    try {
      const double ll = lik.loglik_and_score(from_working(w, lay), g);
      g = -g;
      if (!std::isfinite(ll)) return std::numeric_limits<double>::infinity();
      return -ll;
    } catch (const EvaluationError&) {
      g.setZero(lay.size());
      return std::numeric_limits<double>::infinity();
    }
  };
  LbfgsbOptions lo;
  lo.memory = opts.memory;
  lo.max_iterations = opts.max_iterations;
  lo.pg_tolerance = opts.pg_tolerance;
  const LbfgsbResult res =
      minimize_lbfgsb(objective, project(to_working(init.theta), bounds), bounds, lo);

  FitResult fit;
  fit.working = res.x;
  fit.theta_hat = from_working(res.x, lay);
  fit.loglik = -res.f;
  fit.iterations = res.iterations;
  fit.projected_grad_norm = res.projected_grad_norm;
  fit.message = res.message;
  fit.converged = std::isfinite(res.f) &&
                  res.projected_grad_norm / std::max(1.0, std::abs(res.f)) <=
                      opts.relative_tolerance;
  if (opts.compute_vcov && std::isfinite(res.f)) {
    const Information info = observed_information(lik, fit.theta_hat);
    fit.vcov = info.vcov;
    fit.vcov_working = info.vcov_working;
    fit.se = info.se;
    fit.pseudo_inverse = info.pseudo_inverse;
  }
  return fit;
}

}  // namespace smartjm
