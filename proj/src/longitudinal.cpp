#include "smartjm/longitudinal.hpp"

#include <cmath>
#include <numbers>

#include "smartjm/errors.hpp"
#include "smartjm/optimizer.hpp"
#include "smartjm/parallel.hpp"

namespace smartjm {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

}  // namespace

Eigen::Matrix2d random_effects_cov(double sigma_b0, double sigma_b1, double rho) {
  Eigen::Matrix2d g;
  g << sigma_b0 * sigma_b0, rho * sigma_b0 * sigma_b1, rho * sigma_b0 * sigma_b1,
      sigma_b1 * sigma_b1;
  return g;
}

LongitudinalDesign longitudinal_design(const SubjectRecord& s, const DesignConfig& cfg) {
  SMARTJM_REQUIRE(s.times.size() == s.values.size(), "longitudinal_design: length mismatch");
  const PieceDesign form = trajectory_design(s.x0, s.v1, s.v2, cfg);
  const double tau = cfg.tau_model();
  const auto n = static_cast<Eigen::Index>(s.times.size());
  LongitudinalDesign d;
  d.y.resize(n);
  d.t.resize(n);
  d.X.resize(n, form.pre.intercept.size());
  d.Z.resize(n, 2);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double t = cfg.to_model(s.times[j]);
    const AffineDesign* piece = &form.pre;
    if (t > tau) {
      if (!form.post) {
        throw PreconditionError("subject " + std::to_string(s.id) +
                                ": measurement after tau without a stage-2 treatment");
      }
      piece = &*form.post;
    }
    d.y[j] = s.values[j];
    d.t[j] = t;
    d.X.row(j) = (piece->intercept + piece->slope * t).transpose();
    d.Z(j, 0) = 1.0;
    d.Z(j, 1) = t;
  }
  return d;
}

double lmm_conditional_logdensity(const Eigen::VectorXd& y, const Eigen::MatrixXd& X,
                                  const Eigen::MatrixXd& Z, const Eigen::Vector2d& b,
                                  const Eigen::VectorXd& beta, double sigma_eps) {
  if (X.rows() != y.size() || Z.rows() != y.size() || X.cols() != beta.size() || Z.cols() != 2) {
    throw PreconditionError("lmm_conditional_logdensity: dimension mismatch");
  }
  SMARTJM_REQUIRE(sigma_eps > 0.0, "lmm_conditional_logdensity: sigma_eps must be positive");
  const Eigen::VectorXd r = y - X * beta - Z * b;
  const double n = static_cast<double>(y.size());
  const double s2 = sigma_eps * sigma_eps;
  return -0.5 * n * (kLog2Pi + std::log(s2)) - 0.5 * r.squaredNorm() / s2;
}

namespace {

struct LmmParams {
  Eigen::VectorXd beta;
  double sigma_eps;
  double sigma_b0;
  double sigma_b1;
  double rho;
};

LmmParams from_working(const Eigen::VectorXd& w, int p) {
  return LmmParams{w.head(p), std::exp(w[p]), std::exp(w[p + 1]), std::exp(w[p + 2]),
                   std::tanh(w[p + 3])};
}

// Subject loglik and (optionally) its working-scale gradient.
double subject_marginal(const LongitudinalDesign& d, const LmmParams& par,
                        Eigen::VectorXd* grad) {
  const Eigen::Matrix2d G = random_effects_cov(par.sigma_b0, par.sigma_b1, par.rho);
  const double s2 = par.sigma_eps * par.sigma_eps;
  const Eigen::Index n = d.y.size();
  Eigen::MatrixXd V = d.Z * G * d.Z.transpose();
  V.diagonal().array() += s2;
  Eigen::LLT<Eigen::MatrixXd> llt(V);
  if (llt.info() != Eigen::Success) throw DecompositionError("LMM marginal covariance is not PD");
  const Eigen::VectorXd r = d.y - d.X * par.beta;
  const Eigen::VectorXd a = llt.solve(r);
  const Eigen::MatrixXd L = llt.matrixL();
  const double logdet = 2.0 * L.diagonal().array().log().sum();
  const double ll = -0.5 * (static_cast<double>(n) * kLog2Pi + logdet + r.dot(a));
  if (grad) {
    const int p = static_cast<int>(par.beta.size());
    const Eigen::MatrixXd Vinv = llt.solve(Eigen::MatrixXd::Identity(n, n));
    const Eigen::MatrixXd A = a * a.transpose() - Vinv;
    const Eigen::Matrix2d M = d.Z.transpose() * A * d.Z;
    grad->head(p) += d.X.transpose() * a;
    (*grad)[p] += s2 * A.trace();
    const double s0 = par.sigma_b0, s1 = par.sigma_b1, rho = par.rho;
    Eigen::Matrix2d dG;
    dG << 2 * s0 * s0, rho * s0 * s1, rho * s0 * s1, 0.0;
    (*grad)[p + 1] += 0.5 * (M.cwiseProduct(dG)).sum();
    dG << 0.0, rho * s0 * s1, rho * s0 * s1, 2 * s1 * s1;
    (*grad)[p + 2] += 0.5 * (M.cwiseProduct(dG)).sum();
    dG << 0.0, s0 * s1, s0 * s1, 0.0;
    (*grad)[p + 3] += 0.5 * (1.0 - rho * rho) * (M.cwiseProduct(dG)).sum();
  }
  return ll;
}

double total_marginal(const std::vector<LongitudinalDesign>& designs, const LmmParams& par,
                      Eigen::VectorXd* grad, int threads) {
  const std::size_t n = designs.size();
  std::vector<double> ll(n);
  std::vector<Eigen::VectorXd> grads;
  const Eigen::Index dim = par.beta.size() + 4;
  if (grad) grads.assign(n, Eigen::VectorXd::Zero(dim));
  parallel_for(n, threads, [&](std::size_t i) {
    ll[i] = subject_marginal(designs[i], par, grad ? &grads[i] : nullptr);
  });
  if (grad) {
    grad->setZero(dim);
    for (Eigen::Index k = 0; k < dim; ++k) {
      CompensatedSum s;
      for (std::size_t i = 0; i < n; ++i) s.add(grads[i][k]);
      (*grad)[k] = s.value();
    }
  }
  return compensated_sum(ll);
}

// Crude moment-based start: OLS for beta, per-subject (intercept, slope)
// regressions of the OLS residuals for G and sigma_eps.
Eigen::VectorXd starting_point(const std::vector<LongitudinalDesign>& designs) {
  const int p = static_cast<int>(designs.front().X.cols());
  Eigen::MatrixXd xtx = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd xty = Eigen::VectorXd::Zero(p);
  for (const auto& d : designs) {
    xtx += d.X.transpose() * d.X;
    xty += d.X.transpose() * d.y;
  }
  xtx.diagonal().array() += 1e-10;
  const Eigen::VectorXd beta = xtx.ldlt().solve(xty);

  std::vector<Eigen::Vector2d> coefs;
  double within = 0.0;
  double dof = 0.0;
  for (const auto& d : designs) {
    const Eigen::VectorXd e = d.y - d.X * beta;
    if (d.y.size() >= 3 && (d.t.maxCoeff() - d.t.minCoeff()) > 0) {
      const Eigen::Matrix2d ztz = d.Z.transpose() * d.Z;
      const Eigen::Vector2d c = ztz.ldlt().solve(d.Z.transpose() * e);
      coefs.push_back(c);
      within += (e - d.Z * c).squaredNorm();
      dof += static_cast<double>(d.y.size() - 2);
    }
  }
  double s_eps = 0.5;
  Eigen::Matrix2d G = Eigen::Matrix2d::Identity() * 0.25;
  if (coefs.size() >= 3 && dof > 0) {
    s_eps = std::sqrt(std::max(within / dof, 1e-6));
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    for (const auto& c : coefs) mean += c;
    mean /= static_cast<double>(coefs.size());
    G.setZero();
    for (const auto& c : coefs) G += (c - mean) * (c - mean).transpose();
    G /= static_cast<double>(coefs.size() - 1);
  }
  const double s0 = std::sqrt(std::max(G(0, 0), 1e-4));
  const double s1 = std::sqrt(std::max(G(1, 1), 1e-4));
  const double rho = std::clamp(G(0, 1) / (s0 * s1), -0.9, 0.9);
  Eigen::VectorXd w(p + 4);
  w.head(p) = beta;
  w[p] = std::log(s_eps);
  w[p + 1] = std::log(s0);
  w[p + 2] = std::log(s1);
  w[p + 3] = std::atanh(rho);
  return w;
}

}  // namespace

double lmm_marginal_loglik(const std::vector<LongitudinalDesign>& designs,
                           const Eigen::VectorXd& beta, double sigma_eps,
                           const Eigen::Matrix2d& G, int threads) {
  const double s0 = std::sqrt(G(0, 0));
  const double s1 = std::sqrt(G(1, 1));
  const double rho = (s0 > 0 && s1 > 0) ? G(0, 1) / (s0 * s1) : 0.0;
  return total_marginal(designs, LmmParams{beta, sigma_eps, s0, s1, rho}, nullptr, threads);
}

LmmFit fit_lmm(const std::vector<SubjectRecord>& data, const DesignConfig& cfg,
               const LmmOptions& opts) {
  std::vector<LongitudinalDesign> designs;
  designs.reserve(data.size());
  for (const auto& s : data) designs.push_back(longitudinal_design(s, cfg));
  return fit_lmm(designs, opts);
}

LmmFit fit_lmm(const std::vector<LongitudinalDesign>& designs, const LmmOptions& opts) {
  int with_two = 0;
  for (const auto& d : designs) with_two += d.y.size() >= 2 ? 1 : 0;
  if (with_two < 2) {
    throw PreconditionError("fit_lmm: need at least 2 subjects with 2 or more measurements");
  }
  const int p = static_cast<int>(designs.front().X.cols());
  const Eigen::Index dim = p + 4;

  BoxBounds bounds{Eigen::VectorXd::Constant(dim, -1e6), Eigen::VectorXd::Constant(dim, 1e6)};
  bounds.lower.segment(p, 3).setConstant(-8.0);
  bounds.upper.segment(p, 3).setConstant(4.0);
  bounds.lower[p + 3] = -5.0;
  bounds.upper[p + 3] = 5.0;

  auto objective = [&](const Eigen::VectorXd& w, Eigen::VectorXd& g) {
    try {
      const double ll = total_marginal(designs, from_working(w, p), &g, opts.threads);
      g = -g;
      return -ll;
    } catch (const DecompositionError&) {
      g.setZero(dim);
      return std::numeric_limits<double>::infinity();
    }
  };
  LbfgsbOptions lo;
  lo.max_iterations = opts.max_iterations;
  lo.pg_tolerance = opts.pg_tolerance;
  const LbfgsbResult res = minimize_lbfgsb(objective, project(starting_point(designs), bounds),
                                           bounds, lo);
  // Relative criterion as for the joint model.
  const bool ok = res.converged ||
                  res.projected_grad_norm <= 1e-3 * std::max(1.0, std::abs(res.f));
  if (!ok) {
    throw FitError("fit_lmm: no convergence after " + std::to_string(res.iterations) +
                   " iterations (" + res.message + ", projected gradient " +
                   std::to_string(res.projected_grad_norm) + ")");
  }
  const LmmParams par = from_working(res.x, p);
  LmmFit fit;
  fit.beta = par.beta;
  fit.sigma_eps = par.sigma_eps;
  fit.G = random_effects_cov(par.sigma_b0, par.sigma_b1, par.rho);
  fit.loglik = -res.f;
  fit.converged = true;
  fit.iterations = res.iterations;
  fit.projected_grad_norm = res.projected_grad_norm;
  return fit;
}

EbEstimate empirical_bayes(const LongitudinalDesign& d, const LmmFit& fit) {
  SMARTJM_REQUIRE(d.y.size() >= 1, "empirical_bayes: subject has no measurements");
  Eigen::LLT<Eigen::Matrix2d> g_llt(fit.G);
  if (g_llt.info() != Eigen::Success) throw DecompositionError("empirical_bayes: G is not PD");
  const double s2 = fit.sigma_eps * fit.sigma_eps;
  EbEstimate eb;
  eb.curvature = d.Z.transpose() * d.Z / s2 + g_llt.solve(Eigen::Matrix2d::Identity());
  eb.curvature = 0.5 * (eb.curvature + eb.curvature.transpose()).eval();
  Eigen::LLT<Eigen::Matrix2d> h_llt(eb.curvature);
  if (h_llt.info() != Eigen::Success) {
    throw DecompositionError("empirical_bayes: posterior curvature is not PD");
  }
  eb.mode = h_llt.solve(d.Z.transpose() * (d.y - d.X * fit.beta) / s2);
  return eb;
}

EbEstimate empirical_bayes(const SubjectRecord& s, const LmmFit& fit, const DesignConfig& cfg) {
  return empirical_bayes(longitudinal_design(s, cfg), fit);
}

}  // namespace smartjm
