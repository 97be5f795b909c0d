#include "smartjm/survival.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "smartjm/errors.hpp"
#include "smartjm/quadrature.hpp"

namespace smartjm {

double baseline_hazard(double t, double lambda0, double kappa) {
  if (!(t > 0.0)) throw PreconditionError("baseline_hazard: t must be positive");
  return lambda0 * kappa * std::pow(t, kappa - 1.0);
}

void check_predictor_range(const LinearPiece& eta, double a, double b) {
  const double lo = eta(a);
  const double hi = eta(b);
  if (!(std::abs(lo) <= kMaxLinearPredictor && std::abs(hi) <= kMaxLinearPredictor)) {
    throw EvaluationError("linear predictor outside the bounded domain (|eta| > 50)");
  }
}

double hazard(double t, const HazardContext& ctx) {
  const double eta = linear_predictor(t, ctx.x0, ctx.b, ctx.v1, ctx.v2, ctx.theta, ctx.cfg);
  if (std::abs(eta) > kMaxLinearPredictor) {
    throw EvaluationError("linear predictor outside the bounded domain (|eta| > 50)");
  }
  return baseline_hazard(t, ctx.theta.lambda0, ctx.theta.kappa) * std::exp(eta);
}

PieceNodes PieceNodes::on(double a, double b, int panels) {
  PieceNodes out;
  if (!(b > a)) return out;
  const auto& rule = GaussKronrod15::get();
  const double width = (b - a) / panels;
  for (int p = 0; p < panels; ++p) {
    const double lo = a + p * width;
    const double half = 0.5 * width;
    for (int k = 0; k < 15; ++k) {
      const double t = half * (rule.nodes[k] + 1.0) + lo;
      out.t.push_back(t);
      out.weight.push_back(half * rule.weights[k]);
      out.log_t.push_back(std::log(t));
    }
  }
  return out;
}

void baseline_weights(const PieceNodes& nodes, double lambda0, double kappa,
                      std::vector<double>& out) {
  out.resize(nodes.t.size());
  const double scale = lambda0 * kappa;
  for (std::size_t k = 0; k < nodes.t.size(); ++k) {
    out[k] = nodes.weight[k] * scale * std::exp((kappa - 1.0) * nodes.log_t[k]);
  }
}

HazardMoments piece_moments(const PieceNodes& nodes, std::span<const double> bw,
                            const LinearPiece& eta) {
  HazardMoments m;
  for (std::size_t k = 0; k < nodes.t.size(); ++k) {
    const double h = bw[k] * std::exp(eta(nodes.t[k]));
    m.zeroth += h;
    m.first += h * nodes.t[k];
    m.log += h * nodes.log_t[k];
  }
  return m;
}

double cumulative_hazard(double t, const HazardContext& ctx) {
  if (!(t >= 0.0)) throw PreconditionError("cumulative_hazard: t must be nonnegative");
  const double tau = ctx.cfg.tau_model();
  const PiecewiseLinear eta =
      predictor_pieces(ctx.x0, ctx.b, ctx.v1, ctx.v2, ctx.theta, ctx.cfg);
  std::vector<double> bw;

  const double t1 = std::min(t, tau);
  double total = 0.0;
  if (t1 > 0.0) {
    check_predictor_range(eta.pre, 0.0, t1);
    const PieceNodes pre = PieceNodes::on(0.0, t1);
    baseline_weights(pre, ctx.theta.lambda0, ctx.theta.kappa, bw);
    total += piece_moments(pre, bw, eta.pre).zeroth;
  }
  if (t > tau) {
    if (!eta.post) throw PreconditionError("cumulative_hazard: t > tau requires v2");
    check_predictor_range(*eta.post, tau, t);
    const PieceNodes post = PieceNodes::on(tau, t, ctx.cfg.post_tau_panels);
    baseline_weights(post, ctx.theta.lambda0, ctx.theta.kappa, bw);
    total += piece_moments(post, bw, *eta.post).zeroth;
  }
  if (!std::isfinite(total)) throw EvaluationError("cumulative_hazard: non-finite value");
  return total;
}

double survival_logdensity(double t, bool delta, const HazardContext& ctx) {
  if (!(t > 0.0)) throw PreconditionError("survival_logdensity: T must be positive");
  double out = -cumulative_hazard(t, ctx);
  if (delta) out += std::log(hazard(t, ctx));
  return out;
}

CumulativeHazardGrid::CumulativeHazardGrid(std::vector<double> times, double tau,
                                           double lambda0, double kappa)
    : times_(std::move(times)), tau_(tau) {
  if (times_.empty() || times_.front() != 0.0 ||
      !std::is_sorted(times_.begin(), times_.end())) {
    throw PreconditionError("CumulativeHazardGrid: grid must be ascending from 0");
  }
  const auto& rule = GaussKronrod15::get();
  auto width_id = [&](double half) {
    for (std::size_t i = 0; i < half_widths_.size(); ++i) {
      if (std::abs(half_widths_[i] - half) <= 1e-14 * half) return static_cast<int>(i);
    }
    half_widths_.push_back(half);
    return static_cast<int>(half_widths_.size() - 1);
  };
  auto add_panel = [&](double a, double b, bool post, int ends_at) {
    const double half = 0.5 * (b - a);
    panels_.push_back(Panel{a, post, width_id(half), ends_at});
    for (int k = 0; k < 15; ++k) {
      const double u = half * (rule.nodes[k] + 1.0) + a;
      baseline_.push_back(half * rule.weights[k] * lambda0 * kappa * std::pow(u, kappa - 1.0));
    }
  };
  for (std::size_t j = 1; j < times_.size(); ++j) {
    const double a = times_[j - 1];
    const double b = times_[j];
    if (b == a) {
      continue;
    }
    if (a < tau_ && b > tau_) {
      add_panel(a, tau_, false, -1);
      add_panel(tau_, b, true, static_cast<int>(j));
    } else {
      add_panel(a, b, a >= tau_, static_cast<int>(j));
    }
  }
}

void CumulativeHazardGrid::evaluate(const PiecewiseLinear& eta, std::span<double> out) const {
  SMARTJM_REQUIRE(out.size() == times_.size(), "CumulativeHazardGrid: output size mismatch");
  const auto& rule = GaussKronrod15::get();
  const double t_end = times_.back();
  check_predictor_range(eta.pre, 0.0, std::min(t_end, tau_));
  const bool needs_post = t_end > tau_;
  if (needs_post) {
    if (!eta.post) throw PreconditionError("CumulativeHazardGrid: grid passes tau without v2");
    check_predictor_range(*eta.post, tau_, t_end);
  }
  // exp(d * offset_k) for every (piece, panel width, node).
  const std::size_t nw = half_widths_.size();
  // Slot 15 holds exp(d * width), which advances exp(eta(a)) across a panel.
  std::vector<std::array<double, 16>> factor(2 * nw);
  for (int piece = 0; piece < (needs_post ? 2 : 1); ++piece) {
    const double d = piece == 0 ? eta.pre.slope : eta.post->slope;
    for (std::size_t w = 0; w < nw; ++w) {
      for (int k = 0; k < 15; ++k) {
        factor[piece * nw + w][k] = std::exp(d * half_widths_[w] * (rule.nodes[k] + 1.0));
      }
      factor[piece * nw + w][15] = std::exp(2.0 * d * half_widths_[w]);
    }
  }
  std::fill(out.begin(), out.end(), 0.0);
  double running = 0.0;
  std::size_t last = 0;
  double level = 0.0;
  for (std::size_t p = 0; p < panels_.size(); ++p) {
    const Panel& panel = panels_[p];
    const LinearPiece& piece = panel.post ? *eta.post : eta.pre;
    const auto& f = factor[(panel.post ? nw : 0) + panel.width_id];
    const double* bw = baseline_.data() + 15 * p;
    double s = 0.0;
    for (int k = 0; k < 15; ++k) s += bw[k] * f[k];
    if (p == 0 || panel.post != panels_[p - 1].post) level = std::exp(piece(panel.a));
    running += level * s;
    level *= f[15];
    if (panel.ends_at >= 0) {
      for (std::size_t j = last + 1; j <= static_cast<std::size_t>(panel.ends_at); ++j) {
        out[j] = running;
      }
      last = panel.ends_at;
    }
  }
  for (std::size_t j = last + 1; j < out.size(); ++j) out[j] = running;
}

}  // namespace smartjm
