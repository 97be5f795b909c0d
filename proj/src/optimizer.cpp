#include "smartjm/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>

#include "smartjm/errors.hpp"

namespace smartjm {

Eigen::VectorXd project(const Eigen::VectorXd& x, const BoxBounds& bounds) {
  return x.cwiseMax(bounds.lower).cwiseMin(bounds.upper);
}

double projected_gradient_norm(const Eigen::VectorXd& x, const Eigen::VectorXd& g,
                               const BoxBounds& bounds) {
  return (project(x - g, bounds) - x).lpNorm<Eigen::Infinity>();
}

namespace {

struct Pair {
  Eigen::VectorXd s;
  Eigen::VectorXd y;
};

Eigen::VectorXd free_mask(const Eigen::VectorXd& x, const Eigen::VectorXd& g,
                          const BoxBounds& bounds) {
  Eigen::VectorXd mask = Eigen::VectorXd::Ones(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if ((x[i] <= bounds.lower[i] && g[i] > 0) || (x[i] >= bounds.upper[i] && g[i] < 0)) {
      mask[i] = 0.0;
    }
  }
  return mask;
}

// Two-loop recursion restricted to the free variables.
Eigen::VectorXd lbfgs_direction(const Eigen::VectorXd& g, const Eigen::VectorXd& mask,
                                const std::deque<Pair>& memory) {
  Eigen::VectorXd q = g.cwiseProduct(mask);
  const std::size_t m = memory.size();
  std::vector<double> alpha(m, 0.0), rho(m, 0.0);
  double gamma = 1.0;
  bool have_scale = false;
  for (std::size_t j = m; j-- > 0;) {
    const Eigen::VectorXd s = memory[j].s.cwiseProduct(mask);
    const Eigen::VectorXd y = memory[j].y.cwiseProduct(mask);
    const double sy = s.dot(y);
    if (sy <= 1e-12 * s.norm() * y.norm() || sy <= 0.0) continue;
    rho[j] = 1.0 / sy;
    alpha[j] = rho[j] * s.dot(q);
    q -= alpha[j] * y;
    if (!have_scale) {
      gamma = sy / y.squaredNorm();
      have_scale = true;
    }
  }
  Eigen::VectorXd r = gamma * q;
  for (std::size_t j = 0; j < m; ++j) {
    if (rho[j] == 0.0) continue;
    const Eigen::VectorXd s = memory[j].s.cwiseProduct(mask);
    const Eigen::VectorXd y = memory[j].y.cwiseProduct(mask);
    const double beta = rho[j] * y.dot(r);
    r += s * (alpha[j] - beta);
  }
  return -r.cwiseProduct(mask);
}

}  // namespace

LbfgsbResult minimize_lbfgsb(const ObjectiveWithGradient& objective, Eigen::VectorXd x0,
                             const BoxBounds& bounds, const LbfgsbOptions& opts) {
  const Eigen::Index n = x0.size();
  SMARTJM_REQUIRE(bounds.lower.size() == n && bounds.upper.size() == n,
                  "minimize_lbfgsb: bounds have the wrong dimension");
  SMARTJM_REQUIRE((bounds.lower.array() <= bounds.upper.array()).all(),
                  "minimize_lbfgsb: lower bound exceeds upper bound");

  LbfgsbResult res;
  Eigen::VectorXd x = project(x0, bounds);
  Eigen::VectorXd g(n);
  double f = objective(x, g);
  res.evaluations = 1;
  if (!std::isfinite(f) || !g.allFinite()) {
    res.x = x;
    res.f = f;
    res.gradient = g;
    res.message = "objective is not finite at the starting point";
    return res;
  }

  std::deque<Pair> memory;
  int stagnant = 0;
  for (res.iterations = 0; res.iterations < opts.max_iterations; ++res.iterations) {
    const double pg = projected_gradient_norm(x, g, bounds);
    if (pg <= opts.pg_tolerance) {
      res.converged = true;
      res.message = "projected gradient below tolerance";
      break;
    }
    const Eigen::VectorXd mask = free_mask(x, g, bounds);
    Eigen::VectorXd d = lbfgs_direction(g, mask, memory);
    double slope = g.dot(d);
    double step = 1.0;
    if (memory.empty() || !(slope < 0.0)) {
      memory.clear();
      d = -g.cwiseProduct(mask);
      slope = g.dot(d);
      step = std::min(1.0, 1.0 / std::max(1e-300, d.lpNorm<Eigen::Infinity>()));
    }

    Eigen::VectorXd x_new(n), g_new(n);
    double f_new = std::numeric_limits<double>::infinity();
    bool accepted = false;
    for (int ls = 0; ls < opts.max_line_search; ++ls) {
      x_new = project(x + step * d, bounds);
      const Eigen::VectorXd dx = x_new - x;
      if (dx.lpNorm<Eigen::Infinity>() == 0.0) break;
      f_new = objective(x_new, g_new);
      ++res.evaluations;
      const double decrease = g.dot(dx);
      if (std::isfinite(f_new) && g_new.allFinite() && f_new <= f + 1e-4 * decrease) {
        accepted = true;
        break;
      }
      double next = 0.5 * step;
      if (std::isfinite(f_new)) {
        // Minimizer of the quadratic through f, slope and f_new, safeguarded.
        const double denom = 2.0 * (f_new - f - slope * step);
        if (denom > 0.0) next = std::clamp(-slope * step * step / denom, 0.1 * step, 0.5 * step);
      }
      step = next;
    }
    if (!accepted) {
      if (!memory.empty()) {
        memory.clear();
        continue;
      }
      res.message = "line search failed";
      break;
    }

    Pair pair{x_new - x, g_new - g};
    if (pair.s.dot(pair.y) > 1e-12 * pair.s.norm() * pair.y.norm()) {
      memory.push_back(std::move(pair));
      if (static_cast<int>(memory.size()) > opts.memory) memory.pop_front();
    }
    const double reduction = f - f_new;
    x = x_new;
    g = g_new;
    f = f_new;
    if (reduction <= opts.f_tolerance * std::max({1.0, std::abs(f)})) {
      if (++stagnant >= 3) {
        res.message = "objective stagnated";
        ++res.iterations;
        break;
      }
    } else {
      stagnant = 0;
    }
  }
  res.x = x;
  res.f = f;
  res.gradient = g;
  res.projected_grad_norm = projected_gradient_norm(x, g, bounds);
  if (!res.converged && res.projected_grad_norm <= opts.pg_tolerance) res.converged = true;
  if (res.message.empty()) res.message = "iteration limit reached";
  return res;
}

}  // namespace smartjm
