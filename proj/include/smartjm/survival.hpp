#pragma once

// Weibull relative-risk survival submodel on the model clock.

#include <optional>
#include <span>
#include <vector>

#include "smartjm/model.hpp"

namespace smartjm {

// Largest |eta| accepted anywhere on an integration range.
inline constexpr double kMaxLinearPredictor = 50.0;

double baseline_hazard(double t, double lambda0, double kappa);

struct HazardContext {
  std::span<const double> x0;
  RandomEffects b{0.0, 0.0};
  Treatment v1 = Treatment::A;
  std::optional<Treatment> v2;
  const Theta& theta;
  const DesignConfig& cfg;
};

double hazard(double t, const HazardContext& ctx);

// H(T) as a stage-1 piece on [0, min(T, tau)] plus, for T > tau, a stage-2
// piece on (tau, T]; each piece integrated by Gauss-Kronrod.
double cumulative_hazard(double t, const HazardContext& ctx);

inline double survival_probability(double t, const HazardContext& ctx) {
  return std::exp(-cumulative_hazard(t, ctx));
}

// delta * log h(T) - H(T).
double survival_logdensity(double t, bool delta, const HazardContext& ctx);

// Gauss-Kronrod nodes covering [a, b] with `panels` equal panels.
struct PieceNodes {
  std::vector<double> t;
  std::vector<double> weight;  // includes the panel half-width
  std::vector<double> log_t;

  static PieceNodes on(double a, double b, int panels = 1);
  bool empty() const { return t.empty(); }
};

// Integrals over one piece of h(u) = h0(u) exp(c + d u):
//   zeroth = int h, first = int u h, log = int log(u) h.
struct HazardMoments {
  double zeroth = 0.0;
  double first = 0.0;
  double log = 0.0;
};

// `baseline_weights[k]` must equal nodes.weight[k] * h0(nodes.t[k]).
HazardMoments piece_moments(const PieceNodes& nodes, std::span<const double> baseline_weights,
                            const LinearPiece& eta);

void baseline_weights(const PieceNodes& nodes, double lambda0, double kappa,
                      std::vector<double>& out);

// Throws EvaluationError when |c + d t| exceeds kMaxLinearPredictor on [a, b].
void check_predictor_range(const LinearPiece& eta, double a, double b);

// Cumulative hazard at every point of a fixed time grid. Each gap between
// consecutive grid points (split at tau) is one Gauss-Kronrod panel, so the
// value at grid point j sums the panels up to t_j.
class CumulativeHazardGrid {
 public:
  CumulativeHazardGrid(std::vector<double> times, double tau, double lambda0, double kappa);

  const std::vector<double>& times() const { return times_; }

  // out[j] = H(times[j]); eta.post is required when the grid extends past tau.
  void evaluate(const PiecewiseLinear& eta, std::span<double> out) const;

 private:
  struct Panel {
    double a;
    bool post;
    int width_id;
    int ends_at;  // grid index reached after this panel
  };
  std::vector<double> times_;
  double tau_;
  std::vector<Panel> panels_;
  std::vector<double> half_widths_;
  std::vector<double> baseline_;  // 15 per panel
};

}  // namespace smartjm
