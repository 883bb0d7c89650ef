#pragma once

// Closed-form constants and predicted fractal exponents for the 4-d
// membrane model, plus the 2-d DGFF calibration values.

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace membrane::theory {

/// Variance growth rate of the 4-d membrane model: Var(phi_x) ~ g log N.
constexpr double g_const() { return 8.0 / (std::numbers::pi * std::numbers::pi); }

/// Variance growth rate of the 2-d DGFF with the random-walk normalization
/// (literature value, used only to calibrate the estimator pipeline).
constexpr double dgff_g_const() { return 2.0 / std::numbers::pi; }

/// max phi / log N -> sqrt(2 d g) for a log-correlated field on N^d sites.
inline double max_rate(int d, double g) { return std::sqrt(2.0 * d * g); }

/// 2 sqrt(2 g), the 4-d membrane case of max_rate.
inline double max_rate() { return 2.0 * std::sqrt(2.0 * g_const()); }

namespace detail {
inline void require(bool ok, const char* what) {
  if (!ok) throw std::domain_error(what);
}
}  // namespace detail

/// Fractal dimension of eta-high points: 4(1 - eta^2).
inline double high_point_dim(double eta) {
  detail::require(eta > 0 && eta < 1, "high_point_dim: eta must lie in (0, 1)");
  return 4.0 * (1.0 - eta * eta);
}

/// 2-d DGFF analogue 2(1 - eta^2); external literature value.
inline double dgff_high_point_dim(double eta) {
  detail::require(eta > 0 && eta < 1, "dgff_high_point_dim: eta must lie in (0, 1)");
  return 2.0 * (1.0 - eta * eta);
}

/// High points around a fixed bulk point: 4 beta (1 - (alpha/beta)^2), alpha < beta.
inline double cluster_dim(double alpha, double beta) {
  detail::require(alpha > 0 && alpha < beta && beta < 1,
                  "cluster_dim: need 0 < alpha < beta < 1");
  const double r = alpha / beta;
  return 4.0 * beta * (1.0 - r * r);
}

/// Same count conditioned on the center being alpha-high: 4 beta (1 - alpha^2).
inline double cluster_dim_conditional(double alpha, double beta) {
  detail::require(alpha > 0 && alpha < 1 && beta > 0 && beta < 1,
                  "cluster_dim_conditional: need alpha, beta in (0, 1)");
  return 4.0 * beta * (1.0 - alpha * alpha);
}

/// F_{h,beta}(gamma) = gamma^2 (1 - beta) + h (1 - gamma (1 - beta))^2 / beta.
inline double F(double h, double beta, double gamma) {
  detail::require(beta > 0 && beta < 1, "F: beta must lie in (0, 1)");
  const double t = 1.0 - gamma * (1.0 - beta);
  return gamma * gamma * (1.0 - beta) + h * t * t / beta;
}

/// Unconstrained minimizer of F_{2,beta}: 2 / (2 - beta). Also its fixed point.
inline double gamma_star(double beta) {
  detail::require(beta > 0 && beta < 1, "gamma_star: beta must lie in (0, 1)");
  return 2.0 / (2.0 - beta);
}

/// Right end of the admissible interval [0, 1/alpha].
inline double gamma_plus(double alpha) {
  detail::require(alpha > 0 && alpha < 1, "gamma_plus: alpha must lie in (0, 1)");
  return 1.0 / alpha;
}

struct RhoResult {
  double value = 0;        // 4 + 4 beta - 4 alpha^2 inf F_{2,beta}
  double minimizer = 0;    // argmin over [0, 1/alpha]
  double infimum = 0;      // inf F_{2,beta} over [0, 1/alpha]
  double F_at_one = 0;     // F_{2,beta}(1) = 1 + beta
};

/// Pair-of-high-points exponent. F_{2,beta} is a convex quadratic, so the
/// minimizer on [0, 1/alpha] is min(gamma_star, 1/alpha).
inline RhoResult rho_detail(double alpha, double beta) {
  detail::require(alpha > 0 && alpha < 1 && beta > 0 && beta < 1,
                  "rho: need alpha, beta in (0, 1)");
  RhoResult r;
  r.minimizer = std::min(gamma_star(beta), gamma_plus(alpha));
  r.infimum = F(2.0, beta, r.minimizer);
  r.F_at_one = F(2.0, beta, 1.0);
  r.value = 4.0 + 4.0 * beta - 4.0 * alpha * alpha * r.infimum;
  return r;
}

inline double rho(double alpha, double beta) { return rho_detail(alpha, beta).value; }

/// Same exponent with the infimum taken over gamma grids: a coarse pass over
/// [0, 1/alpha], then a pass with the given step around the coarse winner.
inline double rho_grid(double alpha, double beta, double step = 1e-5) {
  detail::require(alpha > 0 && alpha < 1 && beta > 0 && beta < 1,
                  "rho_grid: need alpha, beta in (0, 1)");
  const double top = 1.0 / alpha;
  auto scan = [&](double lo, double hi, double h, double& arg) {
    double best = F(2.0, beta, lo);
    arg = lo;
    const long steps = long(std::ceil((hi - lo) / h));
    for (long i = 1; i <= steps; ++i) {
      const double g = std::min(hi, lo + i * h);
      const double v = F(2.0, beta, g);
      if (v < best) best = v, arg = g;
    }
    return best;
  };
  const double coarse = 1e-2;
  double arg = 0;
  scan(0.0, top, coarse, arg);
  const double best = scan(std::max(0.0, arg - coarse), std::min(top, arg + coarse), step, arg);
  return 4.0 + 4.0 * beta - 4.0 * alpha * alpha * best;
}

/// Biggest uniformly high box: log D_N / log N -> (1 - eta) / 2.
inline double square_exp(double eta) {
  detail::require(eta > -1 && eta < 1, "square_exp: eta must lie in (-1, 1)");
  return (1.0 - eta) / 2.0;
}

struct Prediction {
  std::string name;
  std::vector<std::pair<std::string, double>> parameters;
  double value = 0;
  std::string provenance;
};

inline Prediction predict_high_points(double eta) {
  return {"high_point_dim", {{"eta", eta}}, high_point_dim(eta), "membrane: 4(1-eta^2)"};
}
inline Prediction predict_dgff_high_points(double eta) {
  return {"dgff_high_point_dim", {{"eta", eta}}, dgff_high_point_dim(eta),
          "external: 2-d DGFF 2(1-eta^2)"};
}
inline Prediction predict_cluster(double alpha, double beta) {
  return {"cluster_dim", {{"alpha", alpha}, {"beta", beta}}, cluster_dim(alpha, beta),
          "membrane: 4 beta (1-(alpha/beta)^2)"};
}
inline Prediction predict_cluster_conditional(double alpha, double beta) {
  return {"cluster_dim_conditional", {{"alpha", alpha}, {"beta", beta}},
          cluster_dim_conditional(alpha, beta), "membrane: 4 beta (1-alpha^2)"};
}
inline Prediction predict_pairs(double alpha, double beta) {
  return {"rho", {{"alpha", alpha}, {"beta", beta}}, rho(alpha, beta),
          "membrane: 4 + 4 beta - 4 alpha^2 inf F_{2,beta}"};
}
inline Prediction predict_square(double eta) {
  return {"square_exp", {{"eta", eta}}, square_exp(eta), "membrane: (1-eta)/2"};
}
inline Prediction predict_max() {
  return {"max_rate", {}, max_rate(), "membrane: 2 sqrt(2g), g = 8/pi^2"};
}

}  // namespace membrane::theory
