#ifndef MOBIFLOW_MOBILITY_HPP
#define MOBIFLOW_MOBILITY_HPP

#include <Eigen/Dense>

#include <limits>
#include <string>

namespace mobiflow {

// Concave mobility families m : [0, M] -> [0, inf), m(0) = 0.
//   power:         m(r) = r^alpha,              0 < alpha <= 1, M = inf
//   log1p:         m(r) = log(1 + r),           M = inf
//   power_product: m(r) = r^alpha (r+c)^beta,   0 < alpha+beta <= 1, c > 0, M = inf
//   bounded_power: m(r) = (r (M-r))^alpha,      0 < alpha <= 1, M < inf
// alpha = 1 (or alpha+beta = 1 with beta = 0) gives the linear mobility of the
// classical quadratic transport distance.

enum class MobilityKind { power, log1p, power_product, bounded_power };

struct Mobility {
  MobilityKind kind = MobilityKind::power;
  double alpha = 0.5, beta = 0, c = 1, M = std::numeric_limits<double>::infinity();

  double operator()(double r) const;
  double d1(double r) const;
  double d2(double r) const;
  bool bounded() const { return kind == MobilityKind::bounded_power; }

  // "power:alpha=0.5" | "log1p" | "power_product:alpha=0.3,beta=0.3,c=1"
  // | "bounded_power:alpha=1,M=1" | "linear" (sugar for power_product(1,0,1))
  static Mobility parse(const std::string& text);
  std::string to_string() const;
};

// m_eps(r) = m(r + eps) for unbounded families,
// m_eps(r) = ((r+eps)(M-r+eps))^alpha for the bounded family; eps >= 0.
struct RegularizedMobility {
  Mobility base;
  double eps = 0;

  double M() const { return base.M; }
  double m(double r) const;
  double m1(double r) const;
  double m2(double r) const;
  Eigen::ArrayXd m(const Eigen::ArrayXd& r) const;
};

struct SupConstants {
  double L = 0;  // sup |m_eps'|
  double S = 0;  // sup |m_eps'' m_eps|
  double R = 0;  // sup (m_eps')^2 / |m_eps'' m_eps|
};

// Closed forms for the power family, numeric sup over a composite
// (geometric + uniform) r-grid with endpoint analysis otherwise.
// Throws when a sup is non-finite, naming the violated condition.
SupConstants sup_constants(const RegularizedMobility& reg);

struct ConditionReport {
  bool mlsc = false;  // (M-LSC): L and S finite
  bool ma = false;    // (M-A): R finite
  SupConstants sup;
  std::string detail;
};
ConditionReport check_conditions(const RegularizedMobility& reg);

// Entropy density with U_eps''(r) m_eps(r) = 1, anchored U(r0) = U'(r0) = 0.
// Tabulated Hermite interpolant on [0, r_cap]; evaluation beyond the cap throws.
struct EntropyDensity {
  double eps = 0, r0 = 1, r_cap = 1;
  Eigen::ArrayXd grid, U_tab, U1_tab, U2_tab;

  double U(double r) const;
  double U1(double r) const;
};

// r_cap < 0 selects the default cap: min(M, 64 * r0) with r0 the anchor.
EntropyDensity build_entropy(const RegularizedMobility& reg, int r_grid_size,
                             double r0, double r_cap = -1);

// lambda_delta = -(1/delta) grad_inf^2 S - hess_inf L - delta C / sigma  (<= 0).
// Requires admissible sigma: sigma < (1/C_tilde) min(1, 1/R).
double lambda_delta(const SupConstants& sup, double delta, double grad_inf,
                    double hess_inf, double sigma, double C, double C_tilde);

// uniform bound for sup_r (m_eps - m): ((M+eps)^alpha + M^alpha) eps^alpha for
// the bounded family, m(eps) otherwise
double uniform_gap(const RegularizedMobility& reg);
// numeric sup of m_eps - m over a fine grid (test support)
double uniform_gap_numeric(const RegularizedMobility& reg, int n = 10000);

}  // namespace mobiflow

#endif
