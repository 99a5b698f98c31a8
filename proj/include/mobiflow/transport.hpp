#ifndef MOBIFLOW_TRANSPORT_HPP
#define MOBIFLOW_TRANSPORT_HPP

#include "mobiflow/energy.hpp"
#include "mobiflow/grid.hpp"
#include "mobiflow/mobility.hpp"

#include <utility>
#include <vector>

namespace mobiflow {

// Dynamic (Benamou-Brenier) formulation of the weighted Wasserstein distance:
//   W^2(mu, nu) = inf int_0^1 int |v|^2 / m(rho)  over paths with
//   d_s rho + div v = 0, rho(0) = mu, rho(1) = nu, no-flux boundary.
// Discretized on time_slices intervals (momentum per interval, density per
// slice, midpoint 4-point average under the face mobility) and solved with a
// diagonally preconditioned primal-dual (PDHG) scheme.

struct TransportOptions {
  int time_slices = 16;
  double tol_continuity = 1e-5;  // l2(h^2 ds) continuity residual / mass(mu)
  double tol_action = 1e-5;      // relative action change over the stall window
  int stall_window = 50;
  int check_every = 10;
  int max_iters = 60000;
  int min_iters = 60;
  // dual/primal step-size split: sigma *= step_ratio, tau /= step_ratio.
  // Values well below 1 let the primal variables converge in few iterations
  // while feasibility catches up; the operator-norm bound is ratio-invariant.
  double step_ratio = 0.015625;
  int ch_rounds = 3;       // convexity-splitting re-linearizations (cahn_hilliard)
  bool norm_check = true;  // power-iteration audit of the preconditioned operator
};

struct TransportResult {
  double action = 0;    // optimal kinetic action = W^2
  double distance = 0;  // sqrt(max(action, 0))
  int iterations = 0;
  double continuity_residual = 0;  // relative, at the last check
  bool converged = false;
  std::vector<Eigen::ArrayXd> path;  // time_slices+1 density slices
};

// distance between equal-mass densities (masses must agree to 1e-10 relative)
TransportResult wm_distance(const ScalarField& mu, const ScalarField& nu,
                            const RegularizedMobility& reg, const TransportOptions& opt = {});

// one JKO minimizing-movement step: argmin_v  W^2(u_prev, v)/(2 tau) + E(v),
// solved as min Action + 2 tau E over paths with a free terminal slice
struct JkoInnerResult {
  ScalarField minimizer;
  double action = 0;  // W^2 between u_prev and the minimizer (same discretization)
  double energy = 0;  // E(minimizer)
  int iterations = 0;
  double continuity_residual = 0;
  bool converged = false;
};
JkoInnerResult jko_inner_minimize(const ScalarField& u_prev, double tau, const Energy& E,
                                  const RegularizedMobility& reg,
                                  const TransportOptions& opt = {});

// prox of  c |n|^2 / m(r) + 1/2 |(r,n) - (zr,zn)|^2  over r in [0, rhi], n free;
// the partial minimum in n is n(r) = zn m(r)/(m(r)+2c), leaving a strongly
// convex scalar problem in r. warm seeds the Newton iteration.
std::pair<double, double> prox_action_point(double zr, double zn, double c,
                                            const RegularizedMobility& reg, double rhi,
                                            double warm);

}  // namespace mobiflow

#endif
