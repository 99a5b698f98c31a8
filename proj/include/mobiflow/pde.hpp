#ifndef MOBIFLOW_PDE_HPP
#define MOBIFLOW_PDE_HPP

#include "mobiflow/energy.hpp"
#include "mobiflow/grid.hpp"
#include "mobiflow/mobility.hpp"

#include <limits>

namespace mobiflow {

// regularized drift-diffusion semigroup  d_t rho = delta Lap rho + div( m_eps(rho) grad phi )
// with no-flux boundary; explicit upwind drift + implicit diffusion substeps
struct SemigroupParams {
  double delta = 1.0;
  ScalarField phi;  // fixed potential; empty => pure diffusion
  RegularizedMobility reg;
  double dt_cap = std::numeric_limits<double>::infinity();
  double sup_L = 0;  // cached sup |m_eps'| for the CFL bound; 0 => computed on demand
};

struct SemigroupDiag {
  int substeps = 0;
  double clipped_mass = 0;     // total negative mass removed at the end
  double mass_rel_error = 0;   // before renormalization
};

// advance by time t; substeps > 0 forces a fixed substep count (so that the
// map t -> state is smooth for finite differencing), otherwise CFL picks it
ScalarField semigroup_step(const ScalarField& rho, const SemigroupParams& p, double t,
                           int substeps = 0, SemigroupDiag* diag = nullptr);

// CFL-admissible substep count for horizon t (what semigroup_step would choose)
int semigroup_substeps(const ScalarField& rho, const SemigroupParams& p, double t);

// -div( m_eps(rho)_face grad phi ) = g - mean(g), zero-mean phi, no-flux;
// face weights are arithmetic means of cell values of m_eps(rho)
struct EllipticResult {
  ScalarField phi;
  double residual = 0;  // final l2 residual relative to ||rhs||
  int iterations = 0;
};
EllipticResult weighted_elliptic_solve(const ScalarField& rho, const ScalarField& g,
                                       const RegularizedMobility& reg, double tol = 1e-10,
                                       int max_iters = 20000);

// one implicit Euler step of  d_t v = Lap v - v + u  (screened heat):
//   ((1+tau) I - tau Lap) v_new = v + tau u
ScalarField screened_heat_step(const ScalarField& v, const ScalarField& u, double tau);

// reference solvers (independent discretizations used as test oracles)

// porous medium  d_t u = Lap u^p, explicit flux form
ScalarField reference_pme_solve(const ScalarField& u0, double p, double T, double dt);

struct KsState {
  ScalarField u, v;
};
// Keller-Segel  d_t u = Lap u^p - chi div(u grad v),  d_t v = Lap v - v + u;
// explicit u with upwinded chemotaxis, implicit v
KsState reference_ks_solve(const ScalarField& u0, const ScalarField& v0, double p, double chi,
                           double T, double dt);

// Cahn-Hilliard  d_t u = div( m(u) grad( -Lap u + G'(u) ) ), convexity-split
// semi-implicit with stabilization; clips to [0, M] and enforces exact mass
ScalarField reference_ch_solve(const ScalarField& u0, const RegularizedMobility& mob,
                               const GSpec& g, double T, double dt);

}  // namespace mobiflow

#endif
