#ifndef MOBIFLOW_ENERGY_HPP
#define MOBIFLOW_ENERGY_HPP

#include "mobiflow/grid.hpp"
#include "mobiflow/mobility.hpp"

#include <string>

namespace mobiflow {

// potentials G for the Cahn--Hilliard style energy  E(v) = 1/2 |grad v|^2 + int G(v)
//   binary_alloy(theta):       theta r^2 (1-r)^2
//   logarithmic(theta):        theta ( r log r + (1-r) log(1-r) ),  clipped interior
//   thin_film(kappa,alpha,beta): kappa beta / ((beta-alpha)(beta-alpha+1)) r^(beta-alpha+1)
struct GSpec {
  enum Kind { binary_alloy, logarithmic, thin_film };
  Kind kind = binary_alloy;
  double theta = 1.0;
  double kappa = 1.0, alpha = 0.5, beta = 1.0;

  double G(double r) const;
  double G1(double r) const;
  double G2(double r) const;
  // convexity splitting G = Gc + Ge with Gc convex and Ge concave
  double Gc1(double r) const;
  double Gc2(double r) const;
  double Ge1(double r) const;
  double max_abs_G2(double M) const;  // stabilization scale over the clipped range

  // pressure with P' = m G'', anchored P(0) = 0 (numeric antiderivative)
  double P(double r, const RegularizedMobility& m) const;

  // "binary_alloy:theta=1" | "logarithmic:theta=0.3" | "thin_film:kappa=1,alpha=0.5,beta=1.5"
  static GSpec parse(const std::string& text);
  std::string to_string() const;
};

// condition (G): bounded mobility needs m G'' bounded below and P continuous on
// [0, M]; unbounded needs m G'' >= -C (1+m) and P(s) / (s^q + |G(s)|) -> 0.
struct ConditionGReport {
  bool ok = false;
  std::string detail;
};
ConditionGReport check_condition_G(const GSpec& g, const RegularizedMobility& m);

// energy functional driving the JKO scheme
struct Energy {
  enum Kind { zero, ks_internal, cahn_hilliard };
  Kind kind = zero;

  // ks_internal: E(u) = int Phi(u) + W u  with  Phi(u) = p u^(p+1-a)/((p-a)(p+1-a));
  // W is the frozen external potential (chemotaxis: W = -chi v)
  double p = 2.0, alpha = 0.5;
  ScalarField W;  // empty array => no potential

  // cahn_hilliard: E(u) = 1/2 int |grad u|^2 + int G(u)
  GSpec g;

  double eval(const ScalarField& u) const;
  ScalarField first_variation(const ScalarField& u) const;

  // pointwise integrand without the W term; for cahn_hilliard this is the
  // convex part Gc of the splitting (the concave rest enters via a frozen
  // linearization), so phi is convex for every kind
  double phi(double r) const;
  double phi1(double r) const;
  double phi2(double r) const;
  bool has_dirichlet() const { return kind == cahn_hilliard; }

  static Energy make_zero();
  static Energy make_ks(double p, double alpha, const ScalarField& W);
  static Energy make_ch(const GSpec& g);
};

}  // namespace mobiflow

#endif
