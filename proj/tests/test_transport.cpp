#include "mobiflow/transport.hpp"

#include "doctest.h"

#include <cmath>
#include <random>

using namespace mobiflow;

namespace {

ScalarField bump(const DomainGrid& g, double cx, double cy, double floor = 0.0,
                 double width = 60.0) {
  ScalarField f = make_field(g);
  for (int c = 0; c < g.cells(); ++c) {
    double dx = g.x(c) - cx, dy = g.y(c) - cy;
    f.v[c] = floor + std::exp(-width * (dx * dx + dy * dy));
  }
  return f;
}

double com_x(const ScalarField& u) {
  const DomainGrid& g = *u.g;
  double m = 0, mx = 0;
  for (int c = 0; c < g.cells(); ++c) {
    m += u.v[c];
    mx += u.v[c] * g.x(c);
  }
  return mx / m;
}

// eliminated scalar objective of the action prox
double prox_obj(double r, double zr, double zn, double c, const RegularizedMobility& reg) {
  return c * zn * zn / (reg.m(r) + 2 * c) + 0.5 * (r - zr) * (r - zr);
}

}  // namespace

TEST_CASE("prox_action_point matches a brute-force scan") {
  RegularizedMobility pw{Mobility::parse("power:alpha=0.5"), 0.1};
  RegularizedMobility bd{Mobility::parse("bounded_power:alpha=1,M=1"), 0.0};
  RegularizedMobility ln{Mobility::parse("linear"), 0.0};

  struct Case {
    double zr, zn, c;
  };
  std::vector<Case> cases = {{0.5, 0.3, 0.01},  {-0.2, 1.0, 0.1}, {1.5, -0.7, 0.02},
                             {0.3, 0.0, 0.05},  {2.0, 0.5, 1e-4}, {0.02, 0.4, 1e-3},
                             {0.9, 2.0, 5e-3}};
  for (const RegularizedMobility& reg : {pw, bd, ln}) {
    double rhi = reg.M();
    for (const Case& cs : cases) {
      double scan_hi = std::isfinite(rhi) ? rhi : std::max(4.0, 2 * std::abs(cs.zr) + 2);
      int N = 200000;
      double best_r = 0, best_q = 1e300;
      for (int i = 0; i <= N; ++i) {
        double r = scan_hi * i / N;
        double q = prox_obj(r, cs.zr, cs.zn, cs.c, reg);
        if (q < best_q) {
          best_q = q;
          best_r = r;
        }
      }
      auto [rs, ns] = prox_action_point(cs.zr, cs.zn, cs.c, reg, rhi, 0.5);
      CHECK(std::abs(rs - best_r) <= 2 * scan_hi / N + 1e-9);
      CHECK(prox_obj(rs, cs.zr, cs.zn, cs.c, reg) <= best_q + 1e-12);
      double m = reg.m(rs);
      CHECK(ns == doctest::Approx(cs.zn * m / (m + 2 * cs.c)).epsilon(1e-12));
    }
  }
}

TEST_CASE("wm_distance: identity is exactly zero and symmetry holds") {
  DomainGrid g = build_domain(ShapeSpec::parse("disc:res=8"));
  RegularizedMobility reg{Mobility::parse("power:alpha=0.5"), 0.1};
  ScalarField mu = bump(g, 0.42, 0.5, 0.1);
  TransportOptions opt;
  opt.time_slices = 8;

  TransportResult same = wm_distance(mu, mu, reg, opt);
  CHECK(same.converged);
  CHECK(same.distance <= 1e-7);

  ScalarField nu = bump(g, 0.55, 0.45, 0.1);
  nu.v *= integral(mu) / integral(nu);
  TransportResult ab = wm_distance(mu, nu, reg, opt);
  TransportResult ba = wm_distance(nu, mu, reg, opt);
  CHECK(ab.converged);
  CHECK(ba.converged);
  CHECK(ab.distance == doctest::Approx(ba.distance).epsilon(5e-3));
  CHECK(ab.distance > 1e-3);  // genuinely different inputs
  // endpoint slices are pinned to the data
  CHECK((ab.path.front() - mu.v).abs().maxCoeff() == 0.0);
  CHECK((ab.path.back() - nu.v).abs().maxCoeff() == 0.0);
}

TEST_CASE("wm_distance: translated bump reproduces W2 under linear mobility") {
  DomainGrid g = build_domain(ShapeSpec{"square", 16, {}});
  RegularizedMobility lin{Mobility::parse("linear"), 0.0};
  ScalarField mu = bump(g, 0.425, 0.5, 0.0, 80.0);
  ScalarField nu = bump(g, 0.575, 0.5, 0.0, 80.0);
  nu.v *= integral(mu) / integral(nu);
  double mass = integral(mu);
  double dcom = std::abs(com_x(nu) - com_x(mu));

  TransportOptions opt;
  opt.time_slices = 8;
  opt.max_iters = 40000;
  TransportResult r = wm_distance(mu, nu, lin, opt);
  CHECK(r.converged);
  // exact translation value m |d|^2 and the barycenter (Jensen) lower bound
  CHECK(r.action == doctest::Approx(mass * dcom * dcom).epsilon(0.12));
  CHECK(r.action >= 0.9 * mass * dcom * dcom);
  // intermediate slices keep mass (continuity residual is small)
  for (const auto& slice : r.path)
    CHECK(slice.sum() * g.h * g.h == doctest::Approx(mass).epsilon(1e-4));
}

TEST_CASE("wm_distance: larger mobility gives smaller distance") {
  DomainGrid g = build_domain(ShapeSpec::parse("disc:res=8"));
  ScalarField mu = bump(g, 0.42, 0.5, 0.1);
  ScalarField nu = bump(g, 0.5, 0.58, 0.1);
  nu.v *= integral(mu) / integral(nu);
  TransportOptions opt;
  opt.time_slices = 8;
  RegularizedMobility small{Mobility::parse("power:alpha=0.5"), 0.1};
  RegularizedMobility large{Mobility::parse("power:alpha=0.5"), 0.3};
  double d_small = wm_distance(mu, nu, small, opt).distance;
  double d_large = wm_distance(mu, nu, large, opt).distance;
  CHECK(d_large <= d_small * (1 + 1e-3));
}

TEST_CASE("wm_distance: validation") {
  DomainGrid g = build_domain(ShapeSpec::parse("disc:res=8"));
  DomainGrid g2 = build_domain(ShapeSpec::parse("disc:res=8"));
  RegularizedMobility reg{Mobility::parse("power:alpha=0.5"), 0.1};
  ScalarField mu = bump(g, 0.42, 0.5, 0.1);
  ScalarField nu = mu;
  nu.v *= 2.0;  // mass mismatch
  CHECK_THROWS(wm_distance(mu, nu, reg, {}));
  ScalarField neg = mu;
  neg.v[0] = -1.0;
  CHECK_THROWS(wm_distance(mu, neg, reg, {}));
  ScalarField other = make_field(g2, 1.0);
  CHECK_THROWS(wm_distance(mu, other, reg, {}));
  RegularizedMobility bd{Mobility::parse("bounded_power:alpha=1,M=1"), 0.0};
  ScalarField over = make_field(g, 1.5);
  CHECK_THROWS(wm_distance(over, over, bd, {}));
  TransportOptions bad;
  bad.time_slices = 0;
  CHECK_THROWS(wm_distance(mu, mu, reg, bad));
}

TEST_CASE("jko_inner: zero energy keeps the state exactly") {
  DomainGrid g = build_domain(ShapeSpec::parse("disc:res=8"));
  RegularizedMobility reg{Mobility::parse("power:alpha=0.5"), 0.1};
  ScalarField u = bump(g, 0.45, 0.5, 0.2);
  JkoInnerResult r = jko_inner_minimize(u, 1e-3, Energy::make_zero(), reg, {});
  CHECK(r.converged);
  CHECK((r.minimizer.v - u.v).abs().maxCoeff() <= 1e-12);
  CHECK(r.action <= 1e-12);
}

TEST_CASE("jko_inner: ks energy step decreases the JKO objective") {
  DomainGrid g = build_domain(ShapeSpec{"square", 12, {}});
  RegularizedMobility reg{Mobility::parse("power:alpha=0.5"), 0.1};
  ScalarField W = make_field(g);
  for (int c = 0; c < g.cells(); ++c) W.v[c] = -0.5 * std::cos(2 * M_PI * g.x(c));
  Energy E = Energy::make_ks(2.0, 0.5, W);
  ScalarField u0 = bump(g, 0.5, 0.5, 0.1);
  u0.v /= integral(u0);

  double tau = 5e-3;
  TransportOptions opt;
  opt.time_slices = 8;
  JkoInnerResult r = jko_inner_minimize(u0, tau, E, reg, opt);
  CHECK(r.converged);
  double e0 = E.eval(u0);
  CHECK(r.action / (2 * tau) + r.energy <= e0 + 1e-8 * (1 + std::abs(e0)));
  CHECK(r.energy <= e0);
  CHECK(integral(r.minimizer) == doctest::Approx(integral(u0)).epsilon(1e-4));
  CHECK(r.minimizer.v.minCoeff() >= 0.0);
}

TEST_CASE("jko_inner: cahn-hilliard step with dirichlet part and splitting") {
  DomainGrid g = build_domain(ShapeSpec{"square", 10, {}});
  RegularizedMobility mob{Mobility::parse("bounded_power:alpha=1,M=1"), 0.0};
  Energy E = Energy::make_ch(GSpec::parse("binary_alloy:theta=1"));
  ScalarField u0 = make_field(g);
  for (int c = 0; c < g.cells(); ++c)
    u0.v[c] = 0.5 + 0.2 * std::cos(2 * M_PI * g.x(c)) * std::cos(M_PI * g.y(c));

  double tau = 1e-3;
  TransportOptions opt;
  opt.time_slices = 8;
  JkoInnerResult r = jko_inner_minimize(u0, tau, E, mob, opt);
  CHECK(r.converged);
  CHECK(r.minimizer.v.minCoeff() >= 0.0);
  CHECK(r.minimizer.v.maxCoeff() <= 1.0);
  double e0 = E.eval(u0);
  CHECK(r.action / (2 * tau) + r.energy <= e0 + 1e-6 * (1 + std::abs(e0)));
  CHECK(integral(r.minimizer) == doctest::Approx(integral(u0)).epsilon(1e-4));
}
