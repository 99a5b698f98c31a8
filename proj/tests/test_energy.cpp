#include "mobiflow/energy.hpp"

#include "doctest.h"

#include <cmath>
#include <random>

using namespace mobiflow;

namespace {

double fd1(const GSpec& g, double r, double s = 1e-6) { return (g.G(r + s) - g.G(r - s)) / (2 * s); }
double fd2(const GSpec& g, double r, double s = 1e-5) {
  return (g.G(r + s) - 2 * g.G(r) + g.G(r - s)) / (s * s);
}

ScalarField smooth_bump(const DomainGrid& g, double floor = 0.2) {
  ScalarField f = make_field(g);
  for (int c = 0; c < g.cells(); ++c) {
    double dx = g.x(c) - 0.45, dy = g.y(c) - 0.55;
    f.v[c] = floor + std::exp(-20 * (dx * dx + dy * dy));
  }
  return f;
}

}  // namespace

TEST_CASE("gspec parse and validation") {
  GSpec a = GSpec::parse("binary_alloy:theta=1.3");
  CHECK(a.kind == GSpec::binary_alloy);
  CHECK(a.theta == doctest::Approx(1.3));
  CHECK(GSpec::parse(a.to_string()).theta == doctest::Approx(1.3));

  GSpec b = GSpec::parse("thin_film:kappa=2,alpha=0.5,beta=1.5");
  CHECK(b.kappa == doctest::Approx(2));
  CHECK(b.beta == doctest::Approx(1.5));

  CHECK(GSpec::parse("logarithmic").theta == doctest::Approx(1.0));

  CHECK_THROWS(GSpec::parse("unknown_pot"));
  CHECK_THROWS(GSpec::parse("binary_alloy:theta=1,theta=2"));
  CHECK_THROWS(GSpec::parse("binary_alloy:theta=0"));
  CHECK_THROWS(GSpec::parse("binary_alloy:kappa=1"));
  CHECK_THROWS(GSpec::parse("thin_film:theta=1"));
  CHECK_THROWS(GSpec::parse("thin_film:kappa=1,alpha=1.5,beta=1.0"));
  CHECK_THROWS(GSpec::parse("thin_film:kappa=0"));
  CHECK_THROWS(GSpec::parse("binary_alloy:theta=abc"));
}

TEST_CASE("gspec derivatives match finite differences") {
  GSpec bin = GSpec::parse("binary_alloy:theta=1.3");
  GSpec log = GSpec::parse("logarithmic:theta=0.7");
  GSpec film = GSpec::parse("thin_film:kappa=2,alpha=0.5,beta=1.5");
  for (double r : {0.08, 0.2, 0.45, 0.7, 0.93}) {
    CHECK(bin.G1(r) == doctest::Approx(fd1(bin, r)).epsilon(1e-7));
    CHECK(bin.G2(r) == doctest::Approx(fd2(bin, r)).epsilon(1e-5));
    CHECK(log.G1(r) == doctest::Approx(fd1(log, r)).epsilon(1e-7));
    CHECK(log.G2(r) == doctest::Approx(fd2(log, r)).epsilon(1e-4));
  }
  for (double r : {0.1, 0.5, 1.0, 2.5}) {
    CHECK(film.G1(r) == doctest::Approx(fd1(film, r)).epsilon(1e-7));
    CHECK(film.G2(r) == doctest::Approx(fd2(film, r)).epsilon(1e-5));
  }
  // closed-form spot values
  CHECK(bin.G2(0.0) == doctest::Approx(2 * 1.3));
  CHECK(bin.G2(0.5) == doctest::Approx(-1.3));
  CHECK(bin.max_abs_G2(1.0) == doctest::Approx(2 * 1.3));
}

TEST_CASE("convexity splitting: Gc convex, Ge concave, sum exact") {
  GSpec bin = GSpec::parse("binary_alloy:theta=2");
  GSpec log = GSpec::parse("logarithmic:theta=0.5");
  GSpec filmneg = GSpec::parse("thin_film:kappa=-1,alpha=0.5,beta=1.5");
  for (const GSpec& g : {bin, log, filmneg}) {
    double prev_c = -1e300, prev_e = 1e300;
    for (int i = 1; i < 60; ++i) {
      double r = i / 60.0;
      CHECK(g.Gc1(r) + g.Ge1(r) == doctest::Approx(g.G1(r)).epsilon(1e-12));
      CHECK(g.Gc1(r) >= prev_c - 1e-12);  // convex part has nondecreasing slope
      CHECK(g.Ge1(r) <= prev_e + 1e-12);  // concave part has nonincreasing slope
      prev_c = g.Gc1(r);
      prev_e = g.Ge1(r);
    }
  }
}

TEST_CASE("pressure antiderivative: thin film and logarithmic closed forms") {
  // m(r) = r^alpha raw, G thin_film => P' = kappa beta r^(beta-1), P = kappa r^beta
  GSpec film = GSpec::parse("thin_film:kappa=2,alpha=0.5,beta=1.5");
  RegularizedMobility raw{Mobility::parse("power:alpha=0.5"), 0.0};
  for (double r : {0.3, 1.0, 2.5})
    CHECK(film.P(r, raw) == doctest::Approx(2 * std::pow(r, 1.5)).epsilon(1e-6));

  // m = r(1-r), logarithmic: m G'' = theta exactly, P = theta r
  GSpec lg = GSpec::parse("logarithmic:theta=0.7");
  RegularizedMobility mb{Mobility::parse("bounded_power:alpha=1,M=1"), 0.0};
  CHECK(lg.P(0.5, mb) == doctest::Approx(0.35).epsilon(1e-6));
  CHECK(lg.P(0.9, mb) == doctest::Approx(0.63).epsilon(1e-6));
}

TEST_CASE("condition (G) numeric check") {
  RegularizedMobility mb{Mobility::parse("bounded_power:alpha=1,M=1"), 0.0};
  RegularizedMobility pw{Mobility::parse("power:alpha=0.5"), 0.0};

  CHECK(check_condition_G(GSpec::parse("binary_alloy:theta=1"), mb).ok);
  CHECK(check_condition_G(GSpec::parse("logarithmic:theta=1"), mb).ok);
  CHECK(check_condition_G(GSpec::parse("thin_film:kappa=1,alpha=0.5,beta=1.5"), pw).ok);
  CHECK(check_condition_G(GSpec::parse("thin_film:kappa=-1,alpha=0.5,beta=1.5"), pw).ok);

  // regularized mobility: the condition concerns the raw mobility
  RegularizedMobility reg{Mobility::parse("bounded_power:alpha=1,M=1"), 0.1};
  CHECK_FALSE(check_condition_G(GSpec::parse("binary_alloy:theta=1"), reg).ok);
}

TEST_CASE("ks energy: closed form, derivative identity, directional derivative") {
  DomainGrid g = build_domain(ShapeSpec::parse("square:res=24"));
  double p = 2.0, a = 0.5;
  Energy e = Energy::make_ks(p, a, ScalarField{});

  // Phi(u) = p u^(p+1-a) / ((p-a)(p+1-a))
  CHECK(e.phi(1.0) == doctest::Approx(2.0 / (1.5 * 2.5)));
  CHECK(e.phi1(1.0) == doctest::Approx(2.0 / 1.5));
  ScalarField uni = make_field(g, 0.8);
  CHECK(e.eval(uni) == doctest::Approx(g.area() * e.phi(0.8)).epsilon(1e-12));

  // identity m(u) Phi''(u) = p u^(p-1) for m = u^a (porous-medium link)
  Mobility mob = Mobility::parse("power:alpha=0.5");
  for (double u : {0.2, 0.7, 1.9}) {
    double s = 1e-6;
    double phi2 = (e.phi1(u + s) - e.phi1(u - s)) / (2 * s);
    CHECK(mob(u) * phi2 == doctest::Approx(p * std::pow(u, p - 1)).epsilon(1e-8));
  }

  // directional derivative of eval against first_variation, with a potential
  ScalarField W = make_field(g);
  for (int c = 0; c < g.cells(); ++c) W.v[c] = -0.3 * std::cos(2 * M_PI * g.x(c));
  Energy ew = Energy::make_ks(1.4, 0.5, W);
  ScalarField u = smooth_bump(g);
  std::mt19937 rng(7);
  ScalarField w = make_field(g);
  for (int c = 0; c < g.cells(); ++c) w.v[c] = std::uniform_real_distribution<>(-1, 1)(rng);
  w.v -= w.v.mean();
  double s = 1e-6;
  ScalarField up = u, um = u;
  up.v += s * w.v;
  um.v -= s * w.v;
  double fd = (ew.eval(up) - ew.eval(um)) / (2 * s);
  CHECK(inner(ew.first_variation(u), w) == doctest::Approx(fd).epsilon(1e-6));

  CHECK_THROWS(Energy::make_ks(0.4, 0.5, ScalarField{}));  // p <= alpha rejected
}

TEST_CASE("cahn-hilliard energy: uniform state and directional derivative") {
  DomainGrid g = build_domain(ShapeSpec::parse("disc:res=24"));
  Energy e = Energy::make_ch(GSpec::parse("binary_alloy:theta=1"));

  ScalarField uni = make_field(g, 0.4);
  GSpec gs = GSpec::parse("binary_alloy:theta=1");
  CHECK(e.eval(uni) == doctest::Approx(g.area() * gs.G(0.4)).epsilon(1e-12));
  CHECK(e.first_variation(uni).v.abs().maxCoeff() == doctest::Approx(std::abs(gs.G1(0.4))).epsilon(1e-12));

  ScalarField u = smooth_bump(g, 0.1);
  u.v *= 0.5;  // keep in (0,1)
  std::mt19937 rng(11);
  ScalarField w = make_field(g);
  for (int c = 0; c < g.cells(); ++c) w.v[c] = std::uniform_real_distribution<>(-1, 1)(rng);
  double s = 1e-6;
  ScalarField up = u, um = u;
  up.v += s * w.v;
  um.v -= s * w.v;
  double fd = (e.eval(up) - e.eval(um)) / (2 * s);
  CHECK(inner(e.first_variation(u), w) == doctest::Approx(fd).epsilon(1e-6));

  Energy z = Energy::make_zero();
  CHECK(z.eval(u) == 0.0);
  CHECK(z.first_variation(u).v.abs().maxCoeff() == 0.0);
}
