#include "doctest.h"
#include "mobiflow/grid.hpp"

#include <cmath>
#include <cstdio>
#include <random>

using namespace mobiflow;

namespace {

ScalarField random_field(const DomainGrid& g, std::mt19937_64& rng) {
  std::normal_distribution<double> dist;
  ScalarField f = make_field(g);
  for (int c = 0; c < g.cells(); ++c) f.v[c] = dist(rng);
  return f;
}

VectorField random_vector(const DomainGrid& g, std::mt19937_64& rng) {
  std::normal_distribution<double> dist;
  VectorField v = make_vector_field(g);
  for (int k = 0; k < g.nfx(); ++k) v.x[k] = dist(rng);
  for (int k = 0; k < g.nfy(); ++k) v.y[k] = dist(rng);
  return v;
}

ScalarField eval_on_grid(const DomainGrid& g, double (*fn)(double, double)) {
  ScalarField f = make_field(g);
  for (int c = 0; c < g.cells(); ++c) f.v[c] = fn(g.x(c), g.y(c));
  return f;
}

}  // namespace

TEST_CASE("grid: square basics") {
  DomainGrid g = build_domain(ShapeSpec::parse("square:res=16"));
  CHECK(g.cells() == 256);
  CHECK(g.convex);
  CHECK(g.h == doctest::Approx(1.0 / 16).epsilon(1e-15));
  // every boundary face lies on the box edge with an exact axis normal
  CHECK(g.boundary.size() == 4 * 16);
  for (auto& b : g.boundary) {
    CHECK(std::abs(std::abs(b.nx) + std::abs(b.ny) - 1.0) < 1e-9);
    CHECK(b.weight == doctest::Approx(g.h).epsilon(1e-9));
  }
  CHECK(perimeter(g) == doctest::Approx(4.0).epsilon(1e-9));
  CHECK(g.area() == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("grid: sbp duality <grad f, v> = -<f, div v>") {
  std::mt19937_64 rng(7);
  for (const char* spec : {"square:res=16", "disc:res=24", "pacman:res=32"}) {
    DomainGrid g = build_domain(ShapeSpec::parse(spec));
    for (int trial = 0; trial < 5; ++trial) {
      ScalarField f = random_field(g, rng);
      VectorField v = random_vector(g, rng);
      double a = inner(gradient(f), v);
      double b = inner(f, divergence(v));
      double scale = l2_norm(f) * l2_norm(v) / g.h + 1e-30;
      CHECK(std::abs(a + b) <= 1e-12 * scale);
    }
  }
}

TEST_CASE("grid: calculus exactness on polynomials") {
  DomainGrid g = build_domain(ShapeSpec::parse("square:res=32"));
  ScalarField c1 = make_field(g, 3.25);
  CHECK(l2_norm(gradient(c1)) == 0.0);
  CHECK(l2_norm(laplacian_neumann(c1)) == 0.0);

  ScalarField q = eval_on_grid(g, [](double x, double y) { return x * x + y * y; });
  ScalarField lap = laplacian_neumann(q);
  // 5-point Laplacian of x^2+y^2 is exactly 4 away from the boundary
  for (int c = 0; c < g.cells(); ++c) {
    int i = g.ci[c], j = g.cj[c];
    if (i >= 1 && i < g.nx - 1 && j >= 1 && j < g.ny - 1)
      CHECK(lap.v[c] == doctest::Approx(4.0).epsilon(1e-11));
  }

  // cell-centered derivatives are exact for quadratics (one-sided included)
  ScalarField gx = dx_cell(q), gy = dy_cell(q);
  for (int c = 0; c < g.cells(); ++c) {
    CHECK(gx.v[c] == doctest::Approx(2 * g.x(c)).epsilon(1e-10));
    CHECK(gy.v[c] == doctest::Approx(2 * g.y(c)).epsilon(1e-10));
  }

  ScalarField xy = eval_on_grid(g, [](double x, double y) { return x * y; });
  HessianField H = hessian(xy);
  for (int c = 0; c < g.cells(); ++c) {
    CHECK(std::abs(H.xx[c]) < 1e-10);
    CHECK(std::abs(H.yy[c]) < 1e-10);
    CHECK(H.xy[c] == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(H.yx[c] == doctest::Approx(1.0).epsilon(1e-10));
  }
}

TEST_CASE("grid: hessian symmetric in the interior") {
  DomainGrid g = build_domain(ShapeSpec::parse("disc:res=32"));
  std::mt19937_64 rng(11);
  ScalarField f = random_field(g, rng);
  HessianField H = hessian(f);
  for (int c = 0; c < g.cells(); ++c) {
    int i = g.ci[c], j = g.cj[c];
    bool deep = true;  // full 5x5 neighborhood inside -> central stencils all around
    for (int dj = -2; dj <= 2 && deep; ++dj)
      for (int di = -2; di <= 2 && deep; ++di)
        if (g.at(i + di, j + dj) < 0) deep = false;
    if (deep) CHECK(std::abs(H.xy[c] - H.yx[c]) < 1e-11 * (1 + std::abs(H.xy[c])));
  }
}

TEST_CASE("grid: disc perimeter converges at first order") {
  double exact = 2 * M_PI * 0.4;
  double e64 = std::abs(perimeter(build_domain(ShapeSpec::parse("disc:res=64"))) - exact);
  double e128 = std::abs(perimeter(build_domain(ShapeSpec::parse("disc:res=128"))) - exact);
  CHECK(e64 / exact < 0.025);
  CHECK(e128 < e64);
  // disc area first-order as well
  DomainGrid g = build_domain(ShapeSpec::parse("disc:res=64"));
  CHECK(std::abs(g.area() - M_PI * 0.16) / (M_PI * 0.16) < 0.05);
}

TEST_CASE("grid: boundary quadrature and normal derivative on the disc") {
  DomainGrid g = build_domain(ShapeSpec::parse("disc:res=64"));
  ScalarField one = make_field(g, 1.0);
  CHECK(boundary_integral(one) == doctest::Approx(perimeter(g)).epsilon(1e-12));

  // f = |p - c|^2 / 2 has normal derivative (p - c).n, exact for full stencils
  ScalarField f = eval_on_grid(
      g, [](double x, double y) { return 0.5 * ((x - 0.5) * (x - 0.5) + (y - 0.5) * (y - 0.5)); });
  std::vector<double> dn = boundary_normal_derivative(f);
  double worst = 0;
  for (size_t k = 0; k < dn.size(); ++k) {
    auto& b = g.boundary[k];
    double exact = (b.cx - 0.5) * b.nx + (b.cy - 0.5) * b.ny;
    worst = std::max(worst, std::abs(dn[k] - exact));
  }
  CHECK(worst < 3 * g.h);  // first-order stencil fallbacks near ragged cells
}

TEST_CASE("grid: pacman non-convexity witness") {
  DomainGrid g = build_domain(ShapeSpec::parse("pacman:res=64"));
  CHECK(!g.convex);
  // convexity would force (n1 - n2).(p1 - p2) >= 0 for all boundary pairs
  double most_negative = 0;
  for (size_t a = 0; a < g.boundary.size(); ++a)
    for (size_t b = a + 1; b < g.boundary.size(); ++b) {
      auto &fa = g.boundary[a], &fb = g.boundary[b];
      double dot = (fa.nx - fb.nx) * (fa.cx - fb.cx) + (fa.ny - fb.ny) * (fa.cy - fb.cy);
      most_negative = std::min(most_negative, dot);
    }
  CHECK(most_negative < -0.01);

  DomainGrid disc = build_domain(ShapeSpec::parse("disc:res=64"));
  double disc_most_negative = 0;
  for (size_t a = 0; a < disc.boundary.size(); ++a)
    for (size_t b = a + 1; b < disc.boundary.size(); ++b) {
      auto &fa = disc.boundary[a], &fb = disc.boundary[b];
      double dot = (fa.nx - fb.nx) * (fa.cx - fb.cx) + (fa.ny - fb.ny) * (fa.cy - fb.cy);
      disc_most_negative = std::min(disc_most_negative, dot);
    }
  CHECK(disc_most_negative > -1e-6);
}

TEST_CASE("grid: all shapes build and stay connected") {
  for (const char* spec : {"square:res=8", "disc:res=8", "annulus_sector:res=16",
                           "pacman:res=16", "dumbbell:res=8", "dumbbell:res=32"}) {
    DomainGrid g = build_domain(ShapeSpec::parse(spec));
    CHECK(g.cells() > 0);
    CHECK(!g.boundary.empty());
  }
}

TEST_CASE("grid: rejection paths") {
  CHECK_THROWS(build_domain(ShapeSpec::parse("square:res=4")));
  CHECK_THROWS(build_domain(ShapeSpec::parse("blob:res=16")));
  CHECK_THROWS(build_domain(ShapeSpec::parse("disc:res=16,radius=0.9")));
  CHECK_THROWS(ShapeSpec::parse("disc:radius=abc"));

  // two separated blobs are rejected
  int n = 16;
  std::vector<std::uint8_t> mask(n * n, 0);
  for (int j = 2; j < 6; ++j)
    for (int i = 2; i < 6; ++i) mask[i + n * j] = 1;
  for (int j = 10; j < 14; ++j)
    for (int i = 10; i < 14; ++i) mask[i + n * j] = 1;
  CHECK_THROWS(domain_from_mask(n, n, 1.0 / n, mask));

  std::vector<std::uint8_t> empty(n * n, 0);
  CHECK_THROWS(domain_from_mask(n, n, 1.0 / n, empty));

  // defensive: boundary-free grid rejects boundary quadrature
  DomainGrid g = build_domain(ShapeSpec::parse("square:res=8"));
  ScalarField one = make_field(g, 1.0);
  DomainGrid stripped = g;
  stripped.boundary.clear();
  ScalarField one2 = one;
  one2.g = &stripped;
  CHECK_THROWS(boundary_integral(one2));
}

TEST_CASE("grid: serialization round-trip") {
  DomainGrid g = build_domain(ShapeSpec::parse("pacman:res=24"));
  std::string gp = "test_grid_roundtrip.bin";
  save_grid(g, gp);
  DomainGrid g2 = load_grid(gp);
  CHECK(g2.nx == g.nx);
  CHECK(g2.ny == g.ny);
  CHECK(g2.h == g.h);
  CHECK(g2.mask == g.mask);
  CHECK(g2.cells() == g.cells());

  std::mt19937_64 rng(3);
  ScalarField f = random_field(g, rng);
  std::string fp = "test_field_roundtrip.bin";
  save_field(f, fp);
  ScalarField f2 = load_field(fp, g);
  CHECK((f2.v - f.v).abs().maxCoeff() == 0.0);

  // mismatched grid is rejected
  DomainGrid other = build_domain(ShapeSpec::parse("disc:res=24"));
  CHECK_THROWS(load_field(fp, other));
  CHECK_THROWS(load_grid("no_such_file.bin"));
  std::remove(gp.c_str());
  std::remove(fp.c_str());
}
