#include "doctest.h"
#include "mobiflow/mobility.hpp"

#include <cmath>

using namespace mobiflow;

namespace {

double fd1(const RegularizedMobility& reg, double r, double h = 1e-6) {
  return (reg.m(r + h) - reg.m(r - h)) / (2 * h);
}
double fd2(const RegularizedMobility& reg, double r, double h = 1e-5) {
  return (reg.m(r + h) - 2 * reg.m(r) + reg.m(r - h)) / (h * h);
}

}  // namespace

TEST_CASE("mobility: parse and evaluate") {
  Mobility p = Mobility::parse("power:alpha=0.5");
  CHECK(p(4.0) == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(p(0.0) == 0.0);

  Mobility lp = Mobility::parse("log1p");
  CHECK(lp(std::exp(1.0) - 1.0) == doctest::Approx(1.0).epsilon(1e-14));

  Mobility pp = Mobility::parse("power_product:alpha=0.3,beta=0.3,c=1.0");
  CHECK(pp(1.0) == doctest::Approx(std::pow(2.0, 0.3)).epsilon(1e-14));

  Mobility bp = Mobility::parse("bounded_power:alpha=1,M=1");
  RegularizedMobility reg{bp, 0.0};
  CHECK(reg.m(0.5) == doctest::Approx(0.25).epsilon(1e-14));  // r(1-r) at the midpoint
  CHECK(reg.m(0.0) == 0.0);
  CHECK(reg.m(1.0) == 0.0);

  Mobility lin = Mobility::parse("linear");
  CHECK(lin(0.7) == doctest::Approx(0.7).epsilon(1e-14));
  CHECK(lin.d1(0.0) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(lin.d2(0.5) == 0.0);

  CHECK_THROWS(Mobility::parse("power:alpha=1.2"));
  CHECK_THROWS(Mobility::parse("power:alpha=0"));
  CHECK_THROWS(Mobility::parse("power_product:alpha=0.6,beta=0.6"));
  CHECK_THROWS(Mobility::parse("bounded_power:alpha=0.5,M=-1"));
  CHECK_THROWS(Mobility::parse("nope"));
  CHECK_THROWS(Mobility::parse("power:alpha=0.5,alpha=0.6"));
  CHECK_THROWS(Mobility::parse("power:zeta=0.5"));

  // range errors
  RegularizedMobility rb{bp, 0.01};
  CHECK_THROWS(rb.m(1.5));
  CHECK_THROWS(rb.m(-0.5));
}

TEST_CASE("mobility: derivatives match finite differences") {
  for (const char* spec : {"power:alpha=0.3", "power:alpha=0.8", "log1p",
                           "power_product:alpha=0.3,beta=0.3,c=1.0",
                           "bounded_power:alpha=0.5,M=2", "linear"}) {
    Mobility base = Mobility::parse(spec);
    RegularizedMobility reg{base, 0.1};
    for (double r : {0.05, 0.3, 1.0, 1.7}) {
      if (base.bounded() && r >= base.M) continue;
      CHECK(reg.m1(r) == doctest::Approx(fd1(reg, r)).epsilon(1e-6));
      CHECK(reg.m2(r) == doctest::Approx(fd2(reg, r)).epsilon(2e-4));
    }
  }
}

TEST_CASE("mobility: concavity and monotonicity in eps") {
  for (const char* spec : {"power:alpha=0.5", "log1p",
                           "power_product:alpha=0.3,beta=0.3,c=1.0",
                           "bounded_power:alpha=0.7,M=1"}) {
    Mobility base = Mobility::parse(spec);
    RegularizedMobility r1{base, 0.05}, r2{base, 0.2};
    double hi = base.bounded() ? base.M : 5.0;
    for (int i = 0; i <= 200; ++i) {
      double r = hi * i / 200.0;
      CHECK(r1.m2(r) <= 1e-12);                   // concave
      CHECK(base(r) <= r1.m(r) + 1e-12);          // m <= m_eps1
      CHECK(r1.m(r) <= r2.m(r) + 1e-12);          // m_eps1 <= m_eps2 (eps1 < eps2)
    }
  }
}

TEST_CASE("mobility: power sup constants closed form") {
  // L = alpha/eps^(1-alpha), S = alpha(1-alpha)/eps^(2(1-alpha)), R = alpha/(1-alpha)
  RegularizedMobility reg{Mobility::parse("power:alpha=0.5"), 0.04};
  SupConstants k = sup_constants(reg);
  CHECK(k.L == doctest::Approx(2.5).epsilon(1e-12));
  CHECK(k.S == doctest::Approx(6.25).epsilon(1e-12));
  CHECK(k.R == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("mobility: numeric sups agree with analysis") {
  // log1p: L and R extremal at r = 0; |m'' m| = log(s)/s^2 peaks at s = sqrt(e)
  RegularizedMobility lg{Mobility::parse("log1p"), 0.5};
  SupConstants k = sup_constants(lg);
  CHECK(k.L == doctest::Approx(1.0 / 1.5).epsilon(1e-10));
  CHECK(k.S == doctest::Approx(0.5 / std::exp(1.0)).epsilon(1e-10));
  CHECK(k.R == doctest::Approx(1.0 / std::log(1.5)).epsilon(1e-10));

  // bounded_power alpha=1: L = M at the endpoints, S = 2 q(M/2), R at r = 0
  double M = 1, e = 0.1;
  RegularizedMobility bp{Mobility::parse("bounded_power:alpha=1,M=1"), e};
  SupConstants kb = sup_constants(bp);
  CHECK(kb.L == doctest::Approx(M).epsilon(1e-10));
  CHECK(kb.S == doctest::Approx(2 * (M / 2 + e) * (M / 2 + e)).epsilon(1e-10));
  CHECK(kb.R == doctest::Approx(M * M / (2 * e * (M + e))).epsilon(1e-8));
}

TEST_CASE("mobility: condition failures are named") {
  // linear mobility: m'' = 0, (M-A) ratio diverges
  RegularizedMobility lin{Mobility::parse("linear"), 0.1};
  CHECK_THROWS_WITH_AS(sup_constants(lin), doctest::Contains("M-A"), std::runtime_error);
  ConditionReport rep = check_conditions(lin);
  CHECK(rep.mlsc);
  CHECK(!rep.ma);

  // unregularized power: m' blows up at 0, (M-LSC) fails
  RegularizedMobility rawpow{Mobility::parse("power:alpha=0.5"), 0.0};
  ConditionReport rep2 = check_conditions(rawpow);
  CHECK(!rep2.mlsc);

  // unregularized log1p: L, S fine but R diverges at 0
  RegularizedMobility rawlog{Mobility::parse("log1p"), 0.0};
  ConditionReport rep3 = check_conditions(rawlog);
  CHECK(!rep3.ma);

  // regularized families all satisfy both conditions
  for (const char* spec : {"power:alpha=0.5", "log1p",
                           "power_product:alpha=0.3,beta=0.3,c=1.0",
                           "bounded_power:alpha=1,M=1"}) {
    RegularizedMobility reg{Mobility::parse(spec), 0.1};
    ConditionReport r = check_conditions(reg);
    CHECK(r.mlsc);
    CHECK(r.ma);
  }
}

TEST_CASE("mobility: entropy matches the linear closed form") {
  // U'' = 1/(r+eps) integrates to U(r) = (r+eps)log(r+eps) - r log(r0+eps) + ...,
  // anchored U(r0) = U'(r0) = 0
  double eps = 0.1, r0 = 1.0;
  RegularizedMobility lin{Mobility::parse("linear"), eps};
  EntropyDensity E = build_entropy(lin, 4096, r0, 64.0);
  auto exactU1 = [&](double r) { return std::log(r + eps) - std::log(r0 + eps); };
  auto exactU = [&](double r) {
    return (r + eps) * std::log(r + eps) - (r + eps) -
           ((r0 + eps) * std::log(r0 + eps) - (r0 + eps)) - std::log(r0 + eps) * (r - r0);
  };
  for (double r : {0.0, 0.01, 0.3, 1.0, 2.5, 10.0, 63.0}) {
    CHECK(E.U(r) == doctest::Approx(exactU(r)).epsilon(1e-6));
    CHECK(E.U1(r) == doctest::Approx(exactU1(r)).epsilon(1e-6));
  }
  CHECK(std::abs(E.U(r0)) < 1e-12);
  CHECK(std::abs(E.U1(r0)) < 1e-12);
  CHECK_THROWS(E.U(65.0));
  CHECK_THROWS(build_entropy(lin, 128, r0));

  // U'' m_eps = 1 across families, via finite differences of U'
  for (const char* spec : {"power:alpha=0.5", "log1p", "bounded_power:alpha=1,M=1"}) {
    RegularizedMobility reg{Mobility::parse(spec), 0.05};
    double cap = reg.base.bounded() ? reg.base.M : 8.0;
    EntropyDensity ent = build_entropy(reg, 4096, 0.5, cap);
    for (double r : {0.1, 0.4, 0.7}) {
      double d = 1e-5;
      double u2 = (ent.U1(r + d) - ent.U1(r - d)) / (2 * d);
      CHECK(u2 * reg.m(r) == doctest::Approx(1.0).epsilon(1e-4));
    }
  }
}

TEST_CASE("mobility: lambda_delta composition") {
  RegularizedMobility reg{Mobility::parse("power:alpha=0.5"), 0.04};
  SupConstants k = sup_constants(reg);  // L = 2.5, S = 6.25, R = 1

  CHECK(lambda_delta(k, 1.0, 1.0, 1.0, 0.1, 1.0, 1.0) == doctest::Approx(-18.75).epsilon(1e-12));
  CHECK(lambda_delta(k, 0.5, 1.0, 1.0, 0.05, 2.0, 2.0) == doctest::Approx(-35.0).epsilon(1e-12));
  CHECK(lambda_delta(k, 1.0, 0.0, 0.0, 0.1, 1.0, 1.0) == doctest::Approx(-10.0).epsilon(1e-12));

  // lambda is never positive for admissible inputs
  CHECK(lambda_delta(k, 2.0, 0.3, 0.7, 0.2, 0.5, 1.0) <= 0.0);

  // inadmissible sigma: sigma >= (1/C_tilde) min(1, 1/R)
  CHECK_THROWS(lambda_delta(k, 1.0, 1.0, 1.0, 1.5, 1.0, 1.0));
  CHECK_THROWS(lambda_delta(k, 1.0, 1.0, 1.0, 0.6, 1.0, 2.0));
  CHECK_THROWS(lambda_delta(k, 0.0, 1.0, 1.0, 0.1, 1.0, 1.0));
}

TEST_CASE("mobility: uniform regularization gap") {
  // bounded: ((M+eps)^a + M^a) eps^a ; unbounded: m(eps)
  RegularizedMobility bp{Mobility::parse("bounded_power:alpha=0.5,M=1"), 0.01};
  CHECK(uniform_gap(bp) ==
        doctest::Approx((std::sqrt(1.01) + 1.0) * 0.1).epsilon(1e-12));
  for (const char* spec : {"power:alpha=0.3", "power:alpha=0.8", "log1p",
                           "power_product:alpha=0.3,beta=0.3,c=1.0",
                           "bounded_power:alpha=0.5,M=1", "bounded_power:alpha=1,M=1"}) {
    for (double eps : {0.1, 0.01, 0.001}) {
      RegularizedMobility reg{Mobility::parse(spec), eps};
      CHECK(uniform_gap_numeric(reg) <= uniform_gap(reg) * (1 + 1e-9));
    }
  }
}
