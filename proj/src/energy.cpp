#include "mobiflow/energy.hpp"

#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace mobiflow {

namespace {

constexpr double kLogClip = 1e-12;  // clipped interior for the logarithmic potential

double clip01(double r) { return std::min(1.0 - kLogClip, std::max(kLogClip, r)); }

double xlogx(double r) { return r <= 0 ? 0.0 : r * std::log(r); }

std::pair<std::string, std::string> split_head(const std::string& text) {
  auto pos = text.find(':');
  if (pos == std::string::npos) return {text, ""};
  return {text.substr(0, pos), text.substr(pos + 1)};
}

}  // namespace

double GSpec::G(double r) const {
  switch (kind) {
    case binary_alloy: {
      double q = r * (1 - r);
      return theta * q * q;
    }
    case logarithmic:
      return theta * (xlogx(r) + xlogx(1 - r));
    case thin_film: {
      double g = beta - alpha + 1;
      return kappa * beta / ((beta - alpha) * g) * std::pow(std::max(r, 0.0), g);
    }
  }
  return 0;
}

double GSpec::G1(double r) const {
  switch (kind) {
    case binary_alloy:
      return theta * 2 * r * (1 - r) * (1 - 2 * r);
    case logarithmic: {
      double s = clip01(r);
      return theta * (std::log(s) - std::log(1 - s));
    }
    case thin_film:
      return kappa * beta / (beta - alpha) * std::pow(std::max(r, 0.0), beta - alpha);
  }
  return 0;
}

double GSpec::G2(double r) const {
  switch (kind) {
    case binary_alloy:
      return theta * (2 - 12 * r + 12 * r * r);
    case logarithmic: {
      double s = clip01(r);
      return theta * (1 / s + 1 / (1 - s));
    }
    case thin_film:
      return kappa * beta * std::pow(std::max(r, 0.0), beta - alpha - 1);
  }
  return 0;
}

double GSpec::Gc1(double r) const {
  switch (kind) {
    case binary_alloy:
      // G = theta (r^4 + r^2) + theta (-2 r^3); first part convex on R
      return theta * (4 * r * r * r + 2 * r);
    case logarithmic:
      return G1(r);  // convex as-is (theta > 0)
    case thin_film:
      return kappa > 0 ? G1(r) : 0.0;  // power is convex iff kappa > 0
  }
  return 0;
}

double GSpec::Gc2(double r) const {
  switch (kind) {
    case binary_alloy:
      return theta * (12 * r * r + 2);
    case logarithmic:
      return G2(r);
    case thin_film:
      return kappa > 0 ? G2(r) : 0.0;
  }
  return 0;
}

double GSpec::Ge1(double r) const { return G1(r) - Gc1(r); }

// value of the convex part Gc (anchored Gc(0) = 0 for binary; G itself otherwise)
static double gc_value(const GSpec& g, double r) {
  switch (g.kind) {
    case GSpec::binary_alloy:
      return g.theta * (r * r * r * r + r * r);
    case GSpec::logarithmic:
      return g.G(r);
    case GSpec::thin_film:
      return g.kappa > 0 ? g.G(r) : 0.0;
  }
  return 0;
}

double GSpec::max_abs_G2(double M) const {
  double lo = 0, hi = M;
  if (kind == logarithmic) {
    lo = 1e-3 * M;
    hi = M - 1e-3 * M;
  } else if (kind == thin_film && beta - alpha < 1) {
    lo = 1e-3 * std::max(M, 1.0);  // avoid the integrable singularity at 0
  }
  double best = 0;
  int n = 4096;
  for (int i = 0; i <= n; ++i) {
    double r = lo + (hi - lo) * i / n;
    best = std::max(best, std::abs(G2(r)));
  }
  return best;
}

double GSpec::P(double r, const RegularizedMobility& m) const {
  if (r <= 0) return 0;
  // composite Simpson over a geometric ladder so endpoint singularities of
  // m G'' (integrable powers) are resolved
  double lo = std::max(1e-12 * r, 1e-14);
  auto f = [&](double s) { return m.m(s) * G2(s); };
  double acc = 0;
  int segments = 256;
  double ratio = std::pow(lo / r, 1.0 / segments);
  double b = r;
  for (int k = 0; k < segments; ++k) {
    double a = b * ratio;
    int sub = 8;
    double hseg = (b - a) / sub;
    double s4 = 0, s2 = 0;
    for (int j = 1; j < sub; j += 2) s4 += f(a + j * hseg);
    for (int j = 2; j < sub; j += 2) s2 += f(a + j * hseg);
    acc += hseg / 3 * (f(a) + 4 * s4 + 2 * s2 + f(b));
    b = a;
  }
  return acc;
}

GSpec GSpec::parse(const std::string& text) {
  auto [name, rest] = split_head(text);
  GSpec g;
  if (name == "binary_alloy")
    g.kind = binary_alloy;
  else if (name == "logarithmic")
    g.kind = logarithmic;
  else if (name == "thin_film")
    g.kind = thin_film;
  else
    throw std::invalid_argument("unknown potential '" + name + "'");

  bool saw_theta = false, saw_kappa = false, saw_alpha = false, saw_beta = false;
  std::stringstream ss(rest);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    auto eq = item.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("potential: expected key=value, got '" + item + "'");
    std::string key = item.substr(0, eq);
    double val;
    try {
      size_t used;
      val = std::stod(item.substr(eq + 1), &used);
      if (used != item.size() - eq - 1) throw std::invalid_argument("trailing");
    } catch (...) {
      throw std::invalid_argument("potential: bad number in '" + item + "'");
    }
    auto set = [&](double& slot, bool& seen) {
      if (seen) throw std::invalid_argument("potential: duplicate key '" + key + "'");
      slot = val;
      seen = true;
    };
    if (key == "theta")
      set(g.theta, saw_theta);
    else if (key == "kappa")
      set(g.kappa, saw_kappa);
    else if (key == "alpha")
      set(g.alpha, saw_alpha);
    else if (key == "beta")
      set(g.beta, saw_beta);
    else
      throw std::invalid_argument("potential: unknown key '" + key + "'");
  }

  if (g.kind != thin_film && (saw_kappa || saw_alpha || saw_beta))
    throw std::invalid_argument("potential: kappa/alpha/beta only apply to thin_film");
  if (g.kind == thin_film && saw_theta) throw std::invalid_argument("potential: theta does not apply to thin_film");
  if (g.kind != thin_film && g.theta <= 0) throw std::invalid_argument("potential: need theta > 0");
  if (g.kind == thin_film) {
    if (!(g.beta > g.alpha)) throw std::invalid_argument("potential: thin_film needs beta > alpha");
    if (g.alpha < 0) throw std::invalid_argument("potential: thin_film needs alpha >= 0");
    if (g.kappa == 0) throw std::invalid_argument("potential: thin_film needs kappa != 0");
  }
  return g;
}

std::string GSpec::to_string() const {
  std::ostringstream os;
  switch (kind) {
    case binary_alloy:
      os << "binary_alloy:theta=" << theta;
      break;
    case logarithmic:
      os << "logarithmic:theta=" << theta;
      break;
    case thin_film:
      os << "thin_film:kappa=" << kappa << ",alpha=" << alpha << ",beta=" << beta;
      break;
  }
  return os.str();
}

ConditionGReport check_condition_G(const GSpec& g, const RegularizedMobility& m) {
  ConditionGReport rep;
  std::ostringstream os;
  if (m.base.bounded() && m.eps == 0) {
    double M = m.M();
    // inf of m G'' over a grid clipped away from removable log endpoints
    double lo = (g.kind == GSpec::logarithmic) ? 1e-9 : 0.0;
    double inf_mg2 = std::numeric_limits<double>::infinity();
    int n = 20000;
    for (int i = 0; i <= n; ++i) {
      double r = lo + (M - 2 * lo) * i / n;
      inf_mg2 = std::min(inf_mg2, m.m(r) * g.G2(r));
    }
    // pressure continuity at M: Cauchy criterion on the improper integral
    double p1 = g.P(M - 1e-6 * M, m), p2 = g.P(M - 1e-9 * M, m);
    bool p_cont = std::abs(p2 - p1) <= 1e-3 * (1 + std::abs(p2));
    os << "bounded: inf m*G''=" << inf_mg2 << ", |P(M-)-P(M--)|=" << std::abs(p2 - p1);
    rep.ok = std::isfinite(inf_mg2) && inf_mg2 > -1e15 && p_cont;
  } else if (!m.base.bounded() && m.eps == 0) {
    // C with m G'' >= -C (1+m) over a log-spaced grid
    double C = 0;
    for (int i = 0; i <= 400; ++i) {
      double r = std::pow(10.0, -6.0 + 10.0 * i / 400);  // 1e-6 .. 1e4
      double v = m.m(r) * g.G2(r);
      C = std::max(C, -v / (1 + m.m(r)));
    }
    // growth: P(s) / (s^q + |G(s)|) -> 0 with q the mobility growth exponent
    double q = (m.base.kind == MobilityKind::power) ? m.base.alpha : 1.0;
    double r0 = g.P(1e2, m) / (std::pow(1e2, q) + std::abs(g.G(1e2)));
    double r1 = g.P(1e4, m) / (std::pow(1e4, q) + std::abs(g.G(1e4)));
    bool vanishes = std::abs(r1) < std::max(0.5 * std::abs(r0), 1e-3);
    os << "unbounded: C=" << C << ", growth ratios " << r0 << " -> " << r1;
    rep.ok = C < 1e15 && vanishes;
  } else {
    os << "regularized mobility (eps>0): condition applies to the raw mobility";
    rep.ok = false;
  }
  rep.detail = os.str();
  return rep;
}

double Energy::phi(double r) const {
  switch (kind) {
    case zero:
      return 0;
    case ks_internal:
      return p / ((p - alpha) * (p + 1 - alpha)) * std::pow(std::max(r, 0.0), p + 1 - alpha);
    case cahn_hilliard:
      return gc_value(g, r);
  }
  return 0;
}

double Energy::phi1(double r) const {
  switch (kind) {
    case zero:
      return 0;
    case ks_internal:
      return p / (p - alpha) * std::pow(std::max(r, 0.0), p - alpha);
    case cahn_hilliard:
      return g.Gc1(r);
  }
  return 0;
}

double Energy::phi2(double r) const {
  switch (kind) {
    case zero:
      return 0;
    case ks_internal:
      return p * std::pow(std::max(r, 1e-300), p - alpha - 1);
    case cahn_hilliard:
      return g.Gc2(r);
  }
  return 0;
}

double Energy::eval(const ScalarField& u) const {
  const DomainGrid& grid = *u.g;
  double h2 = grid.h * grid.h;
  switch (kind) {
    case zero:
      return 0;
    case ks_internal: {
      double acc = 0;
      for (int c = 0; c < grid.cells(); ++c) acc += phi(u.v[c]);
      acc *= h2;
      if (W.v.size()) acc += inner(W, u);
      return acc;
    }
    case cahn_hilliard: {
      VectorField gu = gradient(u);
      double acc = 0.5 * inner(gu, gu);
      for (int c = 0; c < grid.cells(); ++c) acc += h2 * g.G(u.v[c]);
      return acc;
    }
  }
  return 0;
}

ScalarField Energy::first_variation(const ScalarField& u) const {
  const DomainGrid& grid = *u.g;
  ScalarField out = make_field(grid);
  switch (kind) {
    case zero:
      break;
    case ks_internal:
      for (int c = 0; c < grid.cells(); ++c) out.v[c] = phi1(u.v[c]);
      if (W.v.size()) out.v += W.v;
      break;
    case cahn_hilliard: {
      ScalarField lap = laplacian_neumann(u);
      for (int c = 0; c < grid.cells(); ++c) out.v[c] = -lap.v[c] + g.G1(u.v[c]);
      break;
    }
  }
  return out;
}

Energy Energy::make_zero() { return Energy{}; }

Energy Energy::make_ks(double p, double alpha, const ScalarField& W) {
  if (!(p > alpha)) throw std::invalid_argument("ks energy: need p > alpha");
  Energy e;
  e.kind = ks_internal;
  e.p = p;
  e.alpha = alpha;
  e.W = W;
  return e;
}

Energy Energy::make_ch(const GSpec& g) {
  Energy e;
  e.kind = cahn_hilliard;
  e.g = g;
  return e;
}

}  // namespace mobiflow
