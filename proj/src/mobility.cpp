#include "mobiflow/mobility.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace mobiflow {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_params(const Mobility& m) {
  switch (m.kind) {
    case MobilityKind::power:
      if (!(m.alpha > 0 && m.alpha <= 1))
        throw std::invalid_argument("mobility power: need 0 < alpha <= 1");
      break;
    case MobilityKind::log1p:
      break;
    case MobilityKind::power_product:
      if (!(m.alpha >= 0 && m.beta >= 0 && m.alpha + m.beta > 0 && m.alpha + m.beta <= 1))
        throw std::invalid_argument("mobility power_product: need 0 < alpha+beta <= 1");
      if (!(m.c > 0)) throw std::invalid_argument("mobility power_product: need c > 0");
      break;
    case MobilityKind::bounded_power:
      if (!(m.alpha > 0 && m.alpha <= 1))
        throw std::invalid_argument("mobility bounded_power: need 0 < alpha <= 1");
      if (!(m.M > 0 && std::isfinite(m.M)))
        throw std::invalid_argument("mobility bounded_power: need finite M > 0");
      break;
  }
}

std::map<std::string, double> parse_kv(const std::string& text) {
  std::map<std::string, double> kv;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto eq = item.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("mobility: expected key=value, got '" + item + "'");
    std::string k = item.substr(0, eq), v = item.substr(eq + 1);
    size_t pos = 0;
    double val = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("mobility: bad number '" + v + "'");
    if (kv.count(k)) throw std::invalid_argument("mobility: duplicate key '" + k + "'");
    kv[k] = val;
  }
  return kv;
}

}  // namespace

Mobility Mobility::parse(const std::string& text) {
  Mobility m;
  auto colon = text.find(':');
  std::string name = text.substr(0, colon);
  std::map<std::string, double> kv;
  if (colon != std::string::npos) kv = parse_kv(text.substr(colon + 1));
  auto take = [&](const std::string& k, double dflt) {
    auto it = kv.find(k);
    if (it == kv.end()) return dflt;
    double v = it->second;
    kv.erase(it);
    return v;
  };
  if (name == "power") {
    m.kind = MobilityKind::power;
    m.alpha = take("alpha", 0.5);
    m.M = kInf;
  } else if (name == "log1p") {
    m.kind = MobilityKind::log1p;
    m.M = kInf;
  } else if (name == "power_product") {
    m.kind = MobilityKind::power_product;
    m.alpha = take("alpha", 0.3);
    m.beta = take("beta", 0.3);
    m.c = take("c", 1.0);
    m.M = kInf;
  } else if (name == "bounded_power") {
    m.kind = MobilityKind::bounded_power;
    m.alpha = take("alpha", 1.0);
    m.M = take("M", 1.0);
  } else if (name == "linear") {
    m.kind = MobilityKind::power_product;
    m.alpha = 1.0;
    m.beta = 0.0;
    m.c = 1.0;
    m.M = kInf;
  } else {
    throw std::invalid_argument("unknown mobility '" + name + "'");
  }
  if (!kv.empty()) throw std::invalid_argument("mobility: unknown key '" + kv.begin()->first + "'");
  check_params(m);
  return m;
}

std::string Mobility::to_string() const {
  std::ostringstream os;
  switch (kind) {
    case MobilityKind::power: os << "power:alpha=" << alpha; break;
    case MobilityKind::log1p: os << "log1p"; break;
    case MobilityKind::power_product:
      os << "power_product:alpha=" << alpha << ",beta=" << beta << ",c=" << c;
      break;
    case MobilityKind::bounded_power:
      os << "bounded_power:alpha=" << alpha << ",M=" << M;
      break;
  }
  return os.str();
}

double Mobility::operator()(double r) const {
  switch (kind) {
    case MobilityKind::power: return std::pow(r, alpha);
    case MobilityKind::log1p: return std::log1p(r);
    case MobilityKind::power_product: return std::pow(r, alpha) * std::pow(r + c, beta);
    case MobilityKind::bounded_power: return std::pow(r * (M - r), alpha);
  }
  return 0;
}

namespace {

// coef * pow(base, expo) with an explicit zero-coefficient guard so that
// degenerate exponents (alpha = 1, beta = 0, ...) do not produce 0 * inf
double term(double coef, double base, double expo) {
  return coef == 0.0 ? 0.0 : coef * std::pow(base, expo);
}

}  // namespace

double Mobility::d1(double r) const {
  switch (kind) {
    case MobilityKind::power: return term(alpha, r, alpha - 1);
    case MobilityKind::log1p: return 1.0 / (1.0 + r);
    case MobilityKind::power_product:
      return term(alpha, r, alpha - 1) * std::pow(r + c, beta) +
             term(beta, r + c, beta - 1) * std::pow(r, alpha);
    case MobilityKind::bounded_power:
      return term(alpha * (M - 2 * r), r * (M - r), alpha - 1);
  }
  return 0;
}

double Mobility::d2(double r) const {
  switch (kind) {
    case MobilityKind::power: return term(alpha * (alpha - 1), r, alpha - 2);
    case MobilityKind::log1p: return -1.0 / ((1.0 + r) * (1.0 + r));
    case MobilityKind::power_product:
      return term(alpha * (alpha - 1), r, alpha - 2) * std::pow(r + c, beta) +
             2 * term(alpha, r, alpha - 1) * term(beta, r + c, beta - 1) +
             term(beta * (beta - 1), r + c, beta - 2) * std::pow(r, alpha);
    case MobilityKind::bounded_power: {
      double q = r * (M - r), q1 = M - 2 * r;
      return term(alpha * (alpha - 1) * q1 * q1, q, alpha - 2) - term(2 * alpha, q, alpha - 1);
    }
  }
  return 0;
}

namespace {

void check_range(const RegularizedMobility& reg, double r) {
  if (r < -1e-12) throw std::domain_error("mobility: r < 0");
  if (reg.base.bounded() && r > reg.base.M + 1e-12)
    throw std::domain_error("mobility: r > M for bounded mobility");
}

}  // namespace

double RegularizedMobility::m(double r) const {
  check_range(*this, r);
  r = std::max(r, 0.0);
  if (base.bounded()) {
    double M_ = base.M;
    return std::pow((r + eps) * (M_ - r + eps), base.alpha);
  }
  return base(r + eps);
}

double RegularizedMobility::m1(double r) const {
  check_range(*this, r);
  r = std::max(r, 0.0);
  if (base.bounded()) {
    double M_ = base.M, a = base.alpha;
    double q = (r + eps) * (M_ - r + eps), q1 = M_ - 2 * r;
    return term(a * q1, q, a - 1);
  }
  return base.d1(r + eps);
}

double RegularizedMobility::m2(double r) const {
  check_range(*this, r);
  r = std::max(r, 0.0);
  if (base.bounded()) {
    double M_ = base.M, a = base.alpha;
    double q = (r + eps) * (M_ - r + eps), q1 = M_ - 2 * r;
    return term(a * (a - 1) * q1 * q1, q, a - 2) - term(2 * a, q, a - 1);
  }
  return base.d2(r + eps);
}

Eigen::ArrayXd RegularizedMobility::m(const Eigen::ArrayXd& r) const {
  Eigen::ArrayXd out(r.size());
  for (Eigen::Index i = 0; i < r.size(); ++i) out[i] = m(r[i]);
  return out;
}

namespace {

// composite r-grid: geometric ladders toward both endpoints plus a uniform
// sweep; covers boundary layers of width ~eps as well as the bulk
std::vector<double> sup_grid(double lo, double hi, int n_uniform, int n_geo) {
  std::vector<double> r;
  r.push_back(lo);
  double span = hi - lo;
  for (int k = n_geo; k >= 1; --k) r.push_back(lo + span * 0.5 * std::pow(10.0, -15.0 * k / n_geo));
  for (int i = 1; i < n_uniform; ++i) r.push_back(lo + span * i / n_uniform);
  for (int k = 1; k <= n_geo; ++k) r.push_back(hi - span * 0.5 * std::pow(10.0, -15.0 * k / n_geo));
  r.push_back(hi);
  std::sort(r.begin(), r.end());
  r.erase(std::unique(r.begin(), r.end()), r.end());
  return r;
}

// grid scan followed by a golden-section polish around every local maximum
template <class F>
double sup_over_grid(const std::vector<double>& grid, F f) {
  int n = (int)grid.size();
  std::vector<double> val(n);
  for (int i = 0; i < n; ++i) val[i] = f(grid[i]);
  double best = -kInf;
  for (int i = 0; i < n; ++i)
    if (!std::isnan(val[i])) best = std::max(best, val[i]);
  const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
  for (int i = 0; i < n; ++i) {
    bool local_max = !std::isnan(val[i]) &&
                     (i == 0 || std::isnan(val[i - 1]) || val[i] >= val[i - 1]) &&
                     (i == n - 1 || std::isnan(val[i + 1]) || val[i] >= val[i + 1]);
    if (!local_max || !std::isfinite(val[i])) continue;
    double a = grid[std::max(0, i - 1)], b = grid[std::min(n - 1, i + 1)];
    double x1 = b - gr * (b - a), x2 = a + gr * (b - a);
    double f1 = f(x1), f2 = f(x2);
    for (int it = 0; it < 80; ++it) {
      if (f1 < f2) {
        a = x1; x1 = x2; f1 = f2;
        x2 = a + gr * (b - a); f2 = f(x2);
      } else {
        b = x2; x2 = x1; f2 = f1;
        x1 = b - gr * (b - a); f1 = f(x1);
      }
    }
    best = std::max({best, f1, f2});
  }
  return best;
}

}  // namespace

SupConstants sup_constants(const RegularizedMobility& reg) {
  const Mobility& b = reg.base;
  SupConstants k;
  if (b.kind == MobilityKind::power && reg.eps > 0) {
    // closed forms: extrema at r = 0
    double a = b.alpha, e = reg.eps;
    if (a == 1.0) throw std::runtime_error("sup_constants: (M-A) violated, R non-finite (m'' = 0)");
    k.L = a * std::pow(e, a - 1);
    k.S = a * (1 - a) * std::pow(e, 2 * (a - 1));
    k.R = a / (1 - a);
    return k;
  }
  double hi = b.bounded() ? b.M : 1e6;
  std::vector<double> grid = sup_grid(0.0, hi, 20000, 90);
  if (!b.bounded()) {  // endpoint analysis: probe the decaying tail too
    for (double r : {3e6, 1e7, 1e8, 1e9, 1e12}) grid.push_back(r);
  }
  auto fL = [&](double r) { return std::abs(reg.m1(r)); };
  auto fS = [&](double r) { return std::abs(reg.m2(r) * reg.m(r)); };
  auto fR = [&](double r) {
    double m2 = reg.m2(r);
    if (std::abs(m2) < 1e-300) return std::numeric_limits<double>::quiet_NaN();
    return reg.m1(r) * reg.m1(r) / std::abs(m2 * reg.m(r));
  };
  double L = sup_over_grid(grid, fL);
  double S = sup_over_grid(grid, fS);
  double R = sup_over_grid(grid, fR);
  if (!std::isfinite(R) || R < 0 || R > 1e15)
    throw std::runtime_error("sup_constants: (M-A) violated, R non-finite");
  if (!std::isfinite(L) || !std::isfinite(S) || L > 1e15 || S > 1e15)
    throw std::runtime_error("sup_constants: (M-LSC) violated, L or S non-finite");
  k.L = L;
  k.S = S;
  k.R = R;
  return k;
}

ConditionReport check_conditions(const RegularizedMobility& reg) {
  ConditionReport rep;
  try {
    rep.sup = sup_constants(reg);
    rep.mlsc = true;
    rep.ma = true;
    rep.detail = "ok";
  } catch (const std::exception& e) {
    std::string msg = e.what();
    rep.mlsc = msg.find("M-LSC") == std::string::npos;
    rep.ma = msg.find("M-A") == std::string::npos;
    rep.detail = msg;
  }
  return rep;
}

namespace {

// cubic Hermite evaluation of (val, slope) tables at r; grid may be non-uniform
double hermite_eval(const Eigen::ArrayXd& grid, const Eigen::ArrayXd& val,
                    const Eigen::ArrayXd& slope, double r) {
  const double* lo = grid.data();
  const double* hi = grid.data() + grid.size();
  int i = (int)(std::upper_bound(lo, hi, r) - lo) - 1;
  i = std::clamp(i, 0, (int)grid.size() - 2);
  double dx = grid[i + 1] - grid[i];
  double s = (r - grid[i]) / dx;
  double h00 = (1 + 2 * s) * (1 - s) * (1 - s), h10 = s * (1 - s) * (1 - s);
  double h01 = s * s * (3 - 2 * s), h11 = s * s * (s - 1);
  return h00 * val[i] + h10 * dx * slope[i] + h01 * val[i + 1] + h11 * dx * slope[i + 1];
}

void check_entropy_range(const EntropyDensity& E, double& r) {
  if (r < -1e-12 || r > E.r_cap * (1 + 1e-12))
    throw std::domain_error("entropy: r outside tabulated range [0, r_cap]");
  r = std::clamp(r, 0.0, E.r_cap);
}

}  // namespace

double EntropyDensity::U(double r) const {
  check_entropy_range(*this, r);
  return hermite_eval(grid, U_tab, U1_tab, r);
}

double EntropyDensity::U1(double r) const {
  check_entropy_range(*this, r);
  return hermite_eval(grid, U1_tab, U2_tab, r);
}

EntropyDensity build_entropy(const RegularizedMobility& reg, int r_grid_size,
                             double r0, double r_cap) {
  if (r_grid_size < 256) throw std::invalid_argument("entropy: r_grid_size must be >= 256");
  if (!(r0 > 0)) throw std::invalid_argument("entropy: anchor r0 must be positive");
  if (reg.m(0.0) <= 0)
    throw std::invalid_argument("entropy: m_eps(0) must be positive (need eps > 0)");
  double cap = r_cap;
  if (cap < 0) cap = reg.base.bounded() ? reg.base.M : 64.0 * r0;
  if (reg.base.bounded()) cap = std::min(cap, reg.base.M);
  if (!(cap > r0)) throw std::invalid_argument("entropy: r_cap must exceed the anchor r0");

  // composite nodes: uniform bulk plus geometric ladders where 1/m_eps has
  // boundary layers (r = 0, and r = M for the bounded family)
  std::vector<double> nodes;
  int n_uni = r_grid_size, n_geo = std::max(64, r_grid_size / 16);
  for (int i = 0; i <= n_uni; ++i) nodes.push_back(cap * i / n_uni);
  for (int k = 1; k <= n_geo; ++k) nodes.push_back(cap * 0.5 * std::pow(10.0, -12.0 * k / n_geo));
  if (reg.base.bounded())
    for (int k = 1; k <= n_geo; ++k)
      nodes.push_back(cap - cap * 0.5 * std::pow(10.0, -12.0 * k / n_geo));
  std::sort(nodes.begin(), nodes.end());
  nodes.erase(std::unique(nodes.begin(), nodes.end()), nodes.end());

  int n = (int)nodes.size() - 1;
  EntropyDensity E;
  E.eps = reg.eps;
  E.r0 = r0;
  E.r_cap = cap;
  E.grid = Eigen::Map<Eigen::ArrayXd>(nodes.data(), nodes.size());
  E.U2_tab.resize(n + 1);
  for (int i = 0; i <= n; ++i) E.U2_tab[i] = 1.0 / reg.m(E.grid[i]);

  // U' by composite Simpson from 0
  Eigen::ArrayXd U1(n + 1);
  U1[0] = 0;
  for (int i = 0; i < n; ++i) {
    double a = E.grid[i], b2 = E.grid[i + 1], mid = 0.5 * (a + b2);
    double fa = 1.0 / reg.m(a), fm = 1.0 / reg.m(mid), fb = 1.0 / reg.m(b2);
    U1[i + 1] = U1[i] + (b2 - a) / 6.0 * (fa + 4 * fm + fb);
  }
  // U by exact integration of the cubic Hermite interpolant of U'
  Eigen::ArrayXd U(n + 1);
  U[0] = 0;
  for (int i = 0; i < n; ++i) {
    double dx = E.grid[i + 1] - E.grid[i];
    U[i + 1] = U[i] + dx / 2.0 * (U1[i] + U1[i + 1]) +
               dx * dx / 12.0 * (E.U2_tab[i] - E.U2_tab[i + 1]);
  }
  // anchor U(r0) = U'(r0) = 0 by subtracting the affine part
  double U1_at_r0 = hermite_eval(E.grid, U1, E.U2_tab, r0);
  double U_at_r0 = hermite_eval(E.grid, U, U1, r0);
  E.U1_tab = U1 - U1_at_r0;
  E.U_tab = U - U_at_r0 - U1_at_r0 * (E.grid - r0);
  return E;
}

double lambda_delta(const SupConstants& sup, double delta, double grad_inf,
                    double hess_inf, double sigma, double C, double C_tilde) {
  if (!(delta > 0)) throw std::invalid_argument("lambda_delta: delta must be positive");
  if (!(sigma > 0)) throw std::invalid_argument("lambda_delta: sigma must be positive");
  if (!(C >= 0) || !(C_tilde > 0)) throw std::invalid_argument("lambda_delta: need C >= 0, C_tilde > 0");
  double sigma_max = (1.0 / C_tilde) * std::min(1.0, 1.0 / sup.R);
  if (!(sigma < sigma_max))
    throw std::invalid_argument("lambda_delta: sigma not admissible (need sigma < " +
                                std::to_string(sigma_max) + ")");
  double lam = -(grad_inf * grad_inf / delta) * sup.S - hess_inf * sup.L - delta * C / sigma;
  return lam;  // <= 0 by construction
}

double uniform_gap(const RegularizedMobility& reg) {
  const Mobility& b = reg.base;
  if (b.bounded())
    return (std::pow(b.M + reg.eps, b.alpha) + std::pow(b.M, b.alpha)) * std::pow(reg.eps, b.alpha);
  return b(reg.eps);
}

double uniform_gap_numeric(const RegularizedMobility& reg, int n) {
  double hi = reg.base.bounded() ? reg.base.M : 100.0;
  double worst = 0;
  for (double r : sup_grid(0.0, hi, n, 40))
    worst = std::max(worst, reg.m(r) - reg.base(r));
  return worst;
}

}  // namespace mobiflow
