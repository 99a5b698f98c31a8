#include "mobiflow/transport.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>

namespace mobiflow {

namespace {

using Eigen::ArrayXd;

double clampd(double x, double lo, double hi) { return std::min(hi, std::max(lo, x)); }

// guarded Newton for a strongly convex scalar problem (q'' >= 1) given q' and
// q''; keeps a sign bracket [lo, hi] with q'(lo) <= 0 <= q'(hi)
template <class D1, class D2>
double guarded_newton(double lo, double hi, double warm, const D1& q1, const D2& q2) {
  double d;
  d = q1(lo);
  if (std::isfinite(d) && d >= 0) return lo;
  if (std::isfinite(hi)) {
    d = q1(hi);
    if (std::isfinite(d) && d <= 0) return hi;
  } else {
    hi = std::max(1.0, std::max(warm, lo)) * 2;
    int guard = 0;
    while (!(q1(hi) > 0) && ++guard < 300) hi *= 2;
  }
  double r = clampd(warm, lo, hi);
  if (!(r > lo) || !(r < hi)) r = 0.5 * (lo + hi);
  for (int it = 0; it < 120; ++it) {
    double d1 = q1(r);
    if (std::isfinite(d1)) {
      if (d1 > 0)
        hi = r;
      else
        lo = r;
      if (std::abs(d1) <= 1e-12 * (1 + std::abs(r))) break;  // q''>=1 => |r-r*| <= |d1|
    }
    double rn;
    double d2 = std::isfinite(d1) ? q2(r) : std::numeric_limits<double>::quiet_NaN();
    if (std::isfinite(d1) && std::isfinite(d2) && d2 > 0 && d2 < 1e12) {
      rn = r - d1 / d2;
      if (!(rn > lo && rn < hi) || rn == r) rn = 0.5 * (lo + hi);
    } else {
      rn = 0.5 * (lo + hi);  // singular curvature: fall back to bisection
    }
    if (hi - lo <= 1e-15 * (1 + std::abs(hi))) {
      r = 0.5 * (lo + hi);
      break;
    }
    r = rn;
  }
  return r;
}

}  // namespace

std::pair<double, double> prox_action_point(double zr, double zn, double c,
                                            const RegularizedMobility& reg, double rhi,
                                            double warm) {
  if (!(c >= 0)) throw std::invalid_argument("prox_action_point: c must be >= 0");
  double r;
  if (zn == 0 || c == 0) {
    r = clampd(zr, 0.0, rhi);
  } else {
    double czn2 = c * zn * zn;
    auto q1 = [&](double rr) {
      double m = reg.m(rr), m1 = reg.m1(rr);
      double den = m + 2 * c;
      return (rr - zr) - czn2 * m1 / (den * den);
    };
    auto q2 = [&](double rr) {
      double m = reg.m(rr), m1 = reg.m1(rr), m2 = reg.m2(rr);
      double den = m + 2 * c;
      return 1.0 - czn2 * (m2 * den - 2 * m1 * m1) / (den * den * den);
    };
    r = guarded_newton(0.0, rhi, warm, q1, q2);
  }
  double m = reg.m(r);
  double n = zn * m / (m + 2 * c);
  return {r, n};
}

namespace {

// pointwise terminal prox: min over r in [0, rhi] of a (phi(r) + w r) + (r-z)^2/2
double prox_terminal_point(double z, double a, const Energy& E, double w, double rhi,
                           double warm) {
  if (a == 0) return clampd(z, 0.0, rhi);
  auto q1 = [&](double r) { return a * (E.phi1(r) + w) + (r - z); };
  auto q2 = [&](double r) { return a * E.phi2(r) + 1.0; };
  return guarded_newton(0.0, rhi, warm, q1, q2);
}

struct BBEngine {
  const DomainGrid& g;
  const RegularizedMobility& reg;
  TransportOptions opt;
  int T, C, Fx, Fy, F;
  double ds, h, h2, cW, Mbox;

  bool terminal_free = false;
  const Energy* energy = nullptr;
  double two_tau = 0;
  ArrayXd lin_w;  // per-cell linear term in the terminal prox
  bool use_dir = false;

  ArrayXd mu0, nuT;

  ArrayXd P, Pprev, Vx, Vxprev, Vy, Vyprev;
  ArrayXd Yce, Yar, Yan, Ydx, Ydy;
  ArrayXd warmR, warmT;
  ArrayXd Apair;  // per-pair action at the latest prox output (finite in vacuum)

  ArrayXd sig_ce_c, tau_rho, deg;
  double tau_v = 0, sig_dir = 0, sig_ar = 1;
  double beta = 1;  // dual/primal step ratio (opt.step_ratio)

  double mass_mu = 0;
  int total_iterations = 0;
  double last_residual = 0, last_obj = 0;
  bool converged = false;

  BBEngine(const DomainGrid& grid, const RegularizedMobility& r, const TransportOptions& o)
      : g(grid), reg(r), opt(o) {
    if (opt.time_slices < 1) throw std::invalid_argument("transport: time_slices >= 1 required");
    if (opt.max_iters < opt.min_iters) throw std::invalid_argument("transport: max_iters < min_iters");
    if (!(opt.tol_continuity > 0) || !(opt.tol_action > 0))
      throw std::invalid_argument("transport: tolerances must be positive");
    if (!(opt.step_ratio > 0)) throw std::invalid_argument("transport: step_ratio must be positive");
    beta = opt.step_ratio;
    T = opt.time_slices;
    C = g.cells();
    Fx = g.nfx();
    Fy = g.nfy();
    F = Fx + Fy;
    ds = 1.0 / T;
    h = g.h;
    h2 = h * h;
    cW = h2 * ds;
    Mbox = reg.M();

    deg = ArrayXd::Zero(C);
    for (int f = 0; f < Fx; ++f) {
      deg[g.fx_l[f]] += 1;
      deg[g.fx_r[f]] += 1;
    }
    for (int f = 0; f < Fy; ++f) {
      deg[g.fy_l[f]] += 1;
      deg[g.fy_r[f]] += 1;
    }
  }

  // diagonal (row/column sum) preconditioner, scaled by the current ratio
  // beta: sigma *= beta, tau /= beta keeps ||Sigma^1/2 K Tau^1/2|| <= 1
  void setup_preconditioners() {
    sig_ce_c = beta / (2.0 / ds + deg / h);
    tau_v = 1.0 / (2.0 / h + 1.0) / beta;
    sig_dir = beta * h / 2.0;
    sig_ar = beta;
    tau_rho.resize((T + 1) * C);
    for (int k = 0; k <= T; ++k) {
      double sides = (k > 0 ? 1 : 0) + (k < T ? 1 : 0);
      for (int c = 0; c < C; ++c) {
        double col = sides / ds + 0.25 * deg[c] * sides;
        if (k == T && use_dir) col += deg[c] / h;
        tau_rho[k * C + c] = 1.0 / (beta * col);
      }
    }
  }

  // K and K^T for the stacked operator [continuity; midpoint-average & identity;
  // terminal gradient]
  void applyK(const ArrayXd& p, const ArrayXd& vx, const ArrayXd& vy, ArrayXd& oce, ArrayXd& oar,
              ArrayXd& oan, ArrayXd& odx, ArrayXd& ody) const {
    oce.resize(T * C);
    oar.resize(T * F);
    oan.resize(T * F);
    for (int k = 0; k < T; ++k) {
      for (int c = 0; c < C; ++c) oce[k * C + c] = (p[(k + 1) * C + c] - p[k * C + c]) / ds;
      for (int f = 0; f < Fx; ++f) {
        double flux = vx[k * Fx + f] / h;
        oce[k * C + g.fx_l[f]] += flux;
        oce[k * C + g.fx_r[f]] -= flux;
      }
      for (int f = 0; f < Fy; ++f) {
        double flux = vy[k * Fy + f] / h;
        oce[k * C + g.fy_l[f]] += flux;
        oce[k * C + g.fy_r[f]] -= flux;
      }
      const double* p0 = p.data() + k * C;
      const double* p1 = p.data() + (k + 1) * C;
      for (int f = 0; f < Fx; ++f) {
        int l = g.fx_l[f], r = g.fx_r[f];
        oar[k * F + f] = 0.25 * (p0[l] + p0[r] + p1[l] + p1[r]);
        oan[k * F + f] = vx[k * Fx + f];
      }
      for (int f = 0; f < Fy; ++f) {
        int l = g.fy_l[f], r = g.fy_r[f];
        oar[k * F + Fx + f] = 0.25 * (p0[l] + p0[r] + p1[l] + p1[r]);
        oan[k * F + Fx + f] = vy[k * Fy + f];
      }
    }
    if (use_dir) {
      odx.resize(Fx);
      ody.resize(Fy);
      const double* pT = p.data() + T * C;
      for (int f = 0; f < Fx; ++f) odx[f] = (pT[g.fx_r[f]] - pT[g.fx_l[f]]) / h;
      for (int f = 0; f < Fy; ++f) ody[f] = (pT[g.fy_r[f]] - pT[g.fy_l[f]]) / h;
    } else {
      odx.resize(0);
      ody.resize(0);
    }
  }

  void applyKT(const ArrayXd& yce, const ArrayXd& yar, const ArrayXd& yan, const ArrayXd& ydx,
               const ArrayXd& ydy, ArrayXd& op, ArrayXd& ovx, ArrayXd& ovy) const {
    op = ArrayXd::Zero((T + 1) * C);
    ovx.resize(T * Fx);
    ovy.resize(T * Fy);
    for (int k = 0; k < T; ++k) {
      for (int c = 0; c < C; ++c) {
        double y = yce[k * C + c];
        op[k * C + c] -= y / ds;
        op[(k + 1) * C + c] += y / ds;
      }
      double* q0 = op.data() + k * C;
      double* q1 = op.data() + (k + 1) * C;
      for (int f = 0; f < Fx; ++f) {
        int l = g.fx_l[f], r = g.fx_r[f];
        double q = 0.25 * yar[k * F + f];
        q0[l] += q;
        q0[r] += q;
        q1[l] += q;
        q1[r] += q;
        ovx[k * Fx + f] = (yce[k * C + l] - yce[k * C + r]) / h + yan[k * F + f];
      }
      for (int f = 0; f < Fy; ++f) {
        int l = g.fy_l[f], r = g.fy_r[f];
        double q = 0.25 * yar[k * F + Fx + f];
        q0[l] += q;
        q0[r] += q;
        q1[l] += q;
        q1[r] += q;
        ovy[k * Fy + f] = (yce[k * C + l] - yce[k * C + r]) / h + yan[k * F + Fx + f];
      }
    }
    if (use_dir && ydx.size()) {
      double* qT = op.data() + T * C;
      for (int f = 0; f < Fx; ++f) {
        qT[g.fx_l[f]] -= ydx[f] / h;
        qT[g.fx_r[f]] += ydx[f] / h;
      }
      for (int f = 0; f < Fy; ++f) {
        qT[g.fy_l[f]] -= ydy[f] / h;
        qT[g.fy_r[f]] += ydy[f] / h;
      }
    }
  }

  // audit: the diagonally preconditioned operator must be a contraction
  void norm_check() const {
    std::mt19937 rng(12345);
    std::normal_distribution<double> N(0, 1);
    ArrayXd yce(T * C), yar(T * F), yan(T * F), ydx(use_dir ? Fx : 0), ydy(use_dir ? Fy : 0);
    for (auto* a : {&yce, &yar, &yan, &ydx, &ydy})
      for (int i = 0; i < a->size(); ++i) (*a)[i] = N(rng);
    ArrayXd p, vx, vy, oce, oar, oan, odx, ody;
    double lam = 0;
    for (int it = 0; it < 40; ++it) {
      double nrm = std::sqrt((yce * yce).sum() + (yar * yar).sum() + (yan * yan).sum() +
                             (ydx * ydx).sum() + (ydy * ydy).sum());
      yce /= nrm; yar /= nrm; yan /= nrm;
      if (use_dir) { ydx /= nrm; ydy /= nrm; }
      applyKT(yce, yar, yan, ydx, ydy, p, vx, vy);
      p *= tau_rho;
      vx *= tau_v;
      vy *= tau_v;
      applyK(p, vx, vy, oce, oar, oan, odx, ody);
      for (int k = 0; k < T; ++k)
        for (int c = 0; c < C; ++c) oce[k * C + c] *= sig_ce_c[c];
      oar *= sig_ar;
      oan *= sig_ar;
      if (use_dir) {
        odx *= sig_dir;
        ody *= sig_dir;
      }
      lam = std::sqrt((oce * oce).sum() + (oar * oar).sum() + (oan * oan).sum() +
                      (odx * odx).sum() + (ody * ody).sum());
      yce = oce; yar = oar; yan = oan;
      if (use_dir) { ydx = odx; ydy = ody; }
    }
    if (lam > 1 + 1e-6) {
      std::ostringstream os;
      os << "transport: preconditioned operator norm " << lam << " > 1 (internal error)";
      throw std::logic_error(os.str());
    }
  }

  double continuity_residual() const {
    double acc = 0;
    for (int k = 0; k < T; ++k) {
      ArrayXd r(C);
      for (int c = 0; c < C; ++c) r[c] = (P[(k + 1) * C + c] - P[k * C + c]) / ds;
      for (int f = 0; f < Fx; ++f) {
        double flux = Vx[k * Fx + f] / h;
        r[g.fx_l[f]] += flux;
        r[g.fx_r[f]] -= flux;
      }
      for (int f = 0; f < Fy; ++f) {
        double flux = Vy[k * Fy + f] / h;
        r[g.fy_l[f]] += flux;
        r[g.fy_r[f]] -= flux;
      }
      acc += (r * r).sum();
    }
    return std::sqrt(acc * h2 * ds);
  }

  // evaluated at the prox-consistent pairs (r*, n*): n* = zn m/(m+2c) vanishes
  // with m, so vacuum faces contribute 0 instead of noise^2 / 0
  double kinetic_action() const { return Apair.sum(); }

  double objective() const {
    double obj = kinetic_action();
    if (terminal_free && energy) {
      const double* pT = P.data() + T * C;
      double e = 0;
      for (int c = 0; c < C; ++c) e += energy->phi(pT[c]) + lin_w[c] * pT[c];
      e *= h2;
      if (use_dir) {
        double ke = 0;
        for (int f = 0; f < Fx; ++f) {
          double d = (pT[g.fx_r[f]] - pT[g.fx_l[f]]) / h;
          ke += d * d;
        }
        for (int f = 0; f < Fy; ++f) {
          double d = (pT[g.fy_r[f]] - pT[g.fy_l[f]]) / h;
          ke += d * d;
        }
        e += 0.5 * ke * h2;
      }
      obj += two_tau * e;
    }
    return obj;
  }

  void init_state(const ArrayXd& mu, const ArrayXd* nu) {
    mu0 = mu;
    mass_mu = mu.sum() * h2;
    P.resize((T + 1) * C);
    for (int k = 0; k <= T; ++k) {
      double t = double(k) / T;
      for (int c = 0; c < C; ++c)
        P[k * C + c] = nu ? (1 - t) * mu[c] + t * (*nu)[c] : mu[c];
    }
    if (nu) nuT = *nu;
    Vx = ArrayXd::Zero(T * Fx);
    Vy = ArrayXd::Zero(T * Fy);
    Pprev = P;
    Vxprev = Vx;
    Vyprev = Vy;
    Yce = ArrayXd::Zero(T * C);
    Yar = ArrayXd::Zero(T * F);
    Yan = ArrayXd::Zero(T * F);
    Ydx = ArrayXd::Zero(use_dir ? Fx : 0);
    Ydy = ArrayXd::Zero(use_dir ? Fy : 0);
    warmR.resize(T * F);
    ArrayXd oce, oan, odx, ody;
    applyK(P, Vx, Vy, oce, warmR, oan, odx, ody);
    warmT = P.segment(T * C, C);
    Apair = ArrayXd::Zero(T * F);
  }

  void run() {
    converged = false;
    ArrayXd Pb, Vxb, Vyb, oce, oar, oan, odx, ody, ktp, ktvx, ktvy;
    std::vector<double> obj_hist;
    int window_checks = std::max(1, opt.stall_window / std::max(1, opt.check_every));
    int it = 0;
    for (; it < opt.max_iters; ++it) {
      bool checking = (it + 1) % opt.check_every == 0;
      // dual step at the extrapolated primal point
      Pb = 2 * P - Pprev;
      Vxb = 2 * Vx - Vxprev;
      Vyb = 2 * Vy - Vyprev;
      applyK(Pb, Vxb, Vyb, oce, oar, oan, odx, ody);
      for (int k = 0; k < T; ++k)
        for (int c = 0; c < C; ++c) Yce[k * C + c] += sig_ce_c[c] * oce[k * C + c];
      // Moreau with sigma = sig_ar on both action rows:
      // prox_{sig g*}(z) = z - sig prox_{g/sig}(z/sig), and the rescaled prox
      // is the same scalar problem with c -> c/sig.
      for (int i = 0; i < T * F; ++i) {
        double zr = Yar[i] + sig_ar * oar[i];
        double zn = Yan[i] + sig_ar * oan[i];
        auto [rs, ns] =
            prox_action_point(zr / sig_ar, zn / sig_ar, cW / sig_ar, reg, Mbox, warmR[i]);
        warmR[i] = rs;
        Yar[i] = zr - sig_ar * rs;
        Yan[i] = zn - sig_ar * ns;
        double m = reg.m(rs);
        Apair[i] = m > 0 ? cW * ns * ns / m : 0.0;
      }
      if (use_dir) {
        // g_dir(q) = tau h^2 sum q^2, so prox_{sig g*}(z) = z / (1 + sig/(2 tau h^2))
        double shrink = 1.0 / (1.0 + sig_dir / (two_tau * h2));
        Ydx = (Ydx + sig_dir * odx) * shrink;
        Ydy = (Ydy + sig_dir * ody) * shrink;
      }

      // primal step
      Pprev = P;
      Vxprev = Vx;
      Vyprev = Vy;
      applyKT(Yce, Yar, Yan, Ydx, Ydy, ktp, ktvx, ktvy);
      P -= tau_rho * ktp;
      Vx -= tau_v * ktvx;
      Vy -= tau_v * ktvy;
      // slice 0 fixed, interior slices boxed, terminal fixed or energy prox
      P.segment(0, C) = mu0;
      for (int k = 1; k < T; ++k)
        for (int c = 0; c < C; ++c) P[k * C + c] = clampd(P[k * C + c], 0.0, Mbox);
      if (!terminal_free) {
        P.segment(T * C, C) = nuT;
      } else {
        double* pT = P.data() + T * C;
        for (int c = 0; c < C; ++c) {
          double a = tau_rho[T * C + c] * two_tau * h2;
          pT[c] = prox_terminal_point(pT[c], a, *energy, lin_w[c], Mbox, warmT[c]);
          warmT[c] = pT[c];
        }
      }

      if (checking) {
        double res = continuity_residual() / std::max(mass_mu, 1e-300);
        double obj = objective();
        last_residual = res;
        last_obj = obj;
        obj_hist.push_back(obj);
        bool stalled = false;
        if ((int)obj_hist.size() > window_checks) {
          double prev = obj_hist[obj_hist.size() - 1 - window_checks];
          // absolute floor anchored to the mass scale so that a zero-action
          // fixed point (objective = rounding noise) still counts as stalled
          double scale = std::max(std::abs(obj), 1e-9 * std::max(mass_mu, 1e-300));
          stalled = std::abs(obj - prev) <= opt.tol_action * scale;
        }
        if (it + 1 >= opt.min_iters && res <= opt.tol_continuity && stalled) {
          converged = true;
          ++it;
          break;
        }
      }
    }
    total_iterations += it;
  }
};

}  // namespace

TransportResult wm_distance(const ScalarField& mu, const ScalarField& nu,
                            const RegularizedMobility& reg, const TransportOptions& opt) {
  const DomainGrid& g = *mu.g;
  if (nu.g != &g) throw std::invalid_argument("wm_distance: fields on different grids");
  double M = reg.M();
  for (const ScalarField* f : {&mu, &nu}) {
    if (f->v.minCoeff() < -1e-12) throw std::invalid_argument("wm_distance: negative density");
    if (f->v.maxCoeff() > M + 1e-12) throw std::invalid_argument("wm_distance: density above M");
  }
  double ma = integral(mu), mb = integral(nu);
  if (std::abs(ma - mb) > 1e-10 * std::max({ma, mb, 1e-300}))
    throw std::invalid_argument("wm_distance: masses differ");

  BBEngine e(g, reg, opt);
  e.setup_preconditioners();
  if (opt.norm_check) e.norm_check();
  ArrayXd muv = mu.v.max(0.0).min(M);
  ArrayXd nuv = nu.v.max(0.0).min(M);
  e.init_state(muv, &nuv);
  e.run();

  TransportResult res;
  res.action = e.kinetic_action();
  res.distance = std::sqrt(std::max(res.action, 0.0));
  res.iterations = e.total_iterations;
  res.continuity_residual = e.last_residual;
  res.converged = e.converged;
  res.path.reserve(e.T + 1);
  for (int k = 0; k <= e.T; ++k) res.path.push_back(e.P.segment(k * e.C, e.C));
  return res;
}

JkoInnerResult jko_inner_minimize(const ScalarField& u_prev, double tau, const Energy& E,
                                  const RegularizedMobility& reg, const TransportOptions& opt) {
  const DomainGrid& g = *u_prev.g;
  if (!(tau > 0)) throw std::invalid_argument("jko_inner: need tau > 0");
  double M = reg.M();
  if (u_prev.v.minCoeff() < -1e-12) throw std::invalid_argument("jko_inner: negative density");
  if (u_prev.v.maxCoeff() > M + 1e-12) throw std::invalid_argument("jko_inner: density above M");
  if (E.kind == Energy::ks_internal && E.W.v.size() && E.W.g != &g)
    throw std::invalid_argument("jko_inner: potential on a different grid");

  BBEngine e(g, reg, opt);
  e.terminal_free = true;
  e.energy = &E;
  e.two_tau = 2 * tau;
  e.use_dir = E.has_dirichlet();
  e.lin_w = ArrayXd::Zero(g.cells());
  if (E.kind == Energy::ks_internal && E.W.v.size()) e.lin_w = E.W.v;
  if (E.kind == Energy::cahn_hilliard)
    for (int c = 0; c < g.cells(); ++c) e.lin_w[c] = E.g.Ge1(u_prev.v[c]);
  e.setup_preconditioners();
  if (opt.norm_check) e.norm_check();
  ArrayXd u0 = u_prev.v.max(0.0).min(M);
  e.init_state(u0, nullptr);

  int rounds = E.kind == Energy::cahn_hilliard ? std::max(1, opt.ch_rounds) : 1;
  for (int round = 0; round < rounds; ++round) {
    if (round > 0)
      for (int c = 0; c < g.cells(); ++c) e.lin_w[c] = E.g.Ge1(e.P[e.T * e.C + c]);
    e.run();
  }

  JkoInnerResult out;
  out.minimizer = make_field(g);
  out.minimizer.v = e.P.segment(e.T * e.C, e.C);
  out.action = e.kinetic_action();
  out.energy = E.eval(out.minimizer);
  out.iterations = e.total_iterations;
  out.continuity_residual = e.last_residual;
  out.converged = e.converged;
  return out;
}

}  // namespace mobiflow
