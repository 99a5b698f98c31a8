#include "mobiflow/pde.hpp"

#include <Eigen/Sparse>

#include <cmath>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace mobiflow {

namespace {

using Eigen::ArrayXd;

// preconditioned CG, matrix-free; returns iterations, throws on non-convergence
int pcg(const std::function<ArrayXd(const ArrayXd&)>& A,
        const std::function<ArrayXd(const ArrayXd&)>& P, const ArrayXd& b, ArrayXd& x, double tol,
        int max_iters, double* rel_res_out = nullptr, bool throw_on_fail = true) {
  double bn = std::sqrt((b * b).sum());
  if (bn == 0) {
    x.setZero(b.size());
    if (rel_res_out) *rel_res_out = 0;
    return 0;
  }
  ArrayXd r = b - A(x);
  ArrayXd z = P(r);
  ArrayXd p = z;
  double rz = (r * z).sum();
  int it = 0;
  double rn = std::sqrt((r * r).sum());
  while (rn > tol * bn && it < max_iters) {
    ArrayXd Ap = A(p);
    double alpha = rz / (p * Ap).sum();
    x += alpha * p;
    r -= alpha * Ap;
    rn = std::sqrt((r * r).sum());
    if (rn <= tol * bn) {
      ++it;
      break;
    }
    z = P(r);
    double rz_new = (r * z).sum();
    p = z + (rz_new / rz) * p;
    rz = rz_new;
    ++it;
  }
  if (rel_res_out) *rel_res_out = rn / bn;
  if (rn > tol * bn && throw_on_fail) {
    std::ostringstream os;
    os << "cg: no convergence after " << it << " iterations (rel residual " << rn / bn << ")";
    throw std::runtime_error(os.str());
  }
  return it;
}

ArrayXd apply_lap(const DomainGrid& g, const ArrayXd& x) {
  ScalarField f{&g, x};
  return laplacian_neumann(f).v;
}

// per-cell diagonal of -Lap (number of interior faces / h^2)
ArrayXd lap_diag(const DomainGrid& g) {
  ArrayXd d = ArrayXd::Zero(g.cells());
  for (int f = 0; f < g.nfx(); ++f) {
    d[g.fx_l[f]] += 1;
    d[g.fx_r[f]] += 1;
  }
  for (int f = 0; f < g.nfy(); ++f) {
    d[g.fy_l[f]] += 1;
    d[g.fy_r[f]] += 1;
  }
  return d / (g.h * g.h);
}

double sup_or_local(const RegularizedMobility& reg, const ArrayXd& rho) {
  // global Lipschitz constant when the family admits one, otherwise the
  // realized range with a safety margin
  try {
    return sup_constants(reg).L;
  } catch (const std::exception&) {
    double best = 0;
    for (int i = 0; i < rho.size(); ++i) best = std::max(best, std::abs(reg.m1(rho[i])));
    return 2 * std::max(best, 1e-30);
  }
}

struct DriftContext {
  ArrayXd gx, gy;    // face gradients of phi
  double gmax = 0;   // max |face gradient|
  bool active = false;
};

DriftContext make_drift(const DomainGrid& g, const ScalarField& phi) {
  DriftContext d;
  if (!phi.v.size()) return d;
  if (phi.g != &g) throw std::invalid_argument("semigroup: phi lives on a different grid");
  VectorField gp = gradient(phi);
  d.gx = gp.x;
  d.gy = gp.y;
  double mx = d.gx.size() ? d.gx.abs().maxCoeff() : 0;
  double my = d.gy.size() ? d.gy.abs().maxCoeff() : 0;
  d.gmax = std::max(mx, my);
  d.active = d.gmax > 0;
  return d;
}

double pick_dt(const ScalarField& rho, const SemigroupParams& p, const DriftContext& drift) {
  double dt = p.dt_cap;
  if (drift.active) {
    double L = p.sup_L > 0 ? p.sup_L : sup_or_local(p.reg, rho.v);
    double cfl = rho.g->h / (2 * L * drift.gmax);
    dt = std::min(dt, cfl);
  }
  return dt;
}

}  // namespace

int semigroup_substeps(const ScalarField& rho, const SemigroupParams& p, double t) {
  if (!(t > 0)) return 0;
  double dt = pick_dt(rho, p, make_drift(*rho.g, p.phi));
  if (!std::isfinite(dt)) return 1;
  return std::max(1, (int)std::ceil(t / dt - 1e-9));
}

ScalarField semigroup_step(const ScalarField& rho, const SemigroupParams& p, double t,
                           int substeps, SemigroupDiag* diag) {
  const DomainGrid& g = *rho.g;
  if (t < 0) throw std::invalid_argument("semigroup: t < 0");
  if (p.delta < 0) throw std::invalid_argument("semigroup: delta < 0");
  if (rho.v.minCoeff() < -1e-12) throw std::invalid_argument("semigroup: negative density");
  double M = p.reg.M();
  bool bounded = std::isfinite(M);
  if (bounded && rho.v.maxCoeff() > M + 1e-12) throw std::invalid_argument("semigroup: density above M");

  ScalarField out = rho;
  out.v = out.v.max(0.0);
  if (bounded) out.v = out.v.min(M);
  double mass0 = integral(out);
  if (t == 0) {
    if (diag) *diag = SemigroupDiag{};
    return out;
  }

  DriftContext drift = make_drift(g, p.phi);
  int n = substeps > 0 ? substeps : semigroup_substeps(out, p, t);
  double dt = t / n;
  double h = g.h;

  ArrayXd diag_lap = lap_diag(g);
  auto Aop = [&](const ArrayXd& x) { return (x - dt * p.delta * apply_lap(g, x)).eval(); };
  ArrayXd prec_d = 1.0 + dt * p.delta * diag_lap;
  auto Pop = [&](const ArrayXd& r) { return (r / prec_d).eval(); };

  ArrayXd Jx, Jy, outflow, inflow, theta;
  for (int s = 0; s < n; ++s) {
    if (drift.active) {
      // upwind mass flux J = -m(rho_donor) grad(phi); donor is the cell losing mass
      Jx.resize(g.nfx());
      Jy.resize(g.nfy());
      for (int f = 0; f < g.nfx(); ++f) {
        int donor = drift.gx[f] > 0 ? g.fx_r[f] : g.fx_l[f];
        Jx[f] = -p.reg.m(out.v[donor]) * drift.gx[f];
      }
      for (int f = 0; f < g.nfy(); ++f) {
        int donor = drift.gy[f] > 0 ? g.fy_r[f] : g.fy_l[f];
        Jy[f] = -p.reg.m(out.v[donor]) * drift.gy[f];
      }
      // limit so no cell drains below 0 within the substep
      outflow = ArrayXd::Zero(g.cells());
      auto accumulate_out = [&](const ArrayXd& J, const std::vector<int>& l, const std::vector<int>& r) {
        for (int f = 0; f < (int)J.size(); ++f) {
          if (J[f] > 0)
            outflow[l[f]] += dt / h * J[f];
          else
            outflow[r[f]] -= dt / h * J[f];
        }
      };
      accumulate_out(Jx, g.fx_l, g.fx_r);
      accumulate_out(Jy, g.fy_l, g.fy_r);
      theta = ArrayXd::Ones(g.cells());
      for (int c = 0; c < g.cells(); ++c)
        if (outflow[c] > out.v[c] && outflow[c] > 0) theta[c] = std::max(0.0, out.v[c] / outflow[c]);
      auto scale_donor = [&](ArrayXd& J, const std::vector<int>& l, const std::vector<int>& r) {
        for (int f = 0; f < (int)J.size(); ++f) J[f] *= theta[J[f] > 0 ? l[f] : r[f]];
      };
      scale_donor(Jx, g.fx_l, g.fx_r);
      scale_donor(Jy, g.fy_l, g.fy_r);
      if (bounded) {
        // second pass: no cell may exceed M from inflow
        inflow = ArrayXd::Zero(g.cells());
        auto accumulate_in = [&](const ArrayXd& J, const std::vector<int>& l, const std::vector<int>& r) {
          for (int f = 0; f < (int)J.size(); ++f) {
            if (J[f] > 0)
              inflow[r[f]] += dt / h * J[f];
            else
              inflow[l[f]] -= dt / h * J[f];
          }
        };
        accumulate_in(Jx, g.fx_l, g.fx_r);
        accumulate_in(Jy, g.fy_l, g.fy_r);
        theta.setOnes();
        for (int c = 0; c < g.cells(); ++c) {
          double room = M - out.v[c];
          if (inflow[c] > room && inflow[c] > 0) theta[c] = std::max(0.0, room / inflow[c]);
        }
        auto scale_receiver = [&](ArrayXd& J, const std::vector<int>& l, const std::vector<int>& r) {
          for (int f = 0; f < (int)J.size(); ++f) J[f] *= theta[J[f] > 0 ? r[f] : l[f]];
        };
        scale_receiver(Jx, g.fx_l, g.fx_r);
        scale_receiver(Jy, g.fy_l, g.fy_r);
      }
      VectorField J{&g, Jx, Jy};
      out.v -= dt * divergence(J).v;
    }
    if (p.delta > 0) {
      ArrayXd x = out.v;
      pcg(Aop, Pop, out.v, x, 1e-13, 10000);
      out.v = x;
    }
  }

  double clipped = 0, min_before = out.v.minCoeff();
  if (min_before < 0) {
    clipped = -(out.v.min(0.0)).sum() * h * h;
    if (clipped > 1e-10 * std::max(mass0, 1e-300))
      throw std::runtime_error("semigroup: positivity violated beyond rounding tolerance");
    out.v = out.v.max(0.0);
  }
  if (bounded) {
    double over = out.v.maxCoeff() - M;
    if (over > 1e-8 * std::max(M, 1.0))
      throw std::runtime_error("semigroup: upper bound M violated beyond rounding tolerance");
    if (over > 0) out.v = out.v.min(M);
  }
  double mass1 = integral(out);
  double rel_err = mass0 > 0 ? (mass1 - mass0) / mass0 : 0;
  if (std::abs(rel_err) > 1e-9) throw std::runtime_error("semigroup: mass drift beyond tolerance");
  if (mass1 > 0) out.v *= mass0 / mass1;
  if (diag) {
    diag->substeps = n;
    diag->clipped_mass = clipped;
    diag->mass_rel_error = rel_err;
  }
  return out;
}

EllipticResult weighted_elliptic_solve(const ScalarField& rho, const ScalarField& g,
                                       const RegularizedMobility& reg, double tol, int max_iters) {
  const DomainGrid& grid = *rho.g;
  if (g.g != &grid) throw std::invalid_argument("elliptic: fields on different grids");
  ArrayXd mcell = reg.m(rho.v);
  if (mcell.minCoeff() <= 0)
    throw std::invalid_argument("elliptic: mobility weights must be positive (need eps > 0 or rho > 0)");

  double gl2 = l2_norm(g);
  double net = integral(g);
  if (std::abs(net) > 1e-10 * std::max(gl2, 1e-30) && gl2 > 0)
    throw std::invalid_argument("elliptic: incompatible rhs (nonzero total)");

  ArrayXd wx(grid.nfx()), wy(grid.nfy());
  for (int f = 0; f < grid.nfx(); ++f) wx[f] = 0.5 * (mcell[grid.fx_l[f]] + mcell[grid.fx_r[f]]);
  for (int f = 0; f < grid.nfy(); ++f) wy[f] = 0.5 * (mcell[grid.fy_l[f]] + mcell[grid.fy_r[f]]);

  auto Aop = [&](const ArrayXd& x) {
    ScalarField xf{&grid, x};
    VectorField gx = gradient(xf);
    gx.x *= wx;
    gx.y *= wy;
    return (-divergence(gx).v).eval();
  };
  ArrayXd d = ArrayXd::Zero(grid.cells());
  double h2 = grid.h * grid.h;
  for (int f = 0; f < grid.nfx(); ++f) {
    d[grid.fx_l[f]] += wx[f] / h2;
    d[grid.fx_r[f]] += wx[f] / h2;
  }
  for (int f = 0; f < grid.nfy(); ++f) {
    d[grid.fy_l[f]] += wy[f] / h2;
    d[grid.fy_r[f]] += wy[f] / h2;
  }
  d = d.max(1e-300);
  int ncell = grid.cells();
  auto Pop = [&](const ArrayXd& r) {
    ArrayXd z = r / d;
    z -= z.mean();  // keep the Krylov space orthogonal to constants
    return z.eval();
  };

  ArrayXd b = g.v - g.v.mean();
  EllipticResult res;
  res.phi = make_field(grid);
  if (gl2 == 0) return res;
  ArrayXd x = ArrayXd::Zero(ncell);
  res.iterations = pcg(Aop, Pop, b, x, tol, max_iters, &res.residual);
  x -= x.mean();
  res.phi.v = x;
  return res;
}

ScalarField screened_heat_step(const ScalarField& v, const ScalarField& u, double tau) {
  const DomainGrid& g = *v.g;
  if (u.g != &g) throw std::invalid_argument("screened_heat: fields on different grids");
  if (!(tau > 0)) throw std::invalid_argument("screened_heat: need tau > 0");
  ArrayXd diag_lap = lap_diag(g);
  auto Aop = [&](const ArrayXd& x) { return ((1 + tau) * x - tau * apply_lap(g, x)).eval(); };
  ArrayXd prec_d = (1 + tau) + tau * diag_lap;
  auto Pop = [&](const ArrayXd& r) { return (r / prec_d).eval(); };
  ArrayXd b = v.v + tau * u.v;
  ScalarField out = make_field(g);
  out.v = b / (1 + tau);
  pcg(Aop, Pop, b, out.v, 1e-13, 10000);
  return out;
}

ScalarField reference_pme_solve(const ScalarField& u0, double p, double T, double dt) {
  if (!(p >= 1)) throw std::invalid_argument("pme: need p >= 1");
  if (!(dt > 0) || !(T > 0)) throw std::invalid_argument("pme: need T, dt > 0");
  const DomainGrid& g = *u0.g;
  int n = std::max(1, (int)std::llround(T / dt));
  double step = T / n;
  ScalarField u = u0;
  double mass0 = integral(u);
  for (int s = 0; s < n; ++s) {
    ScalarField w = make_field(g);
    w.v = u.v.max(0.0).pow(p);
    u.v += step * laplacian_neumann(w).v;
    double mn = u.v.minCoeff();
    if (mn < -1e-12) throw std::runtime_error("pme reference: negative density (dt too large)");
    if (mn < 0) u.v = u.v.max(0.0);
    if (!u.v.allFinite()) throw std::runtime_error("pme reference: blow-up (dt too large)");
  }
  double mass1 = integral(u);
  if (std::abs(mass1 - mass0) > 1e-9 * std::max(mass0, 1e-300))
    throw std::runtime_error("pme reference: mass drift");
  if (mass1 > 0) u.v *= mass0 / mass1;
  return u;
}

KsState reference_ks_solve(const ScalarField& u0, const ScalarField& v0, double p, double chi,
                           double T, double dt) {
  const DomainGrid& g = *u0.g;
  if (v0.g != &g) throw std::invalid_argument("ks: fields on different grids");
  if (!(p >= 1)) throw std::invalid_argument("ks: need p >= 1");
  if (!(dt > 0) || !(T > 0)) throw std::invalid_argument("ks: need T, dt > 0");
  int n = std::max(1, (int)std::llround(T / dt));
  double step = T / n;
  KsState st{u0, v0};
  double mass0 = integral(st.u);
  for (int s = 0; s < n; ++s) {
    ScalarField w = make_field(g);
    w.v = st.u.v.max(0.0).pow(p);
    ArrayXd du = laplacian_neumann(w).v;
    if (chi != 0) {
      VectorField gv = gradient(st.v);
      // advective flux chi u grad(v); donor is upwind of the velocity chi grad(v)
      VectorField J = make_vector_field(g);
      for (int f = 0; f < g.nfx(); ++f) {
        int donor = gv.x[f] > 0 ? g.fx_l[f] : g.fx_r[f];
        J.x[f] = chi * gv.x[f] * std::max(st.u.v[donor], 0.0);
      }
      for (int f = 0; f < g.nfy(); ++f) {
        int donor = gv.y[f] > 0 ? g.fy_l[f] : g.fy_r[f];
        J.y[f] = chi * gv.y[f] * std::max(st.u.v[donor], 0.0);
      }
      du -= divergence(J).v;
    }
    st.u.v += step * du;
    double mn = st.u.v.minCoeff();
    if (mn < -1e-12) throw std::runtime_error("ks reference: negative density (dt too large)");
    if (mn < 0) st.u.v = st.u.v.max(0.0);
    if (!st.u.v.allFinite()) throw std::runtime_error("ks reference: blow-up (dt too large)");
    st.v = screened_heat_step(st.v, st.u, step);
  }
  double mass1 = integral(st.u);
  if (std::abs(mass1 - mass0) > 1e-9 * std::max(mass0, 1e-300))
    throw std::runtime_error("ks reference: mass drift");
  if (mass1 > 0) st.u.v *= mass0 / mass1;
  return st;
}

ScalarField reference_ch_solve(const ScalarField& u0, const RegularizedMobility& mob,
                               const GSpec& g, double T, double dt) {
  const DomainGrid& grid = *u0.g;
  double M = mob.M();
  if (!std::isfinite(M)) throw std::invalid_argument("ch reference: mobility must be bounded");
  if (!(dt > 0) || !(T > 0)) throw std::invalid_argument("ch reference: need T, dt > 0");
  int n = std::max(1, (int)std::llround(T / dt));
  double step = T / n;
  int nc = grid.cells();
  double h2 = grid.h * grid.h;
  double S = g.max_abs_G2(M);

  using Sp = Eigen::SparseMatrix<double>;
  auto face_operator = [&](const ArrayXd* wx, const ArrayXd* wy) {
    // assembles -div(w grad .) as a sparse matrix (w = 1 when null)
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(4 * (grid.nfx() + grid.nfy()));
    auto add = [&](int l, int r, double w) {
      trip.emplace_back(l, l, w / h2);
      trip.emplace_back(r, r, w / h2);
      trip.emplace_back(l, r, -w / h2);
      trip.emplace_back(r, l, -w / h2);
    };
    for (int f = 0; f < grid.nfx(); ++f) add(grid.fx_l[f], grid.fx_r[f], wx ? (*wx)[f] : 1.0);
    for (int f = 0; f < grid.nfy(); ++f) add(grid.fy_l[f], grid.fy_r[f], wy ? (*wy)[f] : 1.0);
    Sp A(nc, nc);
    A.setFromTriplets(trip.begin(), trip.end());
    return A;
  };
  Sp N1 = face_operator(nullptr, nullptr);
  Sp I(nc, nc);
  I.setIdentity();

  ScalarField u = u0;
  u.v = u.v.max(0.0).min(M);
  double mass0 = integral(u);
  ArrayXd wx(grid.nfx()), wy(grid.nfy());
  Eigen::SparseLU<Sp> lu;
  for (int s = 0; s < n; ++s) {
    for (int f = 0; f < grid.nfx(); ++f)
      wx[f] = 0.5 * (mob.m(u.v[grid.fx_l[f]]) + mob.m(u.v[grid.fx_r[f]]));
    for (int f = 0; f < grid.nfy(); ++f)
      wy[f] = 0.5 * (mob.m(u.v[grid.fy_l[f]]) + mob.m(u.v[grid.fy_r[f]]));
    Sp Nm = face_operator(&wx, &wy);
    Sp B = I + step * (Nm * N1) + (step * S) * Nm;
    B.makeCompressed();
    lu.compute(B);
    if (lu.info() != Eigen::Success) throw std::runtime_error("ch reference: factorization failed");
    ArrayXd g1(nc);
    for (int c = 0; c < nc; ++c) g1[c] = g.G1(u.v[c]);
    Eigen::VectorXd rhs = u.v.matrix() + step * (Nm * (S * u.v - g1).matrix());
    Eigen::VectorXd sol = lu.solve(rhs);
    if (lu.info() != Eigen::Success) throw std::runtime_error("ch reference: solve failed");
    u.v = sol.array();
    if (!u.v.allFinite()) throw std::runtime_error("ch reference: blow-up (dt too large)");
    double lo = u.v.minCoeff(), hi = u.v.maxCoeff();
    if (lo < -1e-6 * M || hi > M * (1 + 1e-6))
      throw std::runtime_error("ch reference: bounds violated (dt too large)");
    u.v = u.v.max(0.0).min(M);
    double mass = integral(u);
    double err = mass - mass0;
    if (std::abs(err) > 1e-8 * std::max(mass0, 1e-300))
      throw std::runtime_error("ch reference: mass drift (dt too large)");
    u.v += -err / (nc * h2);  // uniform correction keeps the mean exact
  }
  return u;
}

}  // namespace mobiflow
