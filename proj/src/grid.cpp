#include "mobiflow/grid.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <queue>
#include <sstream>
#include <stdexcept>

namespace mobiflow {

double ShapeSpec::get(const std::string& key, double dflt) const {
  auto it = params.find(key);
  return it == params.end() ? dflt : it->second;
}

ShapeSpec ShapeSpec::parse(const std::string& text) {
  ShapeSpec s;
  auto colon = text.find(':');
  s.name = text.substr(0, colon);
  if (s.name.empty()) throw std::invalid_argument("shape: empty name in '" + text + "'");
  if (colon != std::string::npos) {
    std::stringstream ss(text.substr(colon + 1));
    std::string item;
    while (std::getline(ss, item, ',')) {
      auto eq = item.find('=');
      if (eq == std::string::npos)
        throw std::invalid_argument("shape: expected key=value, got '" + item + "'");
      std::string k = item.substr(0, eq), v = item.substr(eq + 1);
      size_t pos = 0;
      double val = std::stod(v, &pos);
      if (pos != v.size())
        throw std::invalid_argument("shape: bad number '" + v + "' for key " + k);
      if (k == "res")
        s.res = (int)std::lround(val);
      else
        s.params[k] = val;
    }
  }
  return s;
}

std::string ShapeSpec::to_string() const {
  std::ostringstream os;
  os << name << ":res=" << res;
  for (auto& [k, v] : params) os << "," << k << "=" << v;
  return os.str();
}

namespace {

// level sets, negative inside; analytic up to min/max creases
using LevelSet = std::function<double(double, double)>;

LevelSet shape_level_set(const ShapeSpec& s, bool* convex) {
  const std::string& n = s.name;
  *convex = (n == "square" || n == "disc");
  if (n == "square") {
    return [](double x, double y) {
      return std::max(std::abs(x - 0.5), std::abs(y - 0.5)) - 0.5;
    };
  }
  if (n == "disc") {
    double r = s.get("radius", 0.4);
    if (r <= 0 || r > 0.5) throw std::invalid_argument("disc: radius must be in (0, 0.5]");
    return [r](double x, double y) { return std::hypot(x - 0.5, y - 0.5) - r; };
  }
  if (n == "annulus_sector") {
    double r0 = s.get("r0", 0.15), r1 = s.get("r1", 0.42);
    double open = s.get("open_deg", 90.0) * M_PI / 180.0;  // removed wedge, bisector +x
    if (!(0 < r0 && r0 < r1 && r1 <= 0.5))
      throw std::invalid_argument("annulus_sector: need 0 < r0 < r1 <= 0.5");
    if (open <= 0 || open >= 2 * M_PI)
      throw std::invalid_argument("annulus_sector: open_deg must be in (0, 360)");
    return [r0, r1, open](double x, double y) {
      double dx = x - 0.5, dy = y - 0.5;
      double rho = std::hypot(dx, dy);
      double ang = std::atan2(dy, dx);
      double wedge = (open / 2 - std::abs(ang)) * std::max(rho, 1e-12);
      return std::max({rho - r1, r0 - rho, wedge});
    };
  }
  if (n == "pacman") {
    double r = s.get("radius", 0.4);
    double mouth = s.get("mouth_deg", 80.0) * M_PI / 180.0;  // removed wedge, bisector +x
    if (r <= 0 || r > 0.5) throw std::invalid_argument("pacman: radius must be in (0, 0.5]");
    if (mouth <= 0 || mouth >= M_PI)
      throw std::invalid_argument("pacman: mouth_deg must be in (0, 180)");
    return [r, mouth](double x, double y) {
      double dx = x - 0.5, dy = y - 0.5;
      double rho = std::hypot(dx, dy);
      double ang = std::atan2(dy, dx);
      double wedge = (mouth / 2 - std::abs(ang)) * std::max(rho, 1e-12);
      return std::max(rho - r, wedge);
    };
  }
  if (n == "dumbbell") {
    double r = s.get("radius", 0.2);
    double neck = s.get("neck", 0.08);  // neck half-height
    double cx1 = 0.25, cx2 = 0.75;
    if (r <= 0 || r > 0.25) throw std::invalid_argument("dumbbell: radius must be in (0, 0.25]");
    if (neck <= 0 || neck >= r) throw std::invalid_argument("dumbbell: need 0 < neck < radius");
    return [r, neck, cx1, cx2](double x, double y) {
      double d1 = std::hypot(x - cx1, y - 0.5) - r;
      double d2 = std::hypot(x - cx2, y - 0.5) - r;
      double dr = std::max(std::abs(x - 0.5) - (cx2 - cx1) / 2, std::abs(y - 0.5) - neck);
      return std::min({d1, d2, dr});
    };
  }
  throw std::invalid_argument("unknown shape '" + n + "'");
}

void build_topology(DomainGrid& g) {
  const int nx = g.nx, ny = g.ny;
  g.cell_of.assign(nx * ny, -1);
  g.ci.clear();
  g.cj.clear();
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i)
      if (g.mask[i + nx * j]) {
        g.cell_of[i + nx * j] = (int)g.ci.size();
        g.ci.push_back(i);
        g.cj.push_back(j);
      }
  const int nc = g.cells();
  if (nc == 0) throw std::runtime_error("domain: empty interior");

  // connectivity (4-neighborhood)
  std::vector<char> seen(nc, 0);
  std::queue<int> q;
  q.push(0);
  seen[0] = 1;
  int reached = 1;
  while (!q.empty()) {
    int c = q.front();
    q.pop();
    int i = g.ci[c], j = g.cj[c];
    for (auto [di, dj] : {std::pair{1, 0}, {-1, 0}, {0, 1}, {0, -1}}) {
      int nb = g.at(i + di, j + dj);
      if (nb >= 0 && !seen[nb]) {
        seen[nb] = 1;
        ++reached;
        q.push(nb);
      }
    }
  }
  if (reached != nc)
    throw std::runtime_error("domain: interior is not 4-connected (" +
                             std::to_string(nc - reached) + " unreachable cells)");

  g.fx_l.clear(); g.fx_r.clear();
  g.fy_l.clear(); g.fy_r.clear();
  g.face_w.assign(nc, -1);
  g.face_e.assign(nc, -1);
  g.face_s.assign(nc, -1);
  g.face_n.assign(nc, -1);
  for (int c = 0; c < nc; ++c) {
    int i = g.ci[c], j = g.cj[c];
    int e = g.at(i + 1, j);
    if (e >= 0) {
      g.face_e[c] = (int)g.fx_l.size();
      g.face_w[e] = (int)g.fx_l.size();
      g.fx_l.push_back(c);
      g.fx_r.push_back(e);
    }
    int n = g.at(i, j + 1);
    if (n >= 0) {
      g.face_n[c] = (int)g.fy_l.size();
      g.face_s[n] = (int)g.fy_l.size();
      g.fy_l.push_back(c);
      g.fy_r.push_back(n);
    }
  }
}

void build_boundary(DomainGrid& g, const LevelSet* psi) {
  g.boundary.clear();
  const double d = 1e-6;  // step for the level-set normal
  for (int c = 0; c < g.cells(); ++c) {
    int i = g.ci[c], j = g.cj[c];
    auto add = [&](int axis, int side) {
      BoundaryFace f;
      f.cell = c;
      f.axis = axis;
      f.side = side;
      f.cx = g.x(c) + (axis == 0 ? side * g.h / 2 : 0.0);
      f.cy = g.y(c) + (axis == 1 ? side * g.h / 2 : 0.0);
      f.bx = f.cx;
      f.by = f.cy;
      if (psi) {
        double gx = ((*psi)(f.cx + d, f.cy) - (*psi)(f.cx - d, f.cy)) / (2 * d);
        double gy = ((*psi)(f.cx, f.cy + d) - (*psi)(f.cx, f.cy - d)) / (2 * d);
        double n = std::hypot(gx, gy);
        if (n < 1e-14) {  // crease point; fall back to the axis direction
          f.nx = axis == 0 ? side : 0;
          f.ny = axis == 1 ? side : 0;
        } else {
          f.nx = gx / n;
          f.ny = gy / n;
        }
        // project the face center onto the zero level set (Newton along the
        // local gradient), capped so a crease cannot throw the point far away
        for (int it = 0; it < 3; ++it) {
          double px = ((*psi)(f.bx + d, f.by) - (*psi)(f.bx - d, f.by)) / (2 * d);
          double py = ((*psi)(f.bx, f.by + d) - (*psi)(f.bx, f.by - d)) / (2 * d);
          double p2 = px * px + py * py;
          if (p2 < 1e-14) break;
          double v = (*psi)(f.bx, f.by);
          f.bx -= v * px / p2;
          f.by -= v * py / p2;
        }
        if (std::hypot(f.bx - f.cx, f.by - f.cy) > 1.5 * g.h) {
          f.bx = f.cx;
          f.by = f.cy;
        }
      } else {
        f.nx = axis == 0 ? side : 0;
        f.ny = axis == 1 ? side : 0;
      }
      f.weight = g.h * std::abs(axis == 0 ? f.nx : f.ny);
      g.boundary.push_back(f);
    };
    if (g.at(i - 1, j) < 0) add(0, -1);
    if (g.at(i + 1, j) < 0) add(0, +1);
    if (g.at(i, j - 1) < 0) add(1, -1);
    if (g.at(i, j + 1) < 0) add(1, +1);
  }
}

}  // namespace

DomainGrid build_domain(const ShapeSpec& spec) {
  if (spec.res < 8) throw std::invalid_argument("domain: resolution must be >= 8");
  DomainGrid g;
  g.nx = g.ny = spec.res;
  g.h = 1.0 / spec.res;
  g.shape = spec.name;
  g.spec = spec;
  bool convex = false;
  LevelSet psi = shape_level_set(spec, &convex);
  g.convex = convex;
  g.mask.assign(g.nx * g.ny, 0);
  for (int j = 0; j < g.ny; ++j)
    for (int i = 0; i < g.nx; ++i) {
      double x = (i + 0.5) * g.h, y = (j + 0.5) * g.h;
      if (psi(x, y) < 0) g.mask[i + g.nx * j] = 1;
    }
  build_topology(g);
  build_boundary(g, &psi);
  return g;
}

DomainGrid domain_from_mask(int nx, int ny, double h,
                            const std::vector<std::uint8_t>& mask) {
  if (nx <= 0 || ny <= 0 || h <= 0) throw std::invalid_argument("domain: bad dimensions");
  if ((int)mask.size() != nx * ny) throw std::invalid_argument("domain: mask size mismatch");
  DomainGrid g;
  g.nx = nx;
  g.ny = ny;
  g.h = h;
  g.shape = "mask";
  g.spec.name = "mask";
  g.spec.res = nx;
  g.convex = false;
  g.mask = mask;
  build_topology(g);
  build_boundary(g, nullptr);
  return g;
}

ScalarField make_field(const DomainGrid& g, double value) {
  return {&g, Eigen::ArrayXd::Constant(g.cells(), value)};
}

VectorField make_vector_field(const DomainGrid& g) {
  return {&g, Eigen::ArrayXd::Zero(g.nfx()), Eigen::ArrayXd::Zero(g.nfy())};
}

VectorField gradient(const ScalarField& f) {
  const DomainGrid& g = *f.g;
  VectorField out = make_vector_field(g);
  for (int k = 0; k < g.nfx(); ++k) out.x[k] = (f.v[g.fx_r[k]] - f.v[g.fx_l[k]]) / g.h;
  for (int k = 0; k < g.nfy(); ++k) out.y[k] = (f.v[g.fy_r[k]] - f.v[g.fy_l[k]]) / g.h;
  return out;
}

ScalarField divergence(const VectorField& v) {
  const DomainGrid& g = *v.g;
  ScalarField out = make_field(g);
  for (int k = 0; k < g.nfx(); ++k) {
    out.v[g.fx_l[k]] += v.x[k] / g.h;
    out.v[g.fx_r[k]] -= v.x[k] / g.h;
  }
  for (int k = 0; k < g.nfy(); ++k) {
    out.v[g.fy_l[k]] += v.y[k] / g.h;
    out.v[g.fy_r[k]] -= v.y[k] / g.h;
  }
  return out;
}

ScalarField laplacian_neumann(const ScalarField& f) { return divergence(gradient(f)); }

namespace {

// one-dimensional cell-centered first derivative along +dir with fallbacks
double d1_cell(const DomainGrid& g, const Eigen::ArrayXd& v, int c, int di, int dj) {
  int i = g.ci[c], j = g.cj[c];
  int p1 = g.at(i + di, j + dj), m1 = g.at(i - di, j - dj);
  double h = g.h;
  if (p1 >= 0 && m1 >= 0) return (v[p1] - v[m1]) / (2 * h);
  if (p1 >= 0) {
    int p2 = g.at(i + 2 * di, j + 2 * dj);
    if (p2 >= 0) return (-3 * v[c] + 4 * v[p1] - v[p2]) / (2 * h);
    return (v[p1] - v[c]) / h;
  }
  if (m1 >= 0) {
    int m2 = g.at(i - 2 * di, j - 2 * dj);
    if (m2 >= 0) return (3 * v[c] - 4 * v[m1] + v[m2]) / (2 * h);
    return (v[c] - v[m1]) / h;
  }
  return 0.0;
}

double d2_cell(const DomainGrid& g, const Eigen::ArrayXd& v, int c, int di, int dj) {
  int i = g.ci[c], j = g.cj[c];
  int p1 = g.at(i + di, j + dj), m1 = g.at(i - di, j - dj);
  double h2 = g.h * g.h;
  if (p1 >= 0 && m1 >= 0) return (v[p1] - 2 * v[c] + v[m1]) / h2;
  if (p1 >= 0) {
    int p2 = g.at(i + 2 * di, j + 2 * dj), p3 = g.at(i + 3 * di, j + 3 * dj);
    if (p2 >= 0 && p3 >= 0) return (2 * v[c] - 5 * v[p1] + 4 * v[p2] - v[p3]) / h2;
    if (p2 >= 0) return (v[c] - 2 * v[p1] + v[p2]) / h2;
    return 0.0;
  }
  if (m1 >= 0) {
    int m2 = g.at(i - 2 * di, j - 2 * dj), m3 = g.at(i - 3 * di, j - 3 * dj);
    if (m2 >= 0 && m3 >= 0) return (2 * v[c] - 5 * v[m1] + 4 * v[m2] - v[m3]) / h2;
    if (m2 >= 0) return (v[c] - 2 * v[m1] + v[m2]) / h2;
    return 0.0;
  }
  return 0.0;
}

}  // namespace

ScalarField dx_cell(const ScalarField& f) {
  const DomainGrid& g = *f.g;
  ScalarField out = make_field(g);
  for (int c = 0; c < g.cells(); ++c) out.v[c] = d1_cell(g, f.v, c, 1, 0);
  return out;
}

ScalarField dy_cell(const ScalarField& f) {
  const DomainGrid& g = *f.g;
  ScalarField out = make_field(g);
  for (int c = 0; c < g.cells(); ++c) out.v[c] = d1_cell(g, f.v, c, 0, 1);
  return out;
}

HessianField hessian(const ScalarField& f) {
  const DomainGrid& g = *f.g;
  HessianField out;
  out.g = &g;
  out.xx.resize(g.cells());
  out.yy.resize(g.cells());
  for (int c = 0; c < g.cells(); ++c) {
    out.xx[c] = d2_cell(g, f.v, c, 1, 0);
    out.yy[c] = d2_cell(g, f.v, c, 0, 1);
  }
  ScalarField fx = dx_cell(f), fy = dy_cell(f);
  out.xy = dy_cell(fx).v;
  out.yx = dx_cell(fy).v;
  return out;
}

double integral(const ScalarField& f) { return f.v.sum() * f.g->h * f.g->h; }

double inner(const ScalarField& a, const ScalarField& b) {
  return (a.v * b.v).sum() * a.g->h * a.g->h;
}

double inner(const VectorField& a, const VectorField& b) {
  return ((a.x * b.x).sum() + (a.y * b.y).sum()) * a.g->h * a.g->h;
}

double l2_norm(const ScalarField& f) { return std::sqrt(inner(f, f)); }
double l2_norm(const VectorField& v) { return std::sqrt(inner(v, v)); }

double perimeter(const DomainGrid& g) {
  double p = 0;
  for (auto& f : g.boundary) p += f.weight;
  return p;
}

std::vector<double> boundary_values(const ScalarField& f) {
  const DomainGrid& g = *f.g;
  ScalarField fx = dx_cell(f), fy = dy_cell(f);
  std::vector<double> out;
  out.reserve(g.boundary.size());
  for (auto& b : g.boundary) {
    double ox = b.cx - g.x(b.cell), oy = b.cy - g.y(b.cell);
    out.push_back(f.v[b.cell] + fx.v[b.cell] * ox + fy.v[b.cell] * oy);
  }
  return out;
}

std::vector<double> boundary_normal_derivative(const ScalarField& f) {
  const DomainGrid& g = *f.g;
  ScalarField fx = dx_cell(f), fy = dy_cell(f);
  HessianField H = hessian(f);
  std::vector<double> out;
  out.reserve(g.boundary.size());
  for (auto& b : g.boundary) {
    int c = b.cell;
    double ox = b.cx - g.x(c), oy = b.cy - g.y(c);
    double dfx = fx.v[c] + H.xx[c] * ox + H.xy[c] * oy;
    double dfy = fy.v[c] + H.yx[c] * ox + H.yy[c] * oy;
    out.push_back(dfx * b.nx + dfy * b.ny);
  }
  return out;
}

double boundary_integral(const ScalarField& f) {
  const DomainGrid& g = *f.g;
  if (g.boundary.empty()) throw std::runtime_error("boundary_integral: grid has no boundary faces");
  std::vector<double> bv = boundary_values(f);
  double s = 0;
  for (size_t k = 0; k < bv.size(); ++k) s += bv[k] * g.boundary[k].weight;
  return s;
}

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)((v >> 8) & 0xff),
                        (unsigned char)((v >> 16) & 0xff), (unsigned char)((v >> 24) & 0xff)};
  os.write((const char*)b, 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read((char*)b, 4);
  return (std::uint32_t)b[0] | ((std::uint32_t)b[1] << 8) | ((std::uint32_t)b[2] << 16) |
         ((std::uint32_t)b[3] << 24);
}

void put_f64(std::ostream& os, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = (unsigned char)((u >> (8 * i)) & 0xff);
  os.write((const char*)b, 8);
}

double get_f64(std::istream& is) {
  unsigned char b[8];
  is.read((char*)b, 8);
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= (std::uint64_t)b[i] << (8 * i);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

constexpr char kMagic[7] = {'M', 'F', 'G', 'R', 'I', 'D', '1'};

void write_header(std::ostream& os, const DomainGrid& g) {
  os.write(kMagic, 7);
  put_u32(os, (std::uint32_t)g.nx);
  put_u32(os, (std::uint32_t)g.ny);
  put_f64(os, g.h);
  os.write((const char*)g.mask.data(), (std::streamsize)g.mask.size());
}

DomainGrid read_header(std::istream& is, const std::string& path) {
  char magic[7];
  is.read(magic, 7);
  if (!is || std::memcmp(magic, kMagic, 7) != 0)
    throw std::runtime_error(path + ": not a MFGRID1 file");
  std::uint32_t nx = get_u32(is), ny = get_u32(is);
  double h = get_f64(is);
  if (!is || nx == 0 || ny == 0 || nx > 1u << 20 || ny > 1u << 20 || !(h > 0))
    throw std::runtime_error(path + ": corrupt MFGRID1 header");
  std::vector<std::uint8_t> mask((size_t)nx * ny);
  is.read((char*)mask.data(), (std::streamsize)mask.size());
  if (!is) throw std::runtime_error(path + ": truncated mask");
  for (auto& m : mask)
    if (m > 1) throw std::runtime_error(path + ": mask bytes must be 0/1");
  return domain_from_mask((int)nx, (int)ny, h, mask);
}

}  // namespace

void save_grid(const DomainGrid& g, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_header(os, g);
  if (!os) throw std::runtime_error("short write to " + path);
}

DomainGrid load_grid(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_header(is, path);
}

void save_field(const ScalarField& f, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_header(os, *f.g);
  for (int c = 0; c < f.g->cells(); ++c) put_f64(os, f.v[c]);
  if (!os) throw std::runtime_error("short write to " + path);
}

ScalarField load_field(const std::string& path, const DomainGrid& g) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  DomainGrid hdr = read_header(is, path);
  if (hdr.nx != g.nx || hdr.ny != g.ny || hdr.h != g.h || hdr.mask != g.mask)
    throw std::runtime_error(path + ": grid header does not match the configured domain");
  ScalarField f = make_field(g);
  for (int c = 0; c < g.cells(); ++c) f.v[c] = get_f64(is);
  if (!is) throw std::runtime_error(path + ": truncated field payload");
  return f;
}

}  // namespace mobiflow
