#ifndef MOBIFLOW_GRID_HPP
#define MOBIFLOW_GRID_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace mobiflow {

// Masked-grid description of a bounded 2-D domain inside the unit box.
// Cell-centered scalars, face-centered vectors; faces that would cross the
// boundary are simply absent, which makes the no-flux condition structural.

struct ShapeSpec {
  std::string name = "square";  // square | disc | annulus_sector | pacman | dumbbell
  int res = 32;                 // cells per unit-box side, h = 1/res
  std::map<std::string, double> params;

  double get(const std::string& key, double dflt) const;
  // text form: "disc:res=32,radius=0.4"
  static ShapeSpec parse(const std::string& text);
  std::string to_string() const;
};

struct BoundaryFace {
  int cell = -1;    // adjacent inside cell
  int axis = 0;     // 0: face normal along x, 1: along y
  int side = +1;    // -1 low side of the cell, +1 high side
  double nx = 0, ny = 0;  // analytic outward unit normal at the face center
  double cx = 0, cy = 0;  // face center
  double bx = 0, by = 0;  // nearest point on the analytic boundary (= face
                          // center for mask-built grids); boundary-trace
                          // diagnostics extrapolate here, not to (cx, cy)
  double weight = 0;      // length weight h*|n.axis|; sums to ~perimeter
};

struct DomainGrid {
  int nx = 0, ny = 0;
  double h = 0;
  std::string shape = "mask";
  ShapeSpec spec;  // analytic description when built from one (name "mask" otherwise)
  bool convex = false;
  std::vector<std::uint8_t> mask;  // nx*ny, index i + nx*j
  std::vector<int> cell_of;        // nx*ny -> inside index or -1
  std::vector<int> ci, cj;         // inside index -> (i,j)

  // interior faces (both adjacent cells inside)
  std::vector<int> fx_l, fx_r;  // x-faces: left / right cell
  std::vector<int> fy_l, fy_r;  // y-faces: low / high cell

  // per-cell face ids, -1 where the face is absent (boundary)
  std::vector<int> face_w, face_e, face_s, face_n;

  std::vector<BoundaryFace> boundary;

  int cells() const { return (int)ci.size(); }
  int nfx() const { return (int)fx_l.size(); }
  int nfy() const { return (int)fy_l.size(); }
  int at(int i, int j) const {
    return (i < 0 || j < 0 || i >= nx || j >= ny) ? -1 : cell_of[i + nx * j];
  }
  double x(int c) const { return (ci[c] + 0.5) * h; }
  double y(int c) const { return (cj[c] + 0.5) * h; }
  double area() const { return cells() * h * h; }
};

// Builds the named analytic shape: mask from the level set, boundary normals
// and length weights from the analytic description (not the mask stencil).
// Throws on res < 8, empty interior, or a 4-disconnected interior.
DomainGrid build_domain(const ShapeSpec& spec);

// Grid from a raw mask; boundary geometry falls back to axis normals with
// weight h (staircase). Used by deserialization and tests.
DomainGrid domain_from_mask(int nx, int ny, double h,
                            const std::vector<std::uint8_t>& mask);

struct ScalarField {
  const DomainGrid* g = nullptr;
  Eigen::ArrayXd v;  // one value per inside cell
};

struct VectorField {
  const DomainGrid* g = nullptr;
  Eigen::ArrayXd x, y;  // per interior x-face / y-face
};

struct HessianField {
  const DomainGrid* g = nullptr;
  Eigen::ArrayXd xx, xy, yx, yy;
  Eigen::ArrayXd frobenius() const {
    return (xx * xx + xy * xy + yx * yx + yy * yy).sqrt();
  }
};

ScalarField make_field(const DomainGrid& g, double value = 0.0);
VectorField make_vector_field(const DomainGrid& g);

// staggered first-order calculus; <grad f, v> = -<f, div v> to rounding
VectorField gradient(const ScalarField& f);
ScalarField divergence(const VectorField& v);
ScalarField laplacian_neumann(const ScalarField& f);

// cell-centered derivative reconstructions: central stencils in the interior,
// one-sided second-order fallbacks near the boundary
ScalarField dx_cell(const ScalarField& f);
ScalarField dy_cell(const ScalarField& f);
HessianField hessian(const ScalarField& f);

double integral(const ScalarField& f);
double inner(const ScalarField& a, const ScalarField& b);
double inner(const VectorField& a, const VectorField& b);
double l2_norm(const ScalarField& f);
double l2_norm(const VectorField& v);

double perimeter(const DomainGrid& g);
// values of f extrapolated to boundary-face centers (second order)
std::vector<double> boundary_values(const ScalarField& f);
// normal derivative of f at boundary-face centers (one-sided, second order)
std::vector<double> boundary_normal_derivative(const ScalarField& f);
// sum of boundary_values(f) * weight; throws if the grid has no boundary
double boundary_integral(const ScalarField& f);

// binary format: magic "MFGRID1", nx, ny (u32 LE), h (f64 LE), mask bytes
// row-major; field files append cells() doubles in inside-index order
void save_grid(const DomainGrid& g, const std::string& path);
DomainGrid load_grid(const std::string& path);
void save_field(const ScalarField& f, const std::string& path);
ScalarField load_field(const std::string& path, const DomainGrid& g);

}  // namespace mobiflow

#endif
