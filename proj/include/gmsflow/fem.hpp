#ifndef GMSFLOW_FEM_HPP
#define GMSFLOW_FEM_HPP

#include "gmsflow/mesh.hpp"

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <array>
#include <functional>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gmsflow {

using Vector = Eigen::VectorXd;
using SparseMatrix = Eigen::SparseMatrix<double>;

/// Exact Q1 stiffness of a hx x hy rectangle with constant coefficient, vertex order SW, SE, NE, NW.
Eigen::Matrix4d local_stiffness(double hx, double hy, double coeff);

/// Exact Q1 mass matrix of a hx x hy rectangle with constant weight.
Eigen::Matrix4d local_mass(double hx, double hy, double weight);

/// Condition on one side of a rectangular domain. For Dirichlet sides `value`
/// is the pressure, for Neumann sides the outward normal flux -λk∇p·n. An empty
/// function means zero.
struct SideCondition {
    BoundaryKind kind = BoundaryKind::Neumann;
    std::function<double(double, double)> value;

    double operator()(double x, double y) const { return value ? value(x, y) : 0.0; }
};

struct BoundaryConditions {
    std::array<SideCondition, 4> sides;  // indexed by Side

    const SideCondition& operator[](Side s) const { return sides[static_cast<int>(s)]; }
    SideCondition& operator[](Side s) { return sides[static_cast<int>(s)]; }
    BoundaryLayout layout() const;

    /// p = left on x = x0, p = right on the opposite side, no flow on top and bottom.
    static BoundaryConditions left_to_right(double left = 1.0, double right = 0.0);
    static BoundaryConditions all_dirichlet(std::function<double(double, double)> value);
    static BoundaryConditions all_neumann(std::function<double(double, double)> flux = {});
};

/// Neumann data on one boundary segment of a block: ∫ g φ_end for both segment end
/// nodes, and ∫ g over both halves of the segment (outward flux).
struct BoundarySegment {
    BoundaryKind kind = BoundaryKind::Neumann;
    std::array<double, 2> weighted{0.0, 0.0};
    std::array<double, 2> half{0.0, 0.0};

    double total() const { return half[0] + half[1]; }
};

/// Boundary data resolved on the fine segments and nodes of a cell block.
struct BoundaryData {
    CellBlock block;
    std::array<std::vector<BoundarySegment>, 4> segments;  // indexed by Side, ordered by increasing coordinate
    std::vector<char> dirichlet_node;                      // per block node
    std::vector<double> dirichlet_value;                   // per block node

    /// All-Neumann, zero-flux data on a block.
    static BoundaryData zero_flux(const CellBlock& block);

    BoundarySegment& segment(Side s, int m) { return segments[static_cast<int>(s)][m]; }
    const BoundarySegment& segment(Side s, int m) const { return segments[static_cast<int>(s)][m]; }
    /// Local node index of node m along side s.
    int side_node(Side s, int m) const;
    /// Marks segment Dirichlet and its two end nodes with the given values.
    void set_dirichlet(Side s, int m, double value_start, double value_end);
    void set_neumann_constant(Side s, int m, double outflow);
    bool has_dirichlet() const;
};

/// Resolve side conditions on the boundary of `block` (its four sides play the role
/// of the domain boundary). Corner nodes touching a Dirichlet segment are Dirichlet.
BoundaryData make_boundary_data(const Grid2D& grid, const CellBlock& block, const BoundaryConditions& bc);

/// Global fine-cell index of local cell (li, lj) of a block.
inline int block_cell(const Grid2D& grid, const CellBlock& b, int li, int lj) { return grid.cell(b.i0 + li, b.j0 + lj); }

/// Global node index of local node n of a block.
int block_node_to_global(const Grid2D& grid, const CellBlock& b, int local);

/// Assembled Q1 system on a cell block, Dirichlet nodes eliminated symmetrically.
struct LinearSystem {
    CellBlock block;
    SparseMatrix matrix;
    Vector rhs;
    std::vector<int> node_to_dof;  // -1 on Dirichlet nodes
    std::vector<int> dof_to_node;
    Vector dirichlet;              // nodal lifting, zero on free nodes
    bool singular = false;         // pure Neumann, constants in the kernel
    bool pinned = false;
    double compatibility_residual = 0.0;

    int num_dofs() const { return static_cast<int>(dof_to_node.size()); }
};

class SolverError : public std::runtime_error {
public:
    SolverError(const std::string& what, double residual) : std::runtime_error(what), residual_(residual) {}
    double residual() const { return residual_; }

private:
    double residual_;
};

/// Full (no boundary treatment) stiffness matrix of ∫ coeff ∇u·∇v on the block nodes.
/// `coeff` is indexed by global fine cell.
SparseMatrix assemble_stiffness(const Grid2D& grid, const CellBlock& block, std::span<const double> coeff);

/// Load vector (q, φ_i) - ∫_{Γ_N} g φ_i on the block nodes. `source` may be empty (q = 0).
Vector assemble_load(const Grid2D& grid, const CellBlock& block, std::span<const double> source, const BoundaryData& bc);

/// Assemble a(p, w) = (q, w) - <g_N, w> with Dirichlet lifting. Pure Neumann systems
/// are flagged singular; incompatible pure Neumann data throws.
LinearSystem assemble(const Grid2D& grid, const CellBlock& block, std::span<const double> coeff,
                      std::span<const double> source, const BoundaryData& bc);

/// Replace dof `dof` by the fixed value `value` (row/column elimination with lifting).
LinearSystem pin_one_dof(LinearSystem sys, int dof, double value);

/// Solve the SPD system to relative residual 1e-10: sparse LDLT, CG fallback.
Vector solve_spd(const LinearSystem& sys);
Vector solve_spd(const SparseMatrix& matrix, const Vector& rhs);

/// Nodal values on the block from a dof solution.
Vector expand_solution(const LinearSystem& sys, const Vector& dofs);

/// Energy a(u, u) on a block with per-cell coefficient.
double energy(const Grid2D& grid, const CellBlock& block, std::span<const double> coeff, const Vector& nodal);

/// Gradient of the bilinear interpolant of the four vertex values at a point of the cell
/// given in reference coordinates (s, t) in [0, 1]^2.
Eigen::Vector2d cell_gradient(const std::array<double, 4>& v, double hx, double hy, double s, double t);

void write_matrix_coo(std::ostream& os, const SparseMatrix& m);

}  // namespace gmsflow

#endif
