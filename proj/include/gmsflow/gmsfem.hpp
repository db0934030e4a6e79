#ifndef GMSFLOW_GMSFEM_HPP
#define GMSFLOW_GMSFEM_HPP

#include "gmsflow/msbasis.hpp"

#include <iosfwd>
#include <span>
#include <vector>

namespace gmsflow {

struct CoarseDof {
    int vertex = -1;
    int level = 0;  // 0-based eigen index, 0 is χ_z itself
};

/// Coarse space spanned by Φ_{z,l}. All (z, 0) dofs come first in vertex order,
/// then (z, 1) for the enriched vertices, and so on.
struct CoarseSpace {
    GridHierarchy grid;
    std::vector<CoarseDof> dofs;
    SparseMatrix R;              // dofs x fine nodes
    std::vector<char> dirichlet; // per dof: coefficient fixed by boundary data

    int num_dofs() const { return static_cast<int>(dofs.size()); }
};

/// L at interior vertices (and Neumann vertices when enrich_neumann), 1 elsewhere.
CoarseSpace build_coarse_space(const EnrichedBasisSet& basis, const VertexClasses& classes, int level,
                               bool enrich_neumann = false);

/// Expected dof count |Z| + (L - 1)|Z_in| (Neumann vertices added when enriched).
int coarse_dof_count(const VertexClasses& classes, int level, bool enrich_neumann = false);

struct CoarseSolution {
    Vector coefficients;  // every dof, Dirichlet dofs hold p_D(x_z)
    SparseMatrix matrix;  // full coarse matrix before boundary treatment
    Vector rhs;
    double residual = 0.0;
};

/// Pressure value a Dirichlet vertex receives (first Dirichlet side in Left, Right, Bottom, Top order).
double dirichlet_vertex_value(const Grid2D& coarse, int z, const BoundaryConditions& bc);

/// Galerkin solve in the coarse space with matrix R A_fine R^T. `coeff` is λk per fine cell.
CoarseSolution assemble_and_solve_coarse(const CoarseSpace& space, std::span<const double> coeff,
                                         std::span<const double> source, const BoundaryConditions& bc);

/// Fine nodal pressure R^T p.
Vector project_to_fine(const CoarseSpace& space, const Vector& coefficients);

/// MsFEM solve assembled element by element from χ (independent of the R route).
/// Returns coefficients indexed by coarse vertex.
CoarseSolution solve_msfem(const MultiscaleBasis& chi, const VertexClasses& classes, std::span<const double> coeff,
                           std::span<const double> source, const BoundaryConditions& bc);

/// Fine nodal field Σ_z p_z χ_z.
Vector project_msfem(const MultiscaleBasis& chi, const Vector& coefficients);

/// Fine-scale Q1 reference solve on the whole domain.
Vector solve_fine(const Grid2D& fine, std::span<const double> coeff, std::span<const double> source,
                  const BoundaryConditions& bc);

/// sqrt(a(u, u)) on the whole fine grid.
double energy_norm(const Grid2D& fine, std::span<const double> coeff, const Vector& nodal);

/// One line per dof: vertex, level, coefficient.
void write_coarse_solution(std::ostream& os, const CoarseSpace& space, const Vector& coefficients);

}  // namespace gmsflow

#endif
