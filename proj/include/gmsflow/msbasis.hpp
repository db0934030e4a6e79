#ifndef GMSFLOW_MSBASIS_HPP
#define GMSFLOW_MSBASIS_HPP

#include "gmsflow/fem.hpp"

#include <iosfwd>
#include <span>
#include <vector>

namespace gmsflow {

/// k-harmonic partition of unity: four functions per coarse element, stored as
/// fine nodal values on the element block. values[(e * 4 + j) * n + local_node].
struct MultiscaleBasis {
    GridHierarchy grid;
    int nodes_per_element = 0;
    std::vector<double> values;

    std::span<const double> chi(int e, int j) const
    {
        return {values.data() + static_cast<std::size_t>(e * 4 + j) * nodes_per_element,
                static_cast<std::size_t>(nodes_per_element)};
    }
    std::span<double> chi(int e, int j)
    {
        return {values.data() + static_cast<std::size_t>(e * 4 + j) * nodes_per_element,
                static_cast<std::size_t>(nodes_per_element)};
    }
};

/// Four harmonic functions on one coarse element with bilinear boundary data.
std::array<Vector, 4> harmonic_element(const GridHierarchy& grid, int element, std::span<const double> k);

MultiscaleBasis harmonic_basis(const GridHierarchy& grid, std::span<const double> k);

/// Standard bilinear functions on every element (the basis for constant k, and for r = 1).
MultiscaleBasis bilinear_basis(const GridHierarchy& grid);

/// k~ = k h^2 Σ |∇χ_z|^2 per fine cell, gradients at cell centres, sum over the
/// vertices of the weight set (interior and Neumann vertices).
std::vector<double> energy_weight(const MultiscaleBasis& basis, std::span<const double> k, const VertexClasses& classes);

/// Dense stiffness (k) and mass (k~) matrices on a patch of fine cells. Cells where
/// k~ vanishes get eps * k as mass weight.
struct PatchMatrices {
    CellBlock block;
    Eigen::MatrixXd stiffness;
    Eigen::MatrixXd mass;
    bool regularized = false;
};

PatchMatrices patch_matrices(const Grid2D& fine, const CellBlock& block, std::span<const double> k,
                             std::span<const double> ktilde, double eps = 1e-10);

/// Smallest eigenpairs of K ψ = μ M ψ with M-orthonormal vectors. The first pair is
/// (0, constant) exactly.
struct SpectralResult {
    std::vector<double> eigenvalues;
    Eigen::MatrixXd vectors;
    std::vector<double> residuals;  // ‖Kψ - μMψ‖ / ‖Kψ‖ (absolute for μ = 0)
    bool regularized = false;
};

SpectralResult local_spectral(const PatchMatrices& patch, int n_eigs);

class EigenSolverError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct VertexSpectrum {
    int vertex = -1;
    CellBlock patch;
    SpectralResult result;
};

/// Spectral problems on ω_z for the listed coarse vertices (n_eigs pairs each).
std::vector<VertexSpectrum> compute_spectra(const GridHierarchy& grid, std::span<const double> k,
                                            std::span<const double> ktilde, std::span<const int> vertices, int n_eigs);

/// L_z = L at interior vertices (and Neumann vertices when enabled), 1 elsewhere.
std::vector<int> enrichment_levels(const VertexClasses& classes, int level, bool enrich_neumann = false);

/// Products Φ_{z,l} = χ_z ψ_{z,l}, kept per ω_z (ψ) and restricted per element.
struct EnrichedBasisSet {
    GridHierarchy grid;
    MultiscaleBasis chi;
    std::vector<int> levels;                   // L_z per coarse vertex
    std::vector<CellBlock> patches;            // ω_z
    std::vector<std::vector<double>> eigenvalues;
    std::vector<Eigen::MatrixXd> psi;          // patch nodes x L_z, column 0 is exactly 1
    std::vector<Eigen::MatrixXd> element_phi;  // element nodes x Σ_j L_{z_j}
    std::vector<std::array<int, 4>> element_offset;

    /// Patch-local node of local node `n` of element e, inside ω_z.
    int patch_node(int z, int e, int n) const;
    Eigen::Ref<const Vector> phi_element(int e, int j, int l) const
    {
        return element_phi[e].col(element_offset[e][j] + l);
    }
    /// Φ_{z,l} on the fine nodes of ω_z.
    Vector phi_patch(int z, int l) const;
};

/// ψ_{z,1} is rescaled to the constant 1; spectra may be empty for vertices with L_z = 1.
EnrichedBasisSet build_enriched(const MultiscaleBasis& chi, const std::vector<VertexSpectrum>& spectra,
                                const std::vector<int>& levels);

/// Per vertex, per element: fine nodal values of χ, one line per element.
void write_basis(std::ostream& os, const MultiscaleBasis& basis);

}  // namespace gmsflow

#endif
