#ifndef GMSFLOW_CONSERVE_HPP
#define GMSFLOW_CONSERVE_HPP

#include "gmsflow/msbasis.hpp"

#include <array>
#include <functional>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <vector>

namespace gmsflow {

enum class FluxLevel : int { CoarseDual = 0, FineDual = 1 };

/// Normal flux per dual edge of `grid`, oriented as in Grid2D (interior edges from
/// quadrant k to k + 1, boundary halves as outflow).
struct FluxField {
    Grid2D grid;
    FluxLevel level = FluxLevel::FineDual;
    std::vector<double> flux;
};

class CompatibilityError : public std::runtime_error {
public:
    CompatibilityError(const std::string& what, double residual) : std::runtime_error(what), residual_(residual) {}
    double residual() const { return residual_; }

private:
    double residual_;
};

/// Per-element data of the flux postprocess. Vertex order SW, SE, NE, NW.
struct ElementFluxSystem {
    int element = -1;
    std::array<double, 4> Q{};                // ∫ λk ∇p·∇χ_ζ
    std::array<double, 4> F{};                // ∫ q χ_ζ
    std::array<double, 4> G{};                // ∫_{Γ_N} g_N χ_ζ
    std::array<double, 4> N{};                // ∫ g_N over the Γ_N halves of E_ζ
    std::array<double, 4> target{};           // F - Q - G, outflow across the other halves of E_ζ
    std::array<double, 4> quadrant_source{};  // ∫ q over quadrant ζ
    std::array<double, 8> boundary_half{};    // outflow per (side, half) of the element boundary
    Eigen::Matrix4d B = Eigen::Matrix4d::Zero();  // flux of χ_η across interior half-edge k
    Eigen::Matrix4d A = Eigen::Matrix4d::Zero();  // quadrant balance matrix before pinning
    Eigen::Vector4d rhs = Eigen::Vector4d::Zero();
    Eigen::Vector4d alpha = Eigen::Vector4d::Zero();
    std::array<double, 4> flux{};                 // interior half-edges, stored orientation
    std::array<std::vector<double>, 4> pieces;    // per half-edge, per fine piece, same orientation
    double lemma1 = 0.0;         // |Σ(F - Q) - ∫_τ q|
    double compatibility = 0.0;  // |Σ rhs|
    double balance = 0.0;        // max |quadrant balance| after the solve
    double scale = 0.0;
};

struct PostprocessResult {
    FluxField field;  // on the element grid
    CellBlock block;
    int refine = 1;
    std::vector<ElementFluxSystem> elements;
    double max_lemma1 = 0.0;         // relative to element scale
    double max_compatibility = 0.0;  // relative to the largest element scale of the block
    double max_balance = 0.0;        // relative to element scale
};

/// Element basis accessor: four functions on the (r+1)^2 element nodes of element e.
using ElementBasis = std::function<std::array<std::span<const double>, 4>(int e)>;

/// Postprocess a nodal pressure on `block` (block-local node order) element by element.
/// Elements are r x r fine cells; boundary data is that of the block.
PostprocessResult postprocess_block(const Grid2D& fine, const CellBlock& block, int refine, const ElementBasis& basis,
                                    const Vector& pressure, std::span<const double> coeff,
                                    std::span<const double> source, const BoundaryData& bc, int pin = 0);

/// Coarse-level postprocess of a fine nodal pressure with the MsFEM functions χ.
PostprocessResult postprocess_coarse(const MultiscaleBasis& chi, const Vector& pressure, std::span<const double> coeff,
                                     std::span<const double> source, const BoundaryConditions& bc, int pin = 0);

/// Fine-level postprocess with the Q1 nodal basis on every fine cell.
PostprocessResult postprocess_fine(const Grid2D& fine, const Vector& pressure, std::span<const double> coeff,
                                   std::span<const double> source, const BoundaryConditions& bc, int pin = 0);

/// Coarse traces on the fine segments of the coarse dual mesh. Vertical segment (i, j)
/// joins fine nodes (i, j) and (i, j + 1), flux in +x; horizontal segment (i, j) joins
/// (i, j) and (i + 1, j), flux in +y.
struct SegmentTraces {
    int nx = 0;
    int ny = 0;
    std::vector<double> x;  // (nx + 1) * ny
    std::vector<double> y;  // nx * (ny + 1)
    std::vector<char> has_x;
    std::vector<char> has_y;

    int vertical(int i, int j) const { return j * (nx + 1) + i; }
    int horizontal(int i, int j) const { return j * nx + i; }
};

/// Needs an even refinement factor.
SegmentTraces coarse_traces(const GridHierarchy& grid, const PostprocessResult& coarse);

struct DownscaleResult {
    FluxField field;
    double max_trace_compatibility = 0.0;  // relative, Neumann-only control volumes
    double max_compatibility = 0.0;
    double max_balance = 0.0;
};

/// Neumann problem on every coarse control volume with the coarse traces as data
/// (p_D on Γ_D parts), followed by the fine-level postprocess.
DownscaleResult downscale(const GridHierarchy& grid, const PostprocessResult& coarse, std::span<const double> coeff,
                          std::span<const double> source, const BoundaryConditions& bc);

struct AuditReport {
    double max_residual = 0.0;
    double mean_residual = 0.0;
    int argmax = -1;
    double scale = 0.0;
    std::vector<double> residuals;

    double relative() const { return scale > 0.0 ? max_residual / scale : max_residual; }
};

/// ∫ q over the control volume of node z of `grid`; `fine` carries the per-cell source
/// and is nested in (or equal to) `grid`.
double control_volume_source(const Grid2D& grid, int z, const Grid2D& fine, std::span<const double> source);

/// r_z = ∮ flux - ∫_{C_z} q per control volume. Scale: max over CVs of Σ|edge flux| + |∫q|.
AuditReport conservation_audit(const FluxField& flux, const Grid2D& fine, std::span<const double> source);

/// Edge-length weighted relative L² difference of the normal velocities.
double velocity_error(const FluxField& flux, const FluxField& ref);

/// -λk∇p·n of a fine nodal pressure integrated over every fine dual edge, no postprocessing.
FluxField raw_cg_flux(const Grid2D& fine, const Vector& pressure, std::span<const double> coeff);

/// Exact fluxes of a constant velocity field over every dual edge.
FluxField uniform_flux(const Grid2D& grid, FluxLevel level, double vx, double vy);

void write_flux_csv(std::ostream& os, const FluxField& flux);
void write_audit(std::ostream& os, const AuditReport& report);

}  // namespace gmsflow

#endif
