#ifndef GMSFLOW_TRANSPORT_HPP
#define GMSFLOW_TRANSPORT_HPP

#include "gmsflow/conserve.hpp"
#include "gmsflow/field.hpp"
#include "gmsflow/gmsfem.hpp"

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace gmsflow {

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t hash = 0xcbf29ce484222325ULL);
std::uint64_t fingerprint(const SparseMatrix& m);

using FracFlow = std::function<double(double)>;

struct SaturationState {
    Grid2D grid;
    FluxLevel level = FluxLevel::FineDual;
    std::vector<double> s;  // per control volume (grid node)
    double time = 0.0;
    double dt = 0.0;        // last step
};

/// Saturation carried by inflow across each side of the domain.
struct InflowCondition {
    std::array<double, 4> saturation{1.0, 0.0, 0.0, 0.0};  // indexed by Side
};

struct StepReport {
    double mass_residual = 0.0;  // Σ|C|ΔS + Δt·(net boundary transport) - Δt·Σ∫q_w
    double boundary_net = 0.0;   // transported water leaving through ∂Ω
    double s_min = 0.0;
    double s_max = 0.0;
};

class CflError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Explicit upwind transport on the vertex control volumes of a grid.
class UpwindTransport {
public:
    UpwindTransport(const Grid2D& grid, FracFlow frac_flow, double max_slope, InflowCondition inflow = {});

    const Grid2D& grid() const { return grid_; }
    const std::vector<double>& areas() const { return area_; }
    double total_volume() const { return total_volume_; }

    /// cfl · min_z |C_z| / (outflow_z · max f'); `max_dt` when no control volume has outflow.
    double cfl_dt(const FluxField& flux, double cfl, double max_dt = std::numeric_limits<double>::infinity()) const;

    /// One step S_n from S_{n-1}. `water_source` is ∫_{C_z} q_w per control volume (may be empty).
    /// Throws CflError when dt exceeds the cfl = 1 bound.
    StepReport step(SaturationState& state, const FluxField& flux, double dt,
                    std::span<const double> water_source = {}) const;

private:
    Grid2D grid_;
    FracFlow f_;
    double max_slope_;
    InflowCondition inflow_;
    std::vector<double> area_;
    double total_volume_ = 0.0;
    std::vector<std::array<int, 2>> interior_;  // from node, to node of interior dual edges
    std::vector<int> boundary_node_;
    std::vector<int> boundary_side_;
};

/// Relative L² difference weighted by control-volume measure.
double saturation_error(std::span<const double> s, std::span<const double> ref, std::span<const double> areas);

struct SplittingSchedule {
    int substeps = 5;
    double final_time = 1.0;
    double cfl = 0.5;
    double max_dt = std::numeric_limits<double>::infinity();  // cap when the flux vanishes
    int max_steps = 0;  // > 0: stop once this many transport steps are taken
};

enum class Pipeline { Reference, Multiscale, RawCG };

struct TwoPhaseConfig {
    GridHierarchy grid;
    std::vector<double> k;  // per fine cell
    BoundaryConditions bc = BoundaryConditions::left_to_right(1.0, 0.0);
    MobilityModel mobility;
    Pipeline pipeline = Pipeline::Reference;
    int level = 1;                 // enrichment level of the multiscale pipeline
    bool downscale = true;         // multiscale: transport on fine (true) or coarse control volumes
    bool enrich_neumann = false;
    SplittingSchedule schedule;
    std::vector<double> snapshot_fractions{1.0 / 3.0, 2.0 / 3.0, 1.0};
    InflowCondition inflow;
    double initial_saturation = 0.0;
    bool audit = false;  // conservation audit of every pressure flux
};

struct Snapshot {
    double time = 0.0;
    std::vector<double> s;
};

struct TwoPhaseResult {
    Grid2D transport_grid;
    FluxLevel level = FluxLevel::FineDual;
    std::vector<double> areas;
    std::vector<Snapshot> snapshots;
    std::vector<std::uint64_t> fingerprints;  // pressure matrix per outer iteration
    int steps = 0;
    bool completed = true;  // false when the step budget ran out before the final time
    double end_time = 0.0;
    double min_dt = 0.0;    // smallest CFL step
    int pressure_solves = 0;
    int coarse_dofs = 0;
    double max_mass_residual = 0.0;  // relative to total volume
    double max_audit = 0.0;          // relative conservation residual (when audited)
    double s_min = 0.0;
    double s_max = 0.0;
    double breakthrough_time = -1.0;  // first time a right-boundary control volume exceeds 0.5
};

/// Operator splitting: pressure with λ(S_old), conservative flux, then `substeps` upwind steps.
TwoPhaseResult run_two_phase(const TwoPhaseConfig& config);

/// Final time in which `pvi` pore volumes enter through the domain at the rate of `flux`.
double time_for_pvi(const FluxField& flux, double pvi);

/// Error per snapshot of `run` against `ref` (same layout and times).
std::vector<double> saturation_error_curve(const TwoPhaseResult& run, const TwoPhaseResult& ref);

/// λ(S) k per fine cell from control-volume saturations on the fine or coarse dual grid.
std::vector<double> total_mobility_coefficient(const GridHierarchy& grid, FluxLevel level, std::span<const double> s,
                                               std::span<const double> k, const MobilityModel& model);

}  // namespace gmsflow

#endif
