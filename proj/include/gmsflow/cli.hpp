#ifndef GMSFLOW_CLI_HPP
#define GMSFLOW_CLI_HPP

#include "gmsflow/conserve.hpp"
#include "gmsflow/field.hpp"
#include "gmsflow/gmsfem.hpp"
#include "gmsflow/transport.hpp"

#include <chrono>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace gmsflow {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A pipeline stage failed; the residuals it saw are kept for the report.
class StageError : public std::runtime_error {
public:
    StageError(const std::string& stage, const std::string& what, double residual = 0.0)
        : std::runtime_error(stage + ": " + what), stage_(stage), residual_(residual)
    {
    }
    const std::string& stage() const { return stage_; }
    double residual() const { return residual_; }

private:
    std::string stage_;
    double residual_;
};

enum class FieldSource { Homogeneous, Deterministic, Channelized, File };
enum class Method { Reference, MsFEM, GMsFEM };

struct ExperimentConfig {
    // [grid]
    int nx = 10;
    int ny = 10;
    int refine = 10;
    double width = 1.0;
    double height = 1.0;
    // [field]
    FieldSource source = FieldSource::Deterministic;
    double background = 1.0;
    double contrast = 2.0e4;  // deterministic: high value / background
    std::string field_path;
    ChannelizedParams channel;  // seed is the run seed
    // [solver]
    Method method = Method::GMsFEM;
    int level = 1;
    std::vector<int> levels{1, 2, 4, 6};
    bool enrich_neumann = false;
    bool downscale = true;
    // [bc]
    double p_left = 1.0;
    double p_right = 0.0;
    // [two_phase]
    MobilityModel mobility;
    SplittingSchedule schedule;
    double pvi = 0.0;  // > 0: final time from the initial inflow rate instead of schedule.final_time
    std::vector<double> snapshots{1.0 / 3.0, 2.0 / 3.0, 1.0};
    // [output]
    std::string out_dir = "out";
    std::uint64_t seed = 0;
};

/// Flat "key = value" text with [section] headers, ';' or '#' comments.
ExperimentConfig parse_config(std::istream& is);
ExperimentConfig load_config(const std::string& path);
/// Throws ConfigError on out-of-range values or a missing field file.
void validate(const ExperimentConfig& cfg);
/// Every parameter as sorted "section.key = value" lines; the manifest hashes this.
std::string canonical_text(const ExperimentConfig& cfg);
std::uint64_t config_hash(const ExperimentConfig& cfg);

GridHierarchy make_grid(const ExperimentConfig& cfg);
BoundaryConditions make_bc(const ExperimentConfig& cfg);
CoefficientField make_coefficient(const ExperimentConfig& cfg, const Grid2D& fine);

/// Basis and spectra built once for the highest level in use; coarse spaces for
/// any lower level share them.
class MultiscaleModel {
public:
    MultiscaleModel(const GridHierarchy& grid, std::vector<double> k, BoundaryConditions bc, int max_level,
                    bool enrich_neumann = false);

    const GridHierarchy& grid() const { return grid_; }
    const MultiscaleBasis& chi() const { return chi_; }
    const VertexClasses& classes() const { return classes_; }
    const std::vector<double>& k() const { return k_; }
    const BoundaryConditions& bc() const { return bc_; }
    int max_level() const { return max_level_; }
    CoarseSpace space(int level) const;

private:
    GridHierarchy grid_;
    std::vector<double> k_;
    BoundaryConditions bc_;
    int max_level_;
    bool enrich_neumann_;
    MultiscaleBasis chi_;
    VertexClasses classes_;
    std::vector<VertexSpectrum> spectra_;
};

struct ReferenceSolution {
    Vector pressure;
    PostprocessResult flux;
    AuditReport audit;
};

ReferenceSolution solve_reference(const GridHierarchy& grid, std::span<const double> k, const BoundaryConditions& bc);

struct MultiscaleSolution {
    int level = 1;
    int dofs = 0;
    Vector coefficients;
    Vector pressure;  // fine nodal projection
    PostprocessResult coarse;
    std::optional<DownscaleResult> fine;
    AuditReport coarse_audit;
    std::optional<AuditReport> fine_audit;
};

/// GMsFEM solve at `level` (L = 1 is MsFEM), postprocessing, optional downscaling.
MultiscaleSolution solve_multiscale(const MultiscaleModel& model, int level, bool downscale);

/// Velocity per vertex of the flux grid from its control-volume faces: the x component
/// averages east outflow and west inflow per unit length, y likewise.
std::vector<std::array<double, 2>> vertex_velocity(const FluxField& flux);

struct VtkArray {
    std::string name;
    std::vector<double> values;  // scalars: one per entry; vectors: 3 per entry
    int components = 1;
};

struct VtkData {
    std::string title = "gmsflow";
    std::vector<VtkArray> cell;
    std::vector<VtkArray> point;
};

/// Legacy ASCII STRUCTURED_POINTS. Numbers are written in shortest round-trip form,
/// so the bytes only depend on the data.
void write_vtk(std::ostream& os, const Grid2D& grid, const VtkData& data);
void write_vtk(const std::string& path, const Grid2D& grid, const VtkData& data);
VtkArray velocity_array(const FluxField& flux, const std::string& name = "velocity");

/// Shortest round-trip decimal form.
std::string format_number(double v);

/// Ordered key-value record written as "key = value" lines.
class Manifest {
public:
    explicit Manifest(const ExperimentConfig& cfg, const std::string& command);
    void set(const std::string& key, const std::string& value);
    void set(const std::string& key, double value);
    void set(const std::string& key, long long value);
    void set(const std::string& key, int value) { set(key, static_cast<long long>(value)); }
    const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }
    /// Adds the elapsed wall time as the last entry.
    void write(const std::string& path);

private:
    std::vector<std::pair<std::string, std::string>> entries_;
    std::chrono::steady_clock::time_point start_;
};

inline const std::vector<std::string> subcommands{"gen-perm",   "pressure",           "flux",      "downscale",
                                                  "single-phase-compare", "two-phase", "audit"};

/// Runs one subcommand, writes artifacts and manifest.txt into cfg.out_dir.
/// Returns 0 on success; stage failures are reported on `err` with exit status 2.
int run(const std::string& subcommand, const ExperimentConfig& cfg, std::ostream& log, std::ostream& err);

/// Final time from `cfg.pvi` (initial-state inflow rate of the reference flux) or the schedule.
double two_phase_final_time(const ExperimentConfig& cfg, const GridHierarchy& grid, std::span<const double> k);

TwoPhaseConfig two_phase_config(const ExperimentConfig& cfg, const GridHierarchy& grid, std::vector<double> k,
                                Pipeline pipeline, int level);

}  // namespace gmsflow

#endif
