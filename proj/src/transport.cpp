#include "gmsflow/transport.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace gmsflow {

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t hash)
{
    for (unsigned char c : bytes) {
        hash ^= c;
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

std::uint64_t fingerprint(const SparseMatrix& m)
{
    SparseMatrix c = m;
    c.makeCompressed();
    auto bytes = [](const auto* p, std::size_t n) {
        return std::string_view(reinterpret_cast<const char*>(p), n * sizeof(*p));
    };
    std::uint64_t h = fnv1a(bytes(c.valuePtr(), static_cast<std::size_t>(c.nonZeros())));
    h = fnv1a(bytes(c.innerIndexPtr(), static_cast<std::size_t>(c.nonZeros())), h);
    return fnv1a(bytes(c.outerIndexPtr(), static_cast<std::size_t>(c.outerSize() + 1)), h);
}

UpwindTransport::UpwindTransport(const Grid2D& grid, FracFlow frac_flow, double max_slope, InflowCondition inflow)
    : grid_(grid), f_(std::move(frac_flow)), max_slope_(max_slope), inflow_(inflow)
{
    if (!(max_slope_ > 0.0))
        throw std::invalid_argument("fractional flow slope bound must be positive");
    area_.resize(grid.num_nodes());
    for (int z = 0; z < grid.num_nodes(); ++z) {
        area_[z] = control_volume_area(grid, z);
        total_volume_ += area_[z];
    }
    interior_.resize(grid.num_interior_dual_edges());
    for (int c = 0; c < grid.num_cells(); ++c) {
        const auto n = grid.cell_nodes(c);
        for (int k = 0; k < 4; ++k)
            interior_[4 * c + k] = {n[k], n[next_quadrant(k)]};
    }
    for (Side s : all_sides)
        for (int m = 0; m < grid.side_length(s); ++m)
            for (int h = 0; h < 2; ++h) {
                const int a = m + h;
                int node = 0;
                switch (s) {
                case Side::Left:
                    node = grid.node(0, a);
                    break;
                case Side::Right:
                    node = grid.node(grid.nx, a);
                    break;
                case Side::Bottom:
                    node = grid.node(a, 0);
                    break;
                case Side::Top:
                    node = grid.node(a, grid.ny);
                    break;
                }
                boundary_node_.push_back(node);
                boundary_side_.push_back(static_cast<int>(s));
            }
}

double UpwindTransport::cfl_dt(const FluxField& flux, double cfl, double max_dt) const
{
    if (static_cast<int>(flux.flux.size()) != grid_.num_dual_edges() || flux.grid.nx != grid_.nx ||
        flux.grid.ny != grid_.ny)
        throw std::invalid_argument("flux field does not match the transport grid");
    std::vector<double> out(grid_.num_nodes(), 0.0);
    const int ni = grid_.num_interior_dual_edges();
    for (int e = 0; e < ni; ++e) {
        const double f = flux.flux[e];
        out[f > 0.0 ? interior_[e][0] : interior_[e][1]] += std::abs(f);
    }
    for (std::size_t b = 0; b < boundary_node_.size(); ++b)
        out[boundary_node_[b]] += std::max(0.0, flux.flux[ni + b]);
    double dt = max_dt;
    for (int z = 0; z < grid_.num_nodes(); ++z)
        if (out[z] > 0.0)
            dt = std::min(dt, cfl * area_[z] / (out[z] * max_slope_));
    return dt;
}

StepReport UpwindTransport::step(SaturationState& state, const FluxField& flux, double dt,
                                 std::span<const double> water_source) const
{
    if (static_cast<int>(state.s.size()) != grid_.num_nodes())
        throw std::invalid_argument("saturation does not match the transport grid");
    if (!water_source.empty() && static_cast<int>(water_source.size()) != grid_.num_nodes())
        throw std::invalid_argument("water source does not match the transport grid");
    const double limit = cfl_dt(flux, 1.0);
    if (!(dt >= 0.0) || dt > limit * (1.0 + 1e-12))
        throw CflError("time step " + std::to_string(dt) + " exceeds the CFL bound " + std::to_string(limit));

    const std::vector<double>& old = state.s;
    std::vector<double> div(grid_.num_nodes(), 0.0);  // net transported water leaving each CV
    const int ni = grid_.num_interior_dual_edges();
    for (int e = 0; e < ni; ++e) {
        const double f = flux.flux[e];
        if (f == 0.0)
            continue;
        const auto [a, b] = interior_[e];
        const double t = f * f_(f > 0.0 ? old[a] : old[b]);
        div[a] += t;
        div[b] -= t;
    }
    StepReport rep;
    for (std::size_t k = 0; k < boundary_node_.size(); ++k) {
        const double f = flux.flux[ni + k];
        if (f == 0.0)
            continue;
        const int z = boundary_node_[k];
        const double t = f * f_(f > 0.0 ? old[z] : inflow_.saturation[boundary_side_[k]]);
        div[z] += t;
        rep.boundary_net += t;
    }

    std::vector<double> next(old.size());
    double source_total = 0.0;
    double change = 0.0;
    rep.s_min = std::numeric_limits<double>::infinity();
    rep.s_max = -std::numeric_limits<double>::infinity();
    for (int z = 0; z < grid_.num_nodes(); ++z) {
        const double q = water_source.empty() ? 0.0 : water_source[z];
        next[z] = old[z] + dt * (q - div[z]) / area_[z];
        change += area_[z] * (next[z] - old[z]);
        source_total += q;
        rep.s_min = std::min(rep.s_min, next[z]);
        rep.s_max = std::max(rep.s_max, next[z]);
    }
    rep.mass_residual = change + dt * rep.boundary_net - dt * source_total;
    state.s = std::move(next);
    state.time += dt;
    state.dt = dt;
    return rep;
}

double saturation_error(std::span<const double> s, std::span<const double> ref, std::span<const double> areas)
{
    if (s.size() != ref.size() || s.size() != areas.size())
        throw std::invalid_argument("saturation layouts differ");
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        num += areas[i] * (s[i] - ref[i]) * (s[i] - ref[i]);
        den += areas[i] * ref[i] * ref[i];
    }
    return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

std::vector<double> total_mobility_coefficient(const GridHierarchy& grid, FluxLevel level, std::span<const double> s,
                                               std::span<const double> k, const MobilityModel& model)
{
    const Grid2D& fine = grid.fine;
    std::vector<double> out(fine.num_cells());
    if (level == FluxLevel::FineDual) {
        if (static_cast<int>(s.size()) != fine.num_nodes())
            throw std::invalid_argument("saturation does not match the fine nodes");
        for (int c = 0; c < fine.num_cells(); ++c) {
            const auto n = fine.cell_nodes(c);
            out[c] = model.mobility(0.25 * (s[n[0]] + s[n[1]] + s[n[2]] + s[n[3]])) * k[c];
        }
        return out;
    }
    if (static_cast<int>(s.size()) != grid.coarse.num_nodes())
        throw std::invalid_argument("saturation does not match the coarse nodes");
    const int r = grid.refine;
    for (int j = 0; j < fine.ny; ++j)
        for (int i = 0; i < fine.nx; ++i) {
            // coarse control volume containing the cell centre
            const int ci = static_cast<int>(std::floor((i + 0.5) / r + 0.5));
            const int cj = static_cast<int>(std::floor((j + 0.5) / r + 0.5));
            out[fine.cell(i, j)] = model.mobility(s[grid.coarse.node(ci, cj)]) * k[fine.cell(i, j)];
        }
    return out;
}

double time_for_pvi(const FluxField& flux, double pvi)
{
    double inflow = 0.0;
    for (int e = flux.grid.num_interior_dual_edges(); e < flux.grid.num_dual_edges(); ++e)
        inflow += std::max(0.0, -flux.flux[e]);
    if (!(inflow > 0.0))
        throw std::invalid_argument("no inflow through the boundary");
    return pvi * flux.grid.width() * flux.grid.height() / inflow;
}

namespace {

struct PressureStage {
    const TwoPhaseConfig& cfg;
    FluxLevel level = FluxLevel::FineDual;
    MultiscaleBasis chi;
    CoarseSpace space;

    explicit PressureStage(const TwoPhaseConfig& c) : cfg(c)
    {
        if (cfg.pipeline != Pipeline::Multiscale)
            return;
        const auto& g = cfg.grid;
        chi = harmonic_basis(g, cfg.k);
        const auto classes = classify_vertices(g.coarse, cfg.bc.layout());
        const auto levels = enrichment_levels(classes, cfg.level, cfg.enrich_neumann);
        std::vector<VertexSpectrum> spectra;
        if (cfg.level > 1) {
            std::vector<int> vertices = classes.interior;
            if (cfg.enrich_neumann)
                vertices.insert(vertices.end(), classes.neumann.begin(), classes.neumann.end());
            std::sort(vertices.begin(), vertices.end());
            const auto kt = energy_weight(chi, cfg.k, classes);
            spectra = compute_spectra(g, cfg.k, kt, vertices, cfg.level);
        }
        const auto set = build_enriched(chi, spectra, levels);
        space = build_coarse_space(set, classes, cfg.level, cfg.enrich_neumann);
        level = cfg.downscale ? FluxLevel::FineDual : FluxLevel::CoarseDual;
    }

    FluxField operator()(std::span<const double> coeff, std::uint64_t& print) const
    {
        const Grid2D& fine = cfg.grid.fine;
        if (cfg.pipeline == Pipeline::Multiscale) {
            const auto sol = assemble_and_solve_coarse(space, coeff, {}, cfg.bc);
            print = fingerprint(sol.matrix);
            const auto coarse = postprocess_coarse(chi, project_to_fine(space, sol.coefficients), coeff, {}, cfg.bc);
            if (!cfg.downscale)
                return coarse.field;
            return downscale(cfg.grid, coarse, coeff, {}, cfg.bc).field;
        }
        const CellBlock all = fine.all_cells();
        LinearSystem sys = assemble(fine, all, coeff, {}, make_boundary_data(fine, all, cfg.bc));
        print = fingerprint(sys.matrix);
        if (sys.singular)
            sys = pin_one_dof(std::move(sys), 0, 0.0);
        const Vector p = expand_solution(sys, solve_spd(sys));
        if (cfg.pipeline == Pipeline::RawCG)
            return raw_cg_flux(fine, p, coeff);
        return postprocess_fine(fine, p, coeff, {}, cfg.bc).field;
    }
};

}  // namespace

TwoPhaseResult run_two_phase(const TwoPhaseConfig& cfg)
{
    const auto& sch = cfg.schedule;
    if (sch.substeps < 1)
        throw std::invalid_argument("substeps must be >= 1");
    if (!(sch.cfl > 0.0 && sch.cfl <= 1.0))
        throw std::invalid_argument("CFL number must lie in (0, 1]");
    if (!(sch.final_time > 0.0))
        throw std::invalid_argument("final time must be positive");
    if (static_cast<int>(cfg.k.size()) != cfg.grid.fine.num_cells())
        throw std::invalid_argument("coefficient does not match the fine grid");

    const PressureStage pressure(cfg);
    TwoPhaseResult res;
    res.level = pressure.level;
    res.transport_grid = res.level == FluxLevel::FineDual ? cfg.grid.fine : cfg.grid.coarse;
    if (cfg.pipeline == Pipeline::Multiscale)
        res.coarse_dofs = pressure.space.num_dofs();
    const MobilityModel model = cfg.mobility;
    const UpwindTransport transport(
        res.transport_grid, [model](double s) { return model.frac_flow(s); }, model.max_frac_flow_slope(),
        cfg.inflow);
    res.areas = transport.areas();

    std::vector<double> events;
    for (double f : cfg.snapshot_fractions)
        if (f > 0.0 && f <= 1.0)
            events.push_back(f * sch.final_time);
    events.push_back(sch.final_time);
    std::sort(events.begin(), events.end());
    events.erase(std::unique(events.begin(), events.end()), events.end());
    const bool final_is_snapshot =
        std::any_of(cfg.snapshot_fractions.begin(), cfg.snapshot_fractions.end(), [](double f) { return f == 1.0; });

    SaturationState state{res.transport_grid, res.level,
                          std::vector<double>(res.transport_grid.num_nodes(), cfg.initial_saturation), 0.0, 0.0};
    res.s_min = res.s_max = cfg.initial_saturation;
    std::size_t next_event = 0;
    const double tol = 1e-12 * sch.final_time;
    const double max_dt = std::isfinite(sch.max_dt) ? sch.max_dt : sch.final_time;

    while (next_event < events.size()) {
        if (sch.max_steps > 0 && res.steps >= sch.max_steps) {
            res.completed = false;
            break;
        }
        const auto coeff = total_mobility_coefficient(cfg.grid, res.level, state.s, cfg.k, cfg.mobility);
        std::uint64_t print = 0;
        const FluxField flux = pressure(coeff, print);
        res.fingerprints.push_back(print);
        ++res.pressure_solves;
        if (cfg.audit)
            res.max_audit = std::max(res.max_audit, conservation_audit(flux, cfg.grid.fine, {}).relative());
        const double dt_cfl = transport.cfl_dt(flux, sch.cfl, max_dt);
        res.min_dt = res.pressure_solves == 1 ? dt_cfl : std::min(res.min_dt, dt_cfl);

        for (int sub = 0; sub < sch.substeps && next_event < events.size(); ++sub) {
            if (sch.max_steps > 0 && res.steps >= sch.max_steps)
                break;
            const double dt = std::min(dt_cfl, events[next_event] - state.time);
            const StepReport rep = transport.step(state, flux, dt);
            ++res.steps;
            res.max_mass_residual = std::max(res.max_mass_residual, std::abs(rep.mass_residual) / transport.total_volume());
            res.s_min = std::min(res.s_min, rep.s_min);
            res.s_max = std::max(res.s_max, rep.s_max);
            if (res.breakthrough_time < 0.0)
                for (int j = 0; j <= res.transport_grid.ny; ++j)
                    if (state.s[res.transport_grid.node(res.transport_grid.nx, j)] > 0.5) {
                        res.breakthrough_time = state.time;
                        break;
                    }
            if (std::abs(state.time - events[next_event]) <= tol) {
                state.time = events[next_event];
                if (next_event + 1 < events.size() || final_is_snapshot)
                    res.snapshots.push_back({state.time, state.s});
                ++next_event;
            }
        }
    }
    res.end_time = state.time;
    return res;
}

std::vector<double> saturation_error_curve(const TwoPhaseResult& run, const TwoPhaseResult& ref)
{
    if (run.snapshots.size() != ref.snapshots.size())
        throw std::invalid_argument("runs have different snapshot counts");
    std::vector<double> out;
    for (std::size_t i = 0; i < run.snapshots.size(); ++i) {
        if (std::abs(run.snapshots[i].time - ref.snapshots[i].time) > 1e-12 * std::max(1.0, ref.snapshots[i].time))
            throw std::invalid_argument("snapshot times differ");
        out.push_back(saturation_error(run.snapshots[i].s, ref.snapshots[i].s, ref.areas));
    }
    return out;
}

}  // namespace gmsflow
