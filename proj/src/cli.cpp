#include "gmsflow/cli.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>

namespace gmsflow {

namespace {

namespace fs = std::filesystem;
using boost::property_tree::ptree;

std::string lower(std::string s)
{
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

std::string trim(const std::string& s)
{
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos)
        return {};
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

double to_double(const std::string& key, const std::string& v)
{
    double out = 0.0;
    const auto t = trim(v);
    const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
    if (ec != std::errc() || p != t.data() + t.size())
        throw ConfigError(key + ": not a number: '" + v + "'");
    return out;
}

long long to_int(const std::string& key, const std::string& v)
{
    long long out = 0;
    const auto t = trim(v);
    const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
    if (ec != std::errc() || p != t.data() + t.size())
        throw ConfigError(key + ": not an integer: '" + v + "'");
    return out;
}

bool to_bool(const std::string& key, const std::string& v)
{
    const auto t = lower(trim(v));
    if (t == "true" || t == "yes" || t == "on" || t == "1")
        return true;
    if (t == "false" || t == "no" || t == "off" || t == "0")
        return false;
    throw ConfigError(key + ": not a boolean: '" + v + "'");
}

template <class T, class F>
std::vector<T> to_list(const std::string& key, const std::string& v, F convert)
{
    std::vector<T> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!trim(item).empty())
            out.push_back(static_cast<T>(convert(key, item)));
    if (out.empty())
        throw ConfigError(key + ": empty list");
    return out;
}

const char* source_name(FieldSource s)
{
    switch (s) {
    case FieldSource::Homogeneous: return "homogeneous";
    case FieldSource::Deterministic: return "deterministic";
    case FieldSource::Channelized: return "channelized";
    case FieldSource::File: return "file";
    }
    return "?";
}

const char* method_name(Method m)
{
    switch (m) {
    case Method::Reference: return "reference";
    case Method::MsFEM: return "msfem";
    case Method::GMsFEM: return "gmsfem";
    }
    return "?";
}

template <class T>
std::string join(const std::vector<T>& v)
{
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i)
            out += ',';
        if constexpr (std::is_floating_point_v<T>)
            out += format_number(v[i]);
        else
            out += std::to_string(v[i]);
    }
    return out;
}

std::string hex(std::uint64_t v)
{
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

// Trailing "; ..." or "# ..." after whitespace.
std::string strip_comment(const std::string& v)
{
    for (std::size_t i = 0; i < v.size(); ++i)
        if ((v[i] == ';' || v[i] == '#') && (i == 0 || v[i - 1] == ' ' || v[i - 1] == '\t'))
            return trim(v.substr(0, i));
    return v;
}

}  // namespace

std::string format_number(double v)
{
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

ExperimentConfig parse_config(std::istream& is)
{
    ptree tree;
    try {
        boost::property_tree::ini_parser::read_ini(is, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(std::string("config syntax: ") + e.what());
    }

    ExperimentConfig c;
    std::optional<double> contrast;
    for (const auto& [section, body] : tree) {
        if (body.empty() && !body.data().empty())
            throw ConfigError("key '" + section + "' outside a section");
        for (const auto& [name, node] : body) {
            const std::string key = section + "." + name;
            const std::string v = strip_comment(node.data());
            if (key == "grid.nx")
                c.nx = static_cast<int>(to_int(key, v));
            else if (key == "grid.ny")
                c.ny = static_cast<int>(to_int(key, v));
            else if (key == "grid.refine")
                c.refine = static_cast<int>(to_int(key, v));
            else if (key == "grid.width")
                c.width = to_double(key, v);
            else if (key == "grid.height")
                c.height = to_double(key, v);
            else if (key == "field.source") {
                const auto s = lower(trim(v));
                if (s == "homogeneous")
                    c.source = FieldSource::Homogeneous;
                else if (s == "deterministic")
                    c.source = FieldSource::Deterministic;
                else if (s == "channelized")
                    c.source = FieldSource::Channelized;
                else if (s == "file")
                    c.source = FieldSource::File;
                else
                    throw ConfigError(key + ": unknown source '" + v + "'");
            } else if (key == "field.background")
                c.background = to_double(key, v);
            else if (key == "field.contrast")
                contrast = to_double(key, v);
            else if (key == "field.path")
                c.field_path = trim(v);
            else if (key == "field.corr_x")
                c.channel.corr_x = to_double(key, v);
            else if (key == "field.corr_y")
                c.channel.corr_y = to_double(key, v);
            else if (key == "field.threshold")
                c.channel.threshold = to_double(key, v);
            else if (key == "field.sharpness")
                c.channel.sharpness = to_double(key, v);
            else if (key == "solver.method") {
                const auto s = lower(trim(v));
                if (s == "reference")
                    c.method = Method::Reference;
                else if (s == "msfem")
                    c.method = Method::MsFEM;
                else if (s == "gmsfem")
                    c.method = Method::GMsFEM;
                else
                    throw ConfigError(key + ": unknown method '" + v + "'");
            } else if (key == "solver.level")
                c.level = static_cast<int>(to_int(key, v));
            else if (key == "solver.levels")
                c.levels = to_list<int>(key, v, to_int);
            else if (key == "solver.enrich_neumann")
                c.enrich_neumann = to_bool(key, v);
            else if (key == "solver.downscale")
                c.downscale = to_bool(key, v);
            else if (key == "bc.left")
                c.p_left = to_double(key, v);
            else if (key == "bc.right")
                c.p_right = to_double(key, v);
            else if (key == "two_phase.mu_w")
                c.mobility.mu_w = to_double(key, v);
            else if (key == "two_phase.mu_o")
                c.mobility.mu_o = to_double(key, v);
            else if (key == "two_phase.exponent")
                c.mobility.exponent = to_double(key, v);
            else if (key == "two_phase.final_time")
                c.schedule.final_time = to_double(key, v);
            else if (key == "two_phase.pvi")
                c.pvi = to_double(key, v);
            else if (key == "two_phase.substeps")
                c.schedule.substeps = static_cast<int>(to_int(key, v));
            else if (key == "two_phase.max_steps")
                c.schedule.max_steps = static_cast<int>(to_int(key, v));
            else if (key == "two_phase.cfl")
                c.schedule.cfl = to_double(key, v);
            else if (key == "two_phase.max_dt")
                c.schedule.max_dt = to_double(key, v);
            else if (key == "two_phase.snapshots")
                c.snapshots = to_list<double>(key, v, to_double);
            else if (key == "output.dir")
                c.out_dir = trim(v);
            else if (key == "run.seed")
                c.seed = static_cast<std::uint64_t>(to_int(key, v));
            else
                throw ConfigError("unknown key '" + key + "'");
        }
    }
    if (contrast) {
        c.contrast = *contrast;
        c.channel.contrast = *contrast;
    }
    return c;
}

ExperimentConfig load_config(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot open config '" + path + "'");
    return parse_config(in);
}

void validate(const ExperimentConfig& c)
{
    auto require = [](bool ok, const std::string& what) {
        if (!ok)
            throw ConfigError(what);
    };
    require(c.nx >= 1 && c.ny >= 1, "grid.nx and grid.ny must be >= 1");
    require(c.refine >= 1, "grid.refine must be >= 1");
    require(c.width > 0.0 && c.height > 0.0, "grid extents must be positive");
    require(c.background > 0.0, "field.background must be positive");
    require(c.contrast > 0.0 && c.channel.contrast >= 1.0, "field.contrast must be positive (>= 1 for channelized)");
    require(c.channel.corr_x > 0.0 && c.channel.corr_y > 0.0, "correlation lengths must be positive");
    require(c.channel.sharpness > 0.0, "field.sharpness must be positive");
    if (c.source == FieldSource::File)
        require(!c.field_path.empty() && fs::exists(c.field_path), "field file '" + c.field_path + "' does not exist");
    require(c.level >= 1, "solver.level must be >= 1");
    for (int l : c.levels)
        require(l >= 1, "solver.levels entries must be >= 1");
    require(c.mobility.mu_w > 0.0 && c.mobility.mu_o > 0.0, "viscosities must be positive");
    require(c.mobility.exponent > 0.0, "relative permeability exponent must be positive");
    require(c.schedule.substeps >= 1, "two_phase.substeps must be >= 1");
    require(c.schedule.max_steps >= 0, "two_phase.max_steps must be >= 0");
    require(c.schedule.cfl > 0.0 && c.schedule.cfl <= 1.0, "two_phase.cfl must lie in (0, 1]");
    require(c.schedule.final_time > 0.0, "two_phase.final_time must be positive");
    require(c.schedule.max_dt > 0.0, "two_phase.max_dt must be positive");
    require(c.pvi >= 0.0, "two_phase.pvi must be >= 0");
    for (double f : c.snapshots)
        require(f > 0.0 && f <= 1.0, "two_phase.snapshots must lie in (0, 1]");
    require(!c.out_dir.empty(), "output.dir must not be empty");
}

std::string canonical_text(const ExperimentConfig& c)
{
    std::map<std::string, std::string> kv;
    kv["grid.nx"] = std::to_string(c.nx);
    kv["grid.ny"] = std::to_string(c.ny);
    kv["grid.refine"] = std::to_string(c.refine);
    kv["grid.width"] = format_number(c.width);
    kv["grid.height"] = format_number(c.height);
    kv["field.source"] = source_name(c.source);
    kv["field.background"] = format_number(c.background);
    switch (c.source) {
    case FieldSource::Deterministic:
        kv["field.contrast"] = format_number(c.contrast);
        break;
    case FieldSource::Channelized:
        kv["field.contrast"] = format_number(c.channel.contrast);
        kv["field.corr_x"] = format_number(c.channel.corr_x);
        kv["field.corr_y"] = format_number(c.channel.corr_y);
        kv["field.threshold"] = format_number(c.channel.threshold);
        kv["field.sharpness"] = format_number(c.channel.sharpness);
        break;
    case FieldSource::File:
        kv["field.path"] = c.field_path;
        break;
    case FieldSource::Homogeneous:
        break;
    }
    kv["solver.method"] = method_name(c.method);
    kv["solver.level"] = std::to_string(c.level);
    kv["solver.levels"] = join(c.levels);
    kv["solver.enrich_neumann"] = c.enrich_neumann ? "true" : "false";
    kv["solver.downscale"] = c.downscale ? "true" : "false";
    kv["bc.left"] = format_number(c.p_left);
    kv["bc.right"] = format_number(c.p_right);
    kv["two_phase.mu_w"] = format_number(c.mobility.mu_w);
    kv["two_phase.mu_o"] = format_number(c.mobility.mu_o);
    kv["two_phase.exponent"] = format_number(c.mobility.exponent);
    kv["two_phase.final_time"] = format_number(c.schedule.final_time);
    kv["two_phase.pvi"] = format_number(c.pvi);
    kv["two_phase.substeps"] = std::to_string(c.schedule.substeps);
    kv["two_phase.max_steps"] = std::to_string(c.schedule.max_steps);
    kv["two_phase.cfl"] = format_number(c.schedule.cfl);
    kv["two_phase.max_dt"] = format_number(c.schedule.max_dt);
    kv["two_phase.snapshots"] = join(c.snapshots);
    kv["run.seed"] = std::to_string(c.seed);
    // the output directory does not change results and stays out of the hash
    std::string out;
    for (const auto& [k, v] : kv)
        out += k + " = " + v + "\n";
    return out;
}

std::uint64_t config_hash(const ExperimentConfig& c) { return fnv1a(canonical_text(c)); }

GridHierarchy make_grid(const ExperimentConfig& c) { return build_nested_grids(c.nx, c.ny, c.refine, c.width, c.height); }

BoundaryConditions make_bc(const ExperimentConfig& c) { return BoundaryConditions::left_to_right(c.p_left, c.p_right); }

CoefficientField make_coefficient(const ExperimentConfig& c, const Grid2D& fine)
{
    switch (c.source) {
    case FieldSource::Homogeneous:
        return gen_inclusions(fine, c.background, {});
    case FieldSource::Deterministic: {
        const auto features = deterministic_features(c.background * c.contrast);
        return gen_inclusions(fine, c.background, features);
    }
    case FieldSource::Channelized: {
        ChannelizedParams p = c.channel;
        p.seed = c.seed;
        p.k_min = c.background;
        return gen_channelized(fine, p);
    }
    case FieldSource::File:
        return load_field(c.field_path, fine);
    }
    throw ConfigError("unknown field source");
}

MultiscaleModel::MultiscaleModel(const GridHierarchy& grid, std::vector<double> k, BoundaryConditions bc,
                                 int max_level, bool enrich_neumann)
    : grid_(grid), k_(std::move(k)), bc_(std::move(bc)), max_level_(max_level), enrich_neumann_(enrich_neumann)
{
    if (max_level_ < 1)
        throw std::invalid_argument("enrichment level must be >= 1");
    chi_ = harmonic_basis(grid_, k_);
    classes_ = classify_vertices(grid_.coarse, bc_.layout());
    if (max_level_ > 1) {
        std::vector<int> vertices = classes_.interior;
        if (enrich_neumann_)
            vertices.insert(vertices.end(), classes_.neumann.begin(), classes_.neumann.end());
        std::sort(vertices.begin(), vertices.end());
        const auto kt = energy_weight(chi_, k_, classes_);
        spectra_ = compute_spectra(grid_, k_, kt, vertices, max_level_);
    }
}

CoarseSpace MultiscaleModel::space(int level) const
{
    if (level < 1 || level > max_level_)
        throw std::invalid_argument("level " + std::to_string(level) + " outside [1, " + std::to_string(max_level_) +
                                    "]");
    const auto levels = enrichment_levels(classes_, level, enrich_neumann_);
    const auto set = build_enriched(chi_, spectra_, levels);
    return build_coarse_space(set, classes_, level, enrich_neumann_);
}

ReferenceSolution solve_reference(const GridHierarchy& grid, std::span<const double> k, const BoundaryConditions& bc)
{
    ReferenceSolution out;
    out.pressure = solve_fine(grid.fine, k, {}, bc);
    out.flux = postprocess_fine(grid.fine, out.pressure, k, {}, bc);
    out.audit = conservation_audit(out.flux.field, grid.fine, {});
    return out;
}

MultiscaleSolution solve_multiscale(const MultiscaleModel& model, int level, bool with_downscale)
{
    const auto& g = model.grid();
    MultiscaleSolution out;
    out.level = level;
    const CoarseSpace space = model.space(level);
    out.dofs = space.num_dofs();
    const CoarseSolution sol = assemble_and_solve_coarse(space, model.k(), {}, model.bc());
    out.coefficients = sol.coefficients;
    out.pressure = project_to_fine(space, sol.coefficients);
    out.coarse = postprocess_coarse(model.chi(), out.pressure, model.k(), {}, model.bc());
    out.coarse_audit = conservation_audit(out.coarse.field, g.fine, {});
    if (with_downscale) {
        out.fine = downscale(g, out.coarse, model.k(), {}, model.bc());
        out.fine_audit = conservation_audit(out.fine->field, g.fine, {});
    }
    return out;
}

std::vector<std::array<double, 2>> vertex_velocity(const FluxField& flux)
{
    const Grid2D& g = flux.grid;
    std::vector<std::array<double, 2>> v(g.num_nodes());
    for (int z = 0; z < g.num_nodes(); ++z) {
        std::array<double, 4> per_length{};  // outflow per unit length, by Face
        for (const auto& face : control_volume_edges(g, z)) {
            double out = 0.0;
            for (const auto& p : face.pieces)
                out += p.sign * flux.flux[p.edge];
            per_length[static_cast<int>(face.face)] = out / face.length;
        }
        v[z] = {0.5 * (per_length[1] - per_length[0]), 0.5 * (per_length[3] - per_length[2])};
    }
    return v;
}

VtkArray velocity_array(const FluxField& flux, const std::string& name)
{
    VtkArray a{name, {}, 3};
    for (const auto& v : vertex_velocity(flux)) {
        a.values.push_back(v[0]);
        a.values.push_back(v[1]);
        a.values.push_back(0.0);
    }
    return a;
}

void write_vtk(std::ostream& os, const Grid2D& g, const VtkData& data)
{
    auto section = [&](const std::vector<VtkArray>& arrays, std::size_t count, const char* tag) {
        if (arrays.empty())
            return;
        os << tag << ' ' << count << '\n';
        for (const auto& a : arrays) {
            if (a.values.size() != count * static_cast<std::size_t>(a.components))
                throw std::invalid_argument("VTK array '" + a.name + "' has the wrong length");
            if (a.components == 1)
                os << "SCALARS " << a.name << " double 1\nLOOKUP_TABLE default\n";
            else if (a.components == 3)
                os << "VECTORS " << a.name << " double\n";
            else
                throw std::invalid_argument("VTK arrays have 1 or 3 components");
            for (std::size_t i = 0; i < count; ++i) {
                for (int c = 0; c < a.components; ++c)
                    os << (c ? " " : "") << format_number(a.values[i * a.components + c]);
                os << '\n';
            }
        }
    };
    os << "# vtk DataFile Version 3.0\n"
       << data.title << '\n'
       << "ASCII\nDATASET STRUCTURED_POINTS\n"
       << "DIMENSIONS " << g.nx + 1 << ' ' << g.ny + 1 << " 1\n"
       << "ORIGIN " << format_number(g.x0) << ' ' << format_number(g.y0) << " 0\n"
       << "SPACING " << format_number(g.dx) << ' ' << format_number(g.dy) << " 1\n";
    section(data.cell, static_cast<std::size_t>(g.num_cells()), "CELL_DATA");
    section(data.point, static_cast<std::size_t>(g.num_nodes()), "POINT_DATA");
}

void write_vtk(const std::string& path, const Grid2D& grid, const VtkData& data)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error("cannot write '" + path + "'");
    write_vtk(out, grid, data);
    if (!out)
        throw std::runtime_error("write to '" + path + "' failed");
}

Manifest::Manifest(const ExperimentConfig& cfg, const std::string& command) : start_(std::chrono::steady_clock::now())
{
    set("command", command);
    set("config_hash", hex(config_hash(cfg)));
    set("seed", static_cast<long long>(cfg.seed));
    set("method", method_name(cfg.method));
    set("field_source", source_name(cfg.source));
    set("coarse_cells", std::to_string(cfg.nx) + "x" + std::to_string(cfg.ny));
    set("refine", cfg.refine);
}

void Manifest::set(const std::string& key, const std::string& value)
{
    for (auto& [k, v] : entries_)
        if (k == key) {
            v = value;
            return;
        }
    entries_.emplace_back(key, value);
}

void Manifest::set(const std::string& key, double value) { set(key, format_number(value)); }

void Manifest::set(const std::string& key, long long value) { set(key, std::to_string(value)); }

void Manifest::write(const std::string& path)
{
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    std::ofstream out(path);
    if (!out)
        throw std::runtime_error("cannot write '" + path + "'");
    for (const auto& [k, v] : entries_)
        out << k << " = " << v << '\n';
    out << "wall_time_s = " << std::fixed << std::setprecision(3) << wall << '\n';
}

double two_phase_final_time(const ExperimentConfig& c, const GridHierarchy& grid, std::span<const double> k)
{
    if (c.pvi <= 0.0)
        return c.schedule.final_time;
    // inflow rate of the initial state, on the reference pipeline
    const double lambda0 = c.mobility.mobility(0.0);
    std::vector<double> coeff(k.begin(), k.end());
    for (double& v : coeff)
        v *= lambda0;
    const auto ref = solve_reference(grid, coeff, make_bc(c));
    return time_for_pvi(ref.flux.field, c.pvi);
}

TwoPhaseConfig two_phase_config(const ExperimentConfig& c, const GridHierarchy& grid, std::vector<double> k,
                                Pipeline pipeline, int level)
{
    TwoPhaseConfig t;
    t.grid = grid;
    t.schedule = c.schedule;
    t.schedule.final_time = two_phase_final_time(c, grid, k);
    t.k = std::move(k);
    t.bc = make_bc(c);
    t.mobility = c.mobility;
    t.pipeline = pipeline;
    t.level = level;
    t.downscale = c.downscale;
    t.enrich_neumann = c.enrich_neumann;
    t.snapshot_fractions = c.snapshots;
    return t;
}

namespace {

struct RunContext {
    const ExperimentConfig& cfg;
    std::ostream& log;
    GridHierarchy grid;
    BoundaryConditions bc;
    CoefficientField field;
    Manifest manifest;
    fs::path out;

    RunContext(const ExperimentConfig& c, const std::string& command, std::ostream& l)
        : cfg(c), log(l), manifest(c, command), out(c.out_dir)
    {
    }

    std::string path(const std::string& name) const { return (out / name).string(); }

    template <class F>
    auto stage(const std::string& name, F&& f) -> decltype(f())
    {
        log << "[" << name << "]\n";
        try {
            return f();
        } catch (const CompatibilityError& e) {
            throw StageError(name, e.what(), e.residual());
        } catch (const SolverError& e) {
            throw StageError(name, e.what(), e.residual());
        } catch (const StageError&) {
            throw;
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError(name, e.what());
        }
    }

    void record_audit(const std::string& prefix, const AuditReport& a)
    {
        manifest.set(prefix + "_max_residual", a.max_residual);
        manifest.set(prefix + "_scale", a.scale);
        manifest.set(prefix + "_relative", a.relative());
    }

    void require_even_refine(const std::string& what) const
    {
        if (grid.refine % 2 != 0)
            throw StageError(what, "downscaling needs an even refinement factor, got " + std::to_string(grid.refine));
    }

    VtkData base_vtk() const
    {
        VtkData d;
        d.cell.push_back({"permeability", field.values, 1});
        return d;
    }
};

void write_text(const std::string& path, const std::function<void(std::ostream&)>& f)
{
    std::ofstream out(path);
    if (!out)
        throw std::runtime_error("cannot write '" + path + "'");
    out << std::setprecision(17);
    f(out);
}

int level_of(const ExperimentConfig& cfg) { return cfg.method == Method::GMsFEM ? cfg.level : 1; }

void cmd_gen_perm(RunContext& ctx)
{
    const Grid2D& f = ctx.grid.fine;
    ctx.stage("write", [&] {
        write_cell_values(ctx.path("permeability.txt"), f.ny, f.nx, ctx.field.values);
        write_vtk(ctx.path("permeability.vtk"), f, ctx.base_vtk());
    });
}

void cmd_pressure(RunContext& ctx)
{
    const Grid2D& f = ctx.grid.fine;
    Vector p;
    if (ctx.cfg.method == Method::Reference) {
        p = ctx.stage("fine solve", [&] { return solve_fine(f, ctx.field.values, {}, ctx.bc); });
    } else {
        const int level = level_of(ctx.cfg);
        const MultiscaleModel model =
            ctx.stage("basis", [&] { return MultiscaleModel(ctx.grid, ctx.field.values, ctx.bc, level, ctx.cfg.enrich_neumann); });
        const CoarseSpace space = ctx.stage("coarse space", [&] { return model.space(level); });
        const CoarseSolution sol =
            ctx.stage("coarse solve", [&] { return assemble_and_solve_coarse(space, ctx.field.values, {}, ctx.bc); });
        p = project_to_fine(space, sol.coefficients);
        ctx.manifest.set("coarse_dofs", space.num_dofs());
        ctx.manifest.set("expected_dofs", coarse_dof_count(model.classes(), level, ctx.cfg.enrich_neumann));
        ctx.manifest.set("coarse_residual", sol.residual);
        write_text(ctx.path("coarse_solution.txt"), [&](std::ostream& os) { write_coarse_solution(os, space, sol.coefficients); });
    }
    ctx.manifest.set("fine_nodes", f.num_nodes());
    write_cell_values(ctx.path("pressure.txt"), f.ny + 1, f.nx + 1, std::vector<double>(p.data(), p.data() + p.size()));
    VtkData d = ctx.base_vtk();
    d.point.push_back({"pressure", std::vector<double>(p.data(), p.data() + p.size()), 1});
    write_vtk(ctx.path("pressure.vtk"), f, d);
}

void write_flux_outputs(RunContext& ctx, const FluxField& flux, const AuditReport& audit, const std::string& stem)
{
    write_text(ctx.path(stem + ".csv"), [&](std::ostream& os) { write_flux_csv(os, flux); });
    write_text(ctx.path(stem + "_audit.txt"), [&](std::ostream& os) { write_audit(os, audit); });
    VtkData d = ctx.base_vtk();
    if (flux.level == FluxLevel::FineDual) {
        d.point.push_back(velocity_array(flux));
        write_vtk(ctx.path(stem + ".vtk"), ctx.grid.fine, d);
    } else {
        VtkData c;
        c.point.push_back(velocity_array(flux));
        write_vtk(ctx.path(stem + ".vtk"), ctx.grid.coarse, c);
    }
}

void record_postprocess(RunContext& ctx, const PostprocessResult& r)
{
    ctx.manifest.set("max_lemma1", r.max_lemma1);
    ctx.manifest.set("max_compatibility", r.max_compatibility);
    ctx.manifest.set("max_balance", r.max_balance);
}

void cmd_flux(RunContext& ctx)
{
    if (ctx.cfg.method == Method::Reference) {
        const auto ref = ctx.stage("reference", [&] { return solve_reference(ctx.grid, ctx.field.values, ctx.bc); });
        record_postprocess(ctx, ref.flux);
        ctx.record_audit("audit", ref.audit);
        write_flux_outputs(ctx, ref.flux.field, ref.audit, "flux");
        return;
    }
    const int level = level_of(ctx.cfg);
    const MultiscaleModel model =
        ctx.stage("basis", [&] { return MultiscaleModel(ctx.grid, ctx.field.values, ctx.bc, level, ctx.cfg.enrich_neumann); });
    const auto sol = ctx.stage("multiscale", [&] { return solve_multiscale(model, level, false); });
    ctx.manifest.set("coarse_dofs", sol.dofs);
    record_postprocess(ctx, sol.coarse);
    ctx.record_audit("audit", sol.coarse_audit);
    write_flux_outputs(ctx, sol.coarse.field, sol.coarse_audit, "flux");
}

void cmd_downscale(RunContext& ctx)
{
    ctx.require_even_refine("downscale");
    const int level = level_of(ctx.cfg);
    const MultiscaleModel model =
        ctx.stage("basis", [&] { return MultiscaleModel(ctx.grid, ctx.field.values, ctx.bc, level, ctx.cfg.enrich_neumann); });
    const auto sol = ctx.stage("multiscale", [&] { return solve_multiscale(model, level, true); });
    const auto ref = ctx.stage("reference", [&] { return solve_reference(ctx.grid, ctx.field.values, ctx.bc); });
    ctx.manifest.set("coarse_dofs", sol.dofs);
    ctx.record_audit("coarse_audit", sol.coarse_audit);
    ctx.record_audit("fine_audit", *sol.fine_audit);
    ctx.manifest.set("max_trace_compatibility", sol.fine->max_trace_compatibility);
    ctx.manifest.set("velocity_error", velocity_error(sol.fine->field, ref.flux.field));
    write_flux_outputs(ctx, sol.fine->field, *sol.fine_audit, "flux_fine");
}

void cmd_single_phase_compare(RunContext& ctx)
{
    ctx.require_even_refine("single-phase-compare");
    const auto ref = ctx.stage("reference", [&] { return solve_reference(ctx.grid, ctx.field.values, ctx.bc); });
    const int top = *std::max_element(ctx.cfg.levels.begin(), ctx.cfg.levels.end());
    const MultiscaleModel model =
        ctx.stage("basis", [&] { return MultiscaleModel(ctx.grid, ctx.field.values, ctx.bc, top, ctx.cfg.enrich_neumann); });
    std::ofstream csv(ctx.path("velocity_errors.csv"));
    csv << "level,dofs,velocity_error,coarse_relative_residual,fine_relative_residual\n";
    for (int level : ctx.cfg.levels) {
        const auto sol = ctx.stage("level " + std::to_string(level), [&] { return solve_multiscale(model, level, true); });
        const double err = velocity_error(sol.fine->field, ref.flux.field);
        csv << level << ',' << sol.dofs << ',' << format_number(err) << ',' << format_number(sol.coarse_audit.relative())
            << ',' << format_number(sol.fine_audit->relative()) << '\n';
        const std::string key = "L" + std::to_string(level);
        ctx.manifest.set(key + "_dofs", sol.dofs);
        ctx.manifest.set(key + "_velocity_error", err);
        ctx.manifest.set(key + "_fine_relative_residual", sol.fine_audit->relative());
        ctx.log << "  L = " << level << ": dofs " << sol.dofs << ", velocity error " << format_number(err) << '\n';
    }
    ctx.record_audit("reference_audit", ref.audit);
}

void cmd_two_phase(RunContext& ctx)
{
    const auto& cfg = ctx.cfg;
    if (cfg.method != Method::Reference && cfg.downscale)
        ctx.require_even_refine("two-phase");
    const auto base = ctx.stage("schedule", [&] {
        return two_phase_config(cfg, ctx.grid, ctx.field.values, Pipeline::Reference, 1);
    });
    ctx.manifest.set("final_time", base.schedule.final_time);
    const TwoPhaseResult ref = ctx.stage("reference run", [&] { return run_two_phase(base); });

    auto record = [&](const std::string& key, const TwoPhaseResult& r) {
        ctx.manifest.set(key + "_steps", r.steps);
        ctx.manifest.set(key + "_pressure_solves", r.pressure_solves);
        ctx.manifest.set(key + "_max_mass_residual", r.max_mass_residual);
        ctx.manifest.set(key + "_s_min", r.s_min);
        ctx.manifest.set(key + "_s_max", r.s_max);
        ctx.manifest.set(key + "_breakthrough_time", r.breakthrough_time);
        ctx.manifest.set(key + "_min_dt", r.min_dt);
        ctx.manifest.set(key + "_end_time", r.end_time);
        ctx.manifest.set(key + "_completed", std::string(r.completed ? "true" : "false"));
        if (!r.completed)
            ctx.log << "  " << key << ": step budget exhausted at t = " << format_number(r.end_time) << '\n';
        VtkData d;
        if (r.level == FluxLevel::FineDual)
            d.cell.push_back({"permeability", ctx.field.values, 1});
        for (std::size_t i = 0; i < r.snapshots.size(); ++i)
            d.point.push_back({"saturation_" + std::to_string(i), r.snapshots[i].s, 1});
        write_vtk(ctx.path("saturation_" + key + ".vtk"), r.transport_grid, d);
    };
    record("reference", ref);

    std::ofstream csv(ctx.path("saturation_errors.csv"));
    csv << "level,dofs,snapshot,time,error\n";
    std::vector<int> levels;
    if (cfg.method == Method::GMsFEM)
        levels = cfg.levels;
    else if (cfg.method == Method::MsFEM)
        levels = {1};
    for (int level : levels) {
        TwoPhaseConfig t = base;
        t.pipeline = Pipeline::Multiscale;
        t.level = level;
        const std::string key = "L" + std::to_string(level);
        const TwoPhaseResult r = ctx.stage("run " + key, [&] { return run_two_phase(t); });
        record(key, r);
        ctx.manifest.set(key + "_dofs", r.coarse_dofs);
        if (!r.completed || !ref.completed)
            continue;
        if (r.level != ref.level) {
            ctx.log << "  " << key << ": coarse transport, no fine error curve\n";
            continue;
        }
        const auto err = saturation_error_curve(r, ref);
        for (std::size_t i = 0; i < err.size(); ++i)
            csv << level << ',' << r.coarse_dofs << ',' << i << ',' << format_number(r.snapshots[i].time) << ','
                << format_number(err[i]) << '\n';
        if (!err.empty()) {
            ctx.manifest.set(key + "_final_error", err.back());
            ctx.log << "  " << key << ": final saturation error " << format_number(err.back()) << '\n';
        }
    }
}

void cmd_audit(RunContext& ctx)
{
    const auto ref = ctx.stage("reference", [&] { return solve_reference(ctx.grid, ctx.field.values, ctx.bc); });
    const FluxField raw = raw_cg_flux(ctx.grid.fine, ref.pressure, ctx.field.values);
    const AuditReport raw_audit = conservation_audit(raw, ctx.grid.fine, {});
    std::ofstream csv(ctx.path("audit.csv"));
    csv << "pipeline,max_residual,mean_residual,scale,relative\n";
    auto row = [&](const std::string& name, const AuditReport& a) {
        csv << name << ',' << format_number(a.max_residual) << ',' << format_number(a.mean_residual) << ','
            << format_number(a.scale) << ',' << format_number(a.relative()) << '\n';
        ctx.record_audit(name, a);
        ctx.log << "  " << name << ": relative residual " << format_number(a.relative()) << '\n';
    };
    row("reference", ref.audit);
    row("raw_cg", raw_audit);
    if (ctx.cfg.method != Method::Reference) {
        const int level = level_of(ctx.cfg);
        const MultiscaleModel model = ctx.stage(
            "basis", [&] { return MultiscaleModel(ctx.grid, ctx.field.values, ctx.bc, level, ctx.cfg.enrich_neumann); });
        const bool fine = ctx.grid.refine % 2 == 0 && ctx.cfg.downscale;
        const auto sol = ctx.stage("multiscale", [&] { return solve_multiscale(model, level, fine); });
        ctx.manifest.set("coarse_dofs", sol.dofs);
        row("multiscale_coarse", sol.coarse_audit);
        if (fine)
            row("multiscale_fine", *sol.fine_audit);
    }
}

}  // namespace

int run(const std::string& subcommand, const ExperimentConfig& cfg, std::ostream& log, std::ostream& err)
{
    try {
        validate(cfg);
        if (std::find(subcommands.begin(), subcommands.end(), subcommand) == subcommands.end())
            throw ConfigError("unknown subcommand '" + subcommand + "'");
        RunContext ctx(cfg, subcommand, log);
        fs::create_directories(ctx.out);
        ctx.grid = make_grid(cfg);
        ctx.bc = make_bc(cfg);
        ctx.field = ctx.stage("field", [&] { return make_coefficient(cfg, ctx.grid.fine); });
        ctx.manifest.set("fine_cells", ctx.grid.fine.num_cells());
        ctx.manifest.set("k_min", ctx.field.min_value);
        ctx.manifest.set("k_max", ctx.field.max_value);

        if (subcommand == "gen-perm")
            cmd_gen_perm(ctx);
        else if (subcommand == "pressure")
            cmd_pressure(ctx);
        else if (subcommand == "flux")
            cmd_flux(ctx);
        else if (subcommand == "downscale")
            cmd_downscale(ctx);
        else if (subcommand == "single-phase-compare")
            cmd_single_phase_compare(ctx);
        else if (subcommand == "two-phase")
            cmd_two_phase(ctx);
        else
            cmd_audit(ctx);

        ctx.manifest.set("status", "ok");
        ctx.manifest.write(ctx.path("manifest.txt"));
        log << "wrote " << ctx.path("manifest.txt") << '\n';
        return 0;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return 1;
    } catch (const StageError& e) {
        err << "stage '" << e.stage() << "' failed: " << e.what();
        if (e.residual() != 0.0)
            err << " (residual " << format_number(e.residual()) << ")";
        err << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }
}

}  // namespace gmsflow
