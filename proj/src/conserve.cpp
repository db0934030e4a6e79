#include "gmsflow/conserve.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <string>
#include <tuple>

namespace gmsflow {

namespace {

enum class HalfKind { Internal, Neumann, Dirichlet };

// Sample of -λk∇u·n on one fine piece of an interior half-edge. Two cells (weight 1/2)
// when the half-edge runs along a fine mesh line, one cell otherwise.
struct Piece {
    int cells = 1;
    std::array<int, 2> li{};
    std::array<int, 2> lj{};
    std::array<double, 2> s{};
    std::array<double, 2> t{};
    double length = 0.0;
};

// Normal of interior half-edge k: +x, +y, -x, -y.
constexpr std::array<std::array<double, 2>, 4> edge_normal{{{1.0, 0.0}, {0.0, 1.0}, {-1.0, 0.0}, {0.0, -1.0}}};

// Halves of ∂τ next to vertex ζ, as (side, half).
constexpr std::array<std::array<std::array<int, 2>, 2>, 4> vertex_halves{{
    {{{2, 0}, {0, 0}}},
    {{{2, 1}, {1, 0}}},
    {{{1, 1}, {3, 1}}},
    {{{3, 0}, {0, 1}}},
}};

std::array<std::vector<Piece>, 4> make_pieces(int r, double dx, double dy)
{
    std::array<std::vector<Piece>, 4> out;
    if (r % 2 == 0) {
        const int m = r / 2;
        for (int lj = 0; lj < r; ++lj) {
            Piece p{2, {m - 1, m}, {lj, lj}, {1.0, 0.0}, {0.5, 0.5}, dy};
            out[lj < m ? 0 : 2].push_back(p);
        }
        for (int li = 0; li < r; ++li) {
            Piece p{2, {li, li}, {m - 1, m}, {0.5, 0.5}, {1.0, 0.0}, dx};
            out[li < m ? 3 : 1].push_back(p);
        }
    } else {
        const int m = (r - 1) / 2;
        for (int lj = 0; lj < r; ++lj) {
            if (lj < m)
                out[0].push_back({1, {m, 0}, {lj, 0}, {0.5, 0}, {0.5, 0}, dy});
            else if (lj > m)
                out[2].push_back({1, {m, 0}, {lj, 0}, {0.5, 0}, {0.5, 0}, dy});
            else {
                out[0].push_back({1, {m, 0}, {lj, 0}, {0.5, 0}, {0.25, 0}, 0.5 * dy});
                out[2].push_back({1, {m, 0}, {lj, 0}, {0.5, 0}, {0.75, 0}, 0.5 * dy});
            }
        }
        for (int li = 0; li < r; ++li) {
            if (li < m)
                out[3].push_back({1, {li, 0}, {m, 0}, {0.5, 0}, {0.5, 0}, dx});
            else if (li > m)
                out[1].push_back({1, {li, 0}, {m, 0}, {0.5, 0}, {0.5, 0}, dx});
            else {
                out[3].push_back({1, {li, 0}, {m, 0}, {0.25, 0}, {0.5, 0}, 0.5 * dx});
                out[1].push_back({1, {li, 0}, {m, 0}, {0.75, 0}, {0.5, 0}, 0.5 * dx});
            }
        }
    }
    return out;
}

struct ElementInput {
    int r = 1;
    double dx = 0.0;
    double dy = 0.0;
    std::array<std::span<const double>, 4> chi;
    std::vector<double> p;       // element nodes
    std::vector<double> coeff;   // element cells
    std::vector<double> source;  // element cells, empty for q = 0
    std::array<HalfKind, 4> side_kind{};
    std::array<std::span<const BoundarySegment>, 4> segments;  // r per side when not internal
};

double overlap(double a0, double a1, double b0, double b1)
{
    return std::max(0.0, std::min(a1, b1) - std::max(a0, b0));
}

std::array<double, 4> corner_values(std::span<const double> v, int r, int li, int lj)
{
    const int n = lj * (r + 1) + li;
    return {v[n], v[n + 1], v[n + r + 2], v[n + r + 1]};
}

int side_node(int r, int side, int m)
{
    switch (side) {
    case 0:
        return m * (r + 1);
    case 1:
        return m * (r + 1) + r;
    case 2:
        return m;
    default:
        return r * (r + 1) + m;
    }
}

ElementFluxSystem solve_element(const ElementInput& in, const std::array<std::vector<Piece>, 4>& pieces, int pin)
{
    const int r = in.r;
    const double area = in.dx * in.dy;
    const Eigen::Matrix4d k1 = local_stiffness(in.dx, in.dy, 1.0);
    ElementFluxSystem sys;

    double total_source = 0.0;
    for (int lj = 0; lj < r; ++lj)
        for (int li = 0; li < r; ++li) {
            const int c = lj * r + li;
            Eigen::Vector4d pc;
            const auto pv = corner_values(in.p, r, li, lj);
            const double mean = 0.25 * (pv[0] + pv[1] + pv[2] + pv[3]);
            for (int a = 0; a < 4; ++a)
                pc[a] = pv[a] - mean;
            const Eigen::Vector4d kp = in.coeff[c] * (k1 * pc);
            const double q = in.source.empty() ? 0.0 : in.source[c];
            for (int z = 0; z < 4; ++z) {
                const auto x = corner_values(in.chi[z], r, li, lj);
                sys.Q[z] += x[0] * kp[0] + x[1] * kp[1] + x[2] * kp[2] + x[3] * kp[3];
                if (q != 0.0)
                    sys.F[z] += q * 0.25 * area * (x[0] + x[1] + x[2] + x[3]);
            }
            if (q != 0.0) {
                total_source += q * area;
                const double h = 0.5 * r;
                for (int z = 0; z < 4; ++z) {
                    const double x0 = (z == 0 || z == 3) ? 0.0 : h;
                    const double y0 = z < 2 ? 0.0 : h;
                    sys.quadrant_source[z] +=
                        q * area * overlap(li, li + 1, x0, x0 + h) * overlap(lj, lj + 1, y0, y0 + h);
                }
            }
        }

    // Neumann data: χ-weighted integrals and half integrals
    std::array<double, 8> half_flux{};
    for (int s = 0; s < 4; ++s) {
        if (in.side_kind[s] != HalfKind::Neumann)
            continue;
        for (int m = 0; m < r; ++m) {
            const auto& seg = in.segments[s][m];
            const int a = side_node(r, s, m);
            const int b = side_node(r, s, m + 1);
            for (int z = 0; z < 4; ++z)
                sys.G[z] += seg.weighted[0] * in.chi[z][a] + seg.weighted[1] * in.chi[z][b];
            for (int h = 0; h < 2; ++h)
                half_flux[2 * s + (2 * m + h < r ? 0 : 1)] += seg.half[h];
        }
    }

    double fq = 0.0;
    for (int z = 0; z < 4; ++z) {
        sys.target[z] = sys.F[z] - sys.Q[z] - sys.G[z];
        fq += sys.F[z] - sys.Q[z];
        std::vector<int> dirichlet, internal;
        for (const auto& [side, half] : vertex_halves[z]) {
            const int idx = 2 * side + half;
            switch (in.side_kind[side]) {
            case HalfKind::Neumann:
                sys.N[z] += half_flux[idx];
                sys.boundary_half[idx] = half_flux[idx];
                break;
            case HalfKind::Dirichlet:
                dirichlet.push_back(idx);
                break;
            case HalfKind::Internal:
                internal.push_back(idx);
                break;
            }
        }
        // The target goes to the Dirichlet halves when there are any; on a vertex whose
        // halves are all Neumann it is a Galerkin residual and is dropped.
        const auto& receivers = dirichlet.empty() ? internal : dirichlet;
        for (int idx : receivers)
            sys.boundary_half[idx] = sys.target[z] / static_cast<double>(receivers.size());
        const double out = receivers.empty() ? 0.0 : sys.target[z];
        sys.rhs[z] = sys.quadrant_source[z] - out - sys.N[z];
    }

    sys.scale = std::abs(total_source);
    for (int z = 0; z < 4; ++z)
        sys.scale += std::abs(sys.F[z] - sys.Q[z]) + std::abs(sys.G[z]) + std::abs(sys.N[z]);
    sys.lemma1 = std::abs(fq - total_source);
    sys.compatibility = std::abs(sys.rhs.sum());

    // Fluxes of the four element functions across the interior half-edges
    std::array<std::vector<Eigen::Vector4d>, 4> piece_flux;
    for (int k = 0; k < 4; ++k) {
        const auto& n = edge_normal[k];
        for (const Piece& pc : pieces[k]) {
            Eigen::Vector4d f = Eigen::Vector4d::Zero();
            for (int c = 0; c < pc.cells; ++c) {
                const double w = pc.length / pc.cells * in.coeff[pc.lj[c] * r + pc.li[c]];
                for (int z = 0; z < 4; ++z) {
                    const Eigen::Vector2d g =
                        cell_gradient(corner_values(in.chi[z], r, pc.li[c], pc.lj[c]), in.dx, in.dy, pc.s[c], pc.t[c]);
                    f[z] -= w * (g.x() * n[0] + g.y() * n[1]);
                }
            }
            piece_flux[k].push_back(f);
            sys.B.row(k) += f.transpose();
        }
    }

    // Quadrant ζ: outflow across edge ζ minus inflow across edge ζ - 1
    for (int z = 0; z < 4; ++z)
        sys.A.row(z) = sys.B.row(z) - sys.B.row(prev_quadrant(z));
    Eigen::Matrix4d pinned = sys.A;
    pinned(pin, pin) += sys.A.cwiseAbs().maxCoeff();
    sys.alpha = pinned.fullPivLu().solve(sys.rhs);
    const Eigen::Vector4d flux = sys.B * sys.alpha;
    for (int k = 0; k < 4; ++k) {
        sys.flux[k] = flux[k];
        for (const auto& f : piece_flux[k])
            sys.pieces[k].push_back(f.dot(sys.alpha));
    }
    for (int z = 0; z < 4; ++z)
        sys.balance = std::max(sys.balance, std::abs(flux[z] - flux[prev_quadrant(z)] - sys.rhs[z]));
    return sys;
}

const std::array<double, 4> bilinear_q1[4] = {{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 0, 1}, {0, 0, 1, 0}};

ElementBasis q1_basis()
{
    return [](int) {
        return std::array<std::span<const double>, 4>{bilinear_q1[0], bilinear_q1[1], bilinear_q1[2], bilinear_q1[3]};
    };
}

double relative(double value, double scale)
{
    return scale > 0.0 ? value / scale : value;
}

}  // namespace

PostprocessResult postprocess_block(const Grid2D& fine, const CellBlock& block, int refine, const ElementBasis& basis,
                                    const Vector& pressure, std::span<const double> coeff,
                                    std::span<const double> source, const BoundaryData& bc, int pin)
{
    const int r = refine;
    if (r < 1 || block.ni % r != 0 || block.nj % r != 0)
        throw std::invalid_argument("block is not a whole number of r x r elements");
    if (pressure.size() != block.num_nodes())
        throw std::invalid_argument("pressure does not match the block nodes");
    if (static_cast<int>(coeff.size()) != fine.num_cells())
        throw std::invalid_argument("coefficient does not match the fine grid");
    if (!source.empty() && static_cast<int>(source.size()) != fine.num_cells())
        throw std::invalid_argument("source does not match the fine grid");
    if (pin < 0 || pin > 3)
        throw std::invalid_argument("pinned vertex must be in 0..3");

    PostprocessResult res;
    res.block = block;
    res.refine = r;
    const int ex = block.ni / r;
    const int ey = block.nj / r;
    res.field.grid = {ex, ey, fine.x0 + block.i0 * fine.dx, fine.y0 + block.j0 * fine.dy, r * fine.dx, r * fine.dy};
    res.field.level = r == 1 ? FluxLevel::FineDual : FluxLevel::CoarseDual;
    res.field.flux.assign(res.field.grid.num_dual_edges(), 0.0);
    const auto pieces = make_pieces(r, fine.dx, fine.dy);

    ElementInput in;
    in.r = r;
    in.dx = fine.dx;
    in.dy = fine.dy;
    in.p.resize((r + 1) * (r + 1));
    in.coeff.resize(r * r);
    if (!source.empty())
        in.source.resize(r * r);

    for (int ej = 0; ej < ey; ++ej)
        for (int ei = 0; ei < ex; ++ei) {
            const int e = res.field.grid.cell(ei, ej);
            const int bi = ei * r;
            const int bj = ej * r;
            for (int lj = 0; lj <= r; ++lj)
                for (int li = 0; li <= r; ++li)
                    in.p[lj * (r + 1) + li] = pressure[block.local_node(bi + li, bj + lj)];
            for (int lj = 0; lj < r; ++lj)
                for (int li = 0; li < r; ++li) {
                    const int c = fine.cell(block.i0 + bi + li, block.j0 + bj + lj);
                    in.coeff[lj * r + li] = coeff[c];
                    if (!source.empty())
                        in.source[lj * r + li] = source[c];
                }
            const bool on[4] = {ei == 0, ei == ex - 1, ej == 0, ej == ey - 1};
            const int offset[4] = {bj, bj, bi, bi};
            for (int s = 0; s < 4; ++s) {
                in.side_kind[s] = HalfKind::Internal;
                if (!on[s])
                    continue;
                in.segments[s] = std::span<const BoundarySegment>(bc.segments[s]).subspan(offset[s], r);
                const BoundaryKind kind = in.segments[s][0].kind;
                for (const auto& seg : in.segments[s])
                    if (seg.kind != kind)
                        throw std::invalid_argument("mixed boundary kinds along one element side");
                in.side_kind[s] = kind == BoundaryKind::Dirichlet ? HalfKind::Dirichlet : HalfKind::Neumann;
            }
            in.chi = basis(e);

            ElementFluxSystem sys = solve_element(in, pieces, pin);
            sys.element = e;
            for (int k = 0; k < 4; ++k)
                res.field.flux[4 * e + k] = sys.flux[k];
            const int seg[4] = {ej, ej, ei, ei};
            for (Side s : all_sides) {
                const int si = static_cast<int>(s);
                if (!on[si])
                    continue;
                for (int h = 0; h < 2; ++h)
                    res.field.flux[res.field.grid.boundary_dual_edge(s, seg[si], h)] = sys.boundary_half[2 * si + h];
            }
            res.max_lemma1 = std::max(res.max_lemma1, relative(sys.lemma1, sys.scale));
            res.max_balance = std::max(res.max_balance, relative(sys.balance, sys.scale));
            res.elements.push_back(std::move(sys));
        }

    // Dropped Galerkin residuals vanish only to the accuracy of the pressure solve, which
    // is set by the data of the whole block, so the guard uses the block scale.
    double scale = 0.0;
    for (const auto& sys : res.elements)
        scale = std::max(scale, sys.scale);
    for (const auto& sys : res.elements) {
        const double rel = relative(sys.compatibility, scale);
        res.max_compatibility = std::max(res.max_compatibility, rel);
        if (sys.compatibility > 1e-8 * scale && sys.compatibility > 0.0)
            throw CompatibilityError("element " + std::to_string(sys.element) +
                                         ": element flux targets are incompatible: |sum| = " +
                                         std::to_string(sys.compatibility) + ", block scale " + std::to_string(scale),
                                     rel);
    }
    return res;
}

PostprocessResult postprocess_coarse(const MultiscaleBasis& chi, const Vector& pressure, std::span<const double> coeff,
                                     std::span<const double> source, const BoundaryConditions& bc, int pin)
{
    const Grid2D& fine = chi.grid.fine;
    const CellBlock all = fine.all_cells();
    ElementBasis basis = [&chi](int e) {
        return std::array<std::span<const double>, 4>{chi.chi(e, 0), chi.chi(e, 1), chi.chi(e, 2), chi.chi(e, 3)};
    };
    return postprocess_block(fine, all, chi.grid.refine, basis, pressure, coeff, source,
                             make_boundary_data(fine, all, bc), pin);
}

PostprocessResult postprocess_fine(const Grid2D& fine, const Vector& pressure, std::span<const double> coeff,
                                   std::span<const double> source, const BoundaryConditions& bc, int pin)
{
    const CellBlock all = fine.all_cells();
    return postprocess_block(fine, all, 1, q1_basis(), pressure, coeff, source, make_boundary_data(fine, all, bc),
                             pin);
}

SegmentTraces coarse_traces(const GridHierarchy& grid, const PostprocessResult& coarse)
{
    const int r = grid.refine;
    if (r % 2 != 0)
        throw std::invalid_argument("coarse traces need an even refinement factor");
    if (coarse.refine != r || coarse.field.grid.nx != grid.coarse.nx || coarse.field.grid.ny != grid.coarse.ny)
        throw std::invalid_argument("postprocess result does not belong to this grid hierarchy");
    const Grid2D& fine = grid.fine;
    SegmentTraces tr;
    tr.nx = fine.nx;
    tr.ny = fine.ny;
    tr.x.assign((fine.nx + 1) * fine.ny, 0.0);
    tr.y.assign(fine.nx * (fine.ny + 1), 0.0);
    tr.has_x.assign(tr.x.size(), 0);
    tr.has_y.assign(tr.y.size(), 0);
    const int m = r / 2;
    for (const auto& sys : coarse.elements) {
        const CellBlock b = grid.element_block(sys.element);
        for (int n = 0; n < m; ++n) {
            const int v0 = tr.vertical(b.i0 + m, b.j0 + n);
            const int v2 = tr.vertical(b.i0 + m, b.j0 + m + n);
            const int h3 = tr.horizontal(b.i0 + n, b.j0 + m);
            const int h1 = tr.horizontal(b.i0 + m + n, b.j0 + m);
            tr.x[v0] = sys.pieces[0][n];
            tr.x[v2] = -sys.pieces[2][n];
            tr.y[h1] = sys.pieces[1][n];
            tr.y[h3] = -sys.pieces[3][n];
            tr.has_x[v0] = tr.has_x[v2] = tr.has_y[h1] = tr.has_y[h3] = 1;
        }
    }
    return tr;
}

DownscaleResult downscale(const GridHierarchy& grid, const PostprocessResult& coarse, std::span<const double> coeff,
                          std::span<const double> source, const BoundaryConditions& bc)
{
    const Grid2D& fine = grid.fine;
    const SegmentTraces tr = coarse_traces(grid, coarse);
    const BoundaryData domain = make_boundary_data(fine, fine.all_cells(), bc);

    DownscaleResult res;
    res.field.grid = fine;
    res.field.level = FluxLevel::FineDual;
    res.field.flux.assign(fine.num_dual_edges(), 0.0);

    for (int z = 0; z < grid.coarse.num_nodes(); ++z) {
        const CellBlock b = grid.control_volume_block(z);
        BoundaryData bd = BoundaryData::zero_flux(b);
        const bool on[4] = {b.i0 == 0, b.i0 + b.ni == fine.nx, b.j0 == 0, b.j0 + b.nj == fine.ny};
        double trace_sum = 0.0;
        double trace_abs = 0.0;
        std::vector<std::tuple<Side, int, double>> traced;
        for (Side s : all_sides) {
            const int si = static_cast<int>(s);
            const bool vertical = s == Side::Left || s == Side::Right;
            const int offset = vertical ? b.j0 : b.i0;
            for (int m = 0; m < b.side_length(s); ++m) {
                if (on[si]) {
                    const auto& seg = domain.segment(s, offset + m);
                    if (seg.kind == BoundaryKind::Dirichlet)
                        bd.set_dirichlet(s, m, domain.dirichlet_value[domain.side_node(s, offset + m)],
                                         domain.dirichlet_value[domain.side_node(s, offset + m + 1)]);
                    else
                        bd.segment(s, m) = seg;
                    continue;
                }
                double outflow = 0.0;
                int idx = 0;
                switch (s) {
                case Side::Left:
                    idx = tr.vertical(b.i0, b.j0 + m);
                    outflow = -tr.x[idx];
                    break;
                case Side::Right:
                    idx = tr.vertical(b.i0 + b.ni, b.j0 + m);
                    outflow = tr.x[idx];
                    break;
                case Side::Bottom:
                    idx = tr.horizontal(b.i0 + m, b.j0);
                    outflow = -tr.y[idx];
                    break;
                case Side::Top:
                    idx = tr.horizontal(b.i0 + m, b.j0 + b.nj);
                    outflow = tr.y[idx];
                    break;
                }
                if (!(vertical ? tr.has_x[idx] : tr.has_y[idx]))
                    throw std::logic_error("missing coarse trace on a control volume boundary");
                bd.set_neumann_constant(s, m, outflow);
                traced.emplace_back(s, m, outflow);
            }
        }
        for (Side s : all_sides)
            for (const auto& seg : bd.segments[static_cast<int>(s)])
                if (seg.kind == BoundaryKind::Neumann) {
                    trace_sum += seg.total();
                    trace_abs += std::abs(seg.total());
                }

        if (!bd.has_dirichlet()) {
            double q = 0.0;
            if (!source.empty())
                for (int lj = 0; lj < b.nj; ++lj)
                    for (int li = 0; li < b.ni; ++li)
                        q += source[block_cell(fine, b, li, lj)] * fine.dx * fine.dy;
            const double gap = trace_sum - q;
            res.max_trace_compatibility =
                std::max(res.max_trace_compatibility, relative(std::abs(gap), trace_abs + std::abs(q)));
            // The traces balance only to round-off. Left alone, the remainder lands on the
            // pinned node and breaks the compatibility of its element.
            double weight = 0.0;
            for (const auto& t : traced)
                weight += std::abs(std::get<2>(t));
            for (const auto& [s, m, outflow] : traced) {
                const double share = weight > 0.0 ? std::abs(outflow) / weight : 1.0 / traced.size();
                bd.set_neumann_constant(s, m, outflow - gap * share);
            }
        }

        LinearSystem sys = assemble(fine, b, coeff, source, bd);
        if (sys.singular)
            sys = pin_one_dof(std::move(sys), 0, 0.0);
        const Vector p = expand_solution(sys, solve_spd(sys));
        const PostprocessResult local = postprocess_block(fine, b, 1, q1_basis(), p, coeff, source, bd);
        res.max_compatibility = std::max(res.max_compatibility, local.max_compatibility);
        res.max_balance = std::max(res.max_balance, local.max_balance);

        for (const auto& cell : local.elements) {
            const int li = cell.element % b.ni;
            const int lj = cell.element / b.ni;
            const int gi = b.i0 + li;
            const int gj = b.j0 + lj;
            const int c = fine.cell(gi, gj);
            for (int k = 0; k < 4; ++k)
                res.field.flux[4 * c + k] = cell.flux[k];
            const bool at[4] = {gi == 0, gi == fine.nx - 1, gj == 0, gj == fine.ny - 1};
            const int seg[4] = {gj, gj, gi, gi};
            for (Side s : all_sides) {
                const int si = static_cast<int>(s);
                if (!at[si])
                    continue;
                for (int h = 0; h < 2; ++h)
                    res.field.flux[fine.boundary_dual_edge(s, seg[si], h)] = cell.boundary_half[2 * si + h];
            }
        }
    }
    return res;
}

double control_volume_source(const Grid2D& grid, int z, const Grid2D& fine, std::span<const double> source)
{
    if (source.empty())
        return 0.0;
    const double ratio_x = grid.dx / fine.dx;
    const double ratio_y = grid.dy / fine.dy;
    const double ox = (grid.x0 - fine.x0) / fine.dx;
    const double oy = (grid.y0 - fine.y0) / fine.dy;
    const int i = z % (grid.nx + 1);
    const int j = z / (grid.nx + 1);
    // control volume in fine cell units, clipped to the grid
    const double x0 = ox + std::max(0.0, i - 0.5) * ratio_x;
    const double x1 = ox + std::min(static_cast<double>(grid.nx), i + 0.5) * ratio_x;
    const double y0 = oy + std::max(0.0, j - 0.5) * ratio_y;
    const double y1 = oy + std::min(static_cast<double>(grid.ny), j + 0.5) * ratio_y;
    const int ci0 = std::max(0, static_cast<int>(std::floor(x0)));
    const int ci1 = std::min(fine.nx, static_cast<int>(std::ceil(x1)));
    const int cj0 = std::max(0, static_cast<int>(std::floor(y0)));
    const int cj1 = std::min(fine.ny, static_cast<int>(std::ceil(y1)));
    double sum = 0.0;
    for (int cj = cj0; cj < cj1; ++cj)
        for (int ci = ci0; ci < ci1; ++ci)
            sum += source[fine.cell(ci, cj)] * overlap(ci, ci + 1, x0, x1) * overlap(cj, cj + 1, y0, y1);
    return sum * fine.dx * fine.dy;
}

AuditReport conservation_audit(const FluxField& flux, const Grid2D& fine, std::span<const double> source)
{
    const Grid2D& g = flux.grid;
    if (static_cast<int>(flux.flux.size()) != g.num_dual_edges())
        throw std::invalid_argument("flux field size does not match its grid");
    AuditReport rep;
    rep.residuals.resize(g.num_nodes());
    double sum = 0.0;
    for (int z = 0; z < g.num_nodes(); ++z) {
        double out = 0.0;
        double mag = 0.0;
        for (const auto& e : control_volume_boundary(g, z)) {
            out += e.sign * flux.flux[e.edge];
            mag += std::abs(flux.flux[e.edge]);
        }
        const double q = control_volume_source(g, z, fine, source);
        const double r = out - q;
        rep.residuals[z] = r;
        rep.scale = std::max(rep.scale, mag + std::abs(q));
        sum += std::abs(r);
        if (std::abs(r) > rep.max_residual || rep.argmax < 0) {
            rep.max_residual = std::abs(r);
            rep.argmax = z;
        }
    }
    rep.mean_residual = sum / g.num_nodes();
    return rep;
}

double velocity_error(const FluxField& flux, const FluxField& ref)
{
    if (flux.level != ref.level || flux.grid.nx != ref.grid.nx || flux.grid.ny != ref.grid.ny ||
        flux.flux.size() != ref.flux.size())
        throw std::invalid_argument("velocity error needs fields on the same dual mesh");
    double num = 0.0;
    double den = 0.0;
    for (int e = 0; e < ref.grid.num_dual_edges(); ++e) {
        const double len = dual_edge_geometry(ref.grid, e).length;
        const double d = flux.flux[e] - ref.flux[e];
        num += d * d / len;
        den += ref.flux[e] * ref.flux[e] / len;
    }
    return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

FluxField raw_cg_flux(const Grid2D& fine, const Vector& pressure, std::span<const double> coeff)
{
    if (pressure.size() != fine.num_nodes() || static_cast<int>(coeff.size()) != fine.num_cells())
        throw std::invalid_argument("pressure or coefficient does not match the grid");
    FluxField f;
    f.grid = fine;
    f.level = FluxLevel::FineDual;
    f.flux.assign(fine.num_dual_edges(), 0.0);
    auto grad = [&](int i, int j, double s, double t) {
        const auto n = fine.cell_nodes(fine.cell(i, j));
        return cell_gradient({pressure[n[0]], pressure[n[1]], pressure[n[2]], pressure[n[3]]}, fine.dx, fine.dy, s, t);
    };
    for (int j = 0; j < fine.ny; ++j)
        for (int i = 0; i < fine.nx; ++i) {
            const int c = fine.cell(i, j);
            const double k = coeff[c];
            f.flux[4 * c + 0] = -k * grad(i, j, 0.5, 0.25).x() * 0.5 * fine.dy;
            f.flux[4 * c + 1] = -k * grad(i, j, 0.75, 0.5).y() * 0.5 * fine.dx;
            f.flux[4 * c + 2] = k * grad(i, j, 0.5, 0.75).x() * 0.5 * fine.dy;
            f.flux[4 * c + 3] = k * grad(i, j, 0.25, 0.5).y() * 0.5 * fine.dx;
        }
    for (int m = 0; m < fine.ny; ++m)
        for (int h = 0; h < 2; ++h) {
            const double t = 0.25 + 0.5 * h;
            f.flux[fine.boundary_dual_edge(Side::Left, m, h)] =
                coeff[fine.cell(0, m)] * grad(0, m, 0.0, t).x() * 0.5 * fine.dy;
            f.flux[fine.boundary_dual_edge(Side::Right, m, h)] =
                -coeff[fine.cell(fine.nx - 1, m)] * grad(fine.nx - 1, m, 1.0, t).x() * 0.5 * fine.dy;
        }
    for (int m = 0; m < fine.nx; ++m)
        for (int h = 0; h < 2; ++h) {
            const double s = 0.25 + 0.5 * h;
            f.flux[fine.boundary_dual_edge(Side::Bottom, m, h)] =
                coeff[fine.cell(m, 0)] * grad(m, 0, s, 0.0).y() * 0.5 * fine.dx;
            f.flux[fine.boundary_dual_edge(Side::Top, m, h)] =
                -coeff[fine.cell(m, fine.ny - 1)] * grad(m, fine.ny - 1, s, 1.0).y() * 0.5 * fine.dx;
        }
    return f;
}

FluxField uniform_flux(const Grid2D& grid, FluxLevel level, double vx, double vy)
{
    FluxField f;
    f.grid = grid;
    f.level = level;
    f.flux.resize(grid.num_dual_edges());
    for (int e = 0; e < grid.num_dual_edges(); ++e) {
        const auto g = dual_edge_geometry(grid, e);
        f.flux[e] = (vx * g.normal.x + vy * g.normal.y) * g.length;
    }
    return f;
}

void write_flux_csv(std::ostream& os, const FluxField& flux)
{
    os << "level,edge,ax,ay,bx,by,flux\n" << std::setprecision(17);
    const char* level = flux.level == FluxLevel::CoarseDual ? "coarse" : "fine";
    for (int e = 0; e < flux.grid.num_dual_edges(); ++e) {
        const auto g = dual_edge_geometry(flux.grid, e);
        os << level << ',' << e << ',' << g.a.x << ',' << g.a.y << ',' << g.b.x << ',' << g.b.y << ','
           << flux.flux[e] << '\n';
    }
}

void write_audit(std::ostream& os, const AuditReport& report)
{
    os << std::setprecision(6) << "max_residual = " << report.max_residual << '\n'
       << "mean_residual = " << report.mean_residual << '\n'
       << "argmax = " << report.argmax << '\n'
       << "scale = " << report.scale << '\n'
       << "relative = " << report.relative() << '\n';
}

}  // namespace gmsflow
