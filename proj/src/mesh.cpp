#include "gmsflow/mesh.hpp"

#include <algorithm>
#include <ostream>
#include <stdexcept>
#include <string>

namespace gmsflow {

std::array<int, 4> Grid2D::cell_nodes(int c) const
{
    const int i = c % nx;
    const int j = c / nx;
    return {node(i, j), node(i + 1, j), node(i + 1, j + 1), node(i, j + 1)};
}

int Grid2D::boundary_dual_edge(Side s, int seg, int half) const
{
    int offset = num_interior_dual_edges();
    switch (s) {
    case Side::Top:
        offset += 2 * nx;
        [[fallthrough]];
    case Side::Bottom:
        offset += 2 * ny;
        [[fallthrough]];
    case Side::Right:
        offset += 2 * ny;
        [[fallthrough]];
    case Side::Left:
        break;
    }
    return offset + 2 * seg + half;
}

DualEdgeGeometry dual_edge_geometry(const Grid2D& grid, int edge)
{
    if (edge < 0 || edge >= grid.num_dual_edges())
        throw std::out_of_range("dual edge index " + std::to_string(edge));
    DualEdgeGeometry g;
    if (edge < grid.num_interior_dual_edges()) {
        const int c = edge / 4;
        const int k = edge % 4;
        const double xl = grid.node_x(c % grid.nx);
        const double yl = grid.node_y(c / grid.nx);
        const double xm = xl + 0.5 * grid.dx;
        const double ym = yl + 0.5 * grid.dy;
        switch (k) {
        case 0:
            g = {{xm, yl}, {xm, ym}, {1.0, 0.0}, 0.5 * grid.dy};
            break;
        case 1:
            g = {{xm, ym}, {xl + grid.dx, ym}, {0.0, 1.0}, 0.5 * grid.dx};
            break;
        case 2:
            g = {{xm, ym}, {xm, yl + grid.dy}, {-1.0, 0.0}, 0.5 * grid.dy};
            break;
        default:
            g = {{xl, ym}, {xm, ym}, {0.0, -1.0}, 0.5 * grid.dx};
            break;
        }
        return g;
    }
    int rem = edge - grid.num_interior_dual_edges();
    for (Side s : all_sides) {
        const int n = 2 * grid.side_length(s);
        if (rem >= n) {
            rem -= n;
            continue;
        }
        const int seg = rem / 2;
        const int half = rem % 2;
        const bool vertical = (s == Side::Left || s == Side::Right);
        const double step = vertical ? grid.dy : grid.dx;
        const double start = (vertical ? grid.node_y(seg) : grid.node_x(seg)) + half * 0.5 * step;
        const double fixed = s == Side::Left ? grid.x0
                             : s == Side::Right ? grid.x0 + grid.width()
                             : s == Side::Bottom ? grid.y0
                                                 : grid.y0 + grid.height();
        if (vertical) {
            g.a = {fixed, start};
            g.b = {fixed, start + 0.5 * step};
            g.normal = {s == Side::Left ? -1.0 : 1.0, 0.0};
        } else {
            g.a = {start, fixed};
            g.b = {start + 0.5 * step, fixed};
            g.normal = {0.0, s == Side::Bottom ? -1.0 : 1.0};
        }
        g.length = 0.5 * step;
        return g;
    }
    throw std::logic_error("unreachable dual edge");
}

namespace {

Face face_of_normal(Point n)
{
    if (n.x < -0.5)
        return Face::West;
    if (n.x > 0.5)
        return Face::East;
    if (n.y < -0.5)
        return Face::South;
    return Face::North;
}

}  // namespace

std::vector<ControlVolumeFace> control_volume_edges(const Grid2D& grid, int z)
{
    if (z < 0 || z >= grid.num_nodes())
        throw std::out_of_range("vertex id " + std::to_string(z) + " outside grid");
    const int i = z % (grid.nx + 1);
    const int j = z / (grid.nx + 1);

    std::array<ControlVolumeFace, 4> faces;
    for (int f = 0; f < 4; ++f)
        faces[f].face = static_cast<Face>(f);

    auto add = [&](int edge, int sign) {
        const auto g = dual_edge_geometry(grid, edge);
        const Face f = face_of_normal({sign * g.normal.x, sign * g.normal.y});
        auto& face = faces[static_cast<int>(f)];
        face.pieces.push_back({edge, sign});
        face.length += g.length;
        if (edge >= grid.num_interior_dual_edges())
            face.on_boundary = true;
    };

    // Cells around the node, with the local vertex index the node has in each.
    const std::array<std::array<int, 3>, 4> around{{{i - 1, j - 1, 2}, {i, j - 1, 3}, {i, j, 0}, {i - 1, j, 1}}};
    for (const auto& [ci, cj, local] : around) {
        if (ci < 0 || cj < 0 || ci >= grid.nx || cj >= grid.ny)
            continue;
        const int c = grid.cell(ci, cj);
        add(4 * c + local, +1);
        add(4 * c + prev_quadrant(local), -1);
    }
    if (i == 0 || i == grid.nx) {
        const Side s = i == 0 ? Side::Left : Side::Right;
        if (j > 0)
            add(grid.boundary_dual_edge(s, j - 1, 1), +1);
        if (j < grid.ny)
            add(grid.boundary_dual_edge(s, j, 0), +1);
    }
    if (j == 0 || j == grid.ny) {
        const Side s = j == 0 ? Side::Bottom : Side::Top;
        if (i > 0)
            add(grid.boundary_dual_edge(s, i - 1, 1), +1);
        if (i < grid.nx)
            add(grid.boundary_dual_edge(s, i, 0), +1);
    }

    std::vector<ControlVolumeFace> out;
    for (auto& f : faces)
        if (!f.pieces.empty())
            out.push_back(std::move(f));
    return out;
}

std::vector<OrientedEdge> control_volume_boundary(const Grid2D& grid, int z)
{
    std::vector<OrientedEdge> out;
    for (const auto& f : control_volume_edges(grid, z))
        out.insert(out.end(), f.pieces.begin(), f.pieces.end());
    return out;
}

double control_volume_area(const Grid2D& grid, int z)
{
    const int i = z % (grid.nx + 1);
    const int j = z / (grid.nx + 1);
    const double wx = (i == 0 || i == grid.nx) ? 0.5 * grid.dx : grid.dx;
    const double wy = (j == 0 || j == grid.ny) ? 0.5 * grid.dy : grid.dy;
    return wx * wy;
}

double GridHierarchy::h() const { return std::max(coarse.dx, coarse.dy); }

CellBlock GridHierarchy::element_block(int e) const
{
    const int i = e % coarse.nx;
    const int j = e / coarse.nx;
    return {i * refine, j * refine, refine, refine};
}

CellBlock GridHierarchy::control_volume_block(int z) const
{
    if (refine % 2 != 0)
        throw std::invalid_argument("control volume blocks need an even refinement factor, got " +
                                    std::to_string(refine));
    const int i = z % (coarse.nx + 1);
    const int j = z / (coarse.nx + 1);
    const int half = refine / 2;
    const int ia = std::max(0, i * refine - half);
    const int ib = std::min(fine.nx, i * refine + half);
    const int ja = std::max(0, j * refine - half);
    const int jb = std::min(fine.ny, j * refine + half);
    return {ia, ja, ib - ia, jb - ja};
}

CellBlock GridHierarchy::patch_block(int z) const
{
    const int i = z % (coarse.nx + 1);
    const int j = z / (coarse.nx + 1);
    const int ia = std::max(0, i - 1) * refine;
    const int ib = std::min(coarse.nx, i + 1) * refine;
    const int ja = std::max(0, j - 1) * refine;
    const int jb = std::min(coarse.ny, j + 1) * refine;
    return {ia, ja, ib - ia, jb - ja};
}

int GridHierarchy::element_of_fine_cell(int c) const
{
    const int i = c % fine.nx;
    const int j = c / fine.nx;
    return coarse.cell(i / refine, j / refine);
}

GridHierarchy build_nested_grids(int nx, int ny, int refine, double width, double height)
{
    if (nx < 1 || ny < 1 || refine < 1)
        throw std::invalid_argument("grid sizes and refinement must be >= 1 (got " + std::to_string(nx) + ", " +
                                    std::to_string(ny) + ", " + std::to_string(refine) + ")");
    if (!(width > 0.0) || !(height > 0.0))
        throw std::invalid_argument("domain extents must be positive");
    GridHierarchy g;
    g.refine = refine;
    g.coarse = {nx, ny, 0.0, 0.0, width / nx, height / ny};
    g.fine = {nx * refine, ny * refine, 0.0, 0.0, width / (nx * refine), height / (ny * refine)};
    return g;
}

std::vector<Side> node_sides(const Grid2D& grid, int n)
{
    const int i = n % (grid.nx + 1);
    const int j = n / (grid.nx + 1);
    std::vector<Side> s;
    if (i == 0)
        s.push_back(Side::Left);
    if (i == grid.nx)
        s.push_back(Side::Right);
    if (j == 0)
        s.push_back(Side::Bottom);
    if (j == grid.ny)
        s.push_back(Side::Top);
    return s;
}

VertexClasses classify_vertices(const Grid2D& grid, const BoundaryLayout& layout)
{
    VertexClasses vc;
    vc.of_vertex.resize(grid.num_nodes());
    for (int n = 0; n < grid.num_nodes(); ++n) {
        const auto sides = node_sides(grid, n);
        VertexClass cls = VertexClass::Interior;
        for (Side s : sides) {
            if (layout[static_cast<int>(s)] == BoundaryKind::Dirichlet) {
                cls = VertexClass::Dirichlet;
                break;
            }
            cls = VertexClass::Neumann;
        }
        vc.of_vertex[n] = cls;
        switch (cls) {
        case VertexClass::Interior:
            vc.interior.push_back(n);
            break;
        case VertexClass::Dirichlet:
            vc.dirichlet.push_back(n);
            break;
        case VertexClass::Neumann:
            vc.neumann.push_back(n);
            break;
        }
    }
    return vc;
}

void write_grid_summary(std::ostream& os, const GridHierarchy& grid, const VertexClasses& classes)
{
    os << "coarse_cells_x = " << grid.coarse.nx << '\n'
       << "coarse_cells_y = " << grid.coarse.ny << '\n'
       << "refine = " << grid.refine << '\n'
       << "fine_cells_x = " << grid.fine.nx << '\n'
       << "fine_cells_y = " << grid.fine.ny << '\n'
       << "coarse_vertices = " << grid.coarse.num_nodes() << '\n'
       << "fine_vertices = " << grid.fine.num_nodes() << '\n'
       << "h = " << grid.h() << '\n'
       << "vertices_interior = " << classes.interior.size() << '\n'
       << "vertices_dirichlet = " << classes.dirichlet.size() << '\n'
       << "vertices_neumann = " << classes.neumann.size() << '\n';
}

}  // namespace gmsflow
