#ifndef GMSFLOW_MESH_HPP
#define GMSFLOW_MESH_HPP

#include <array>
#include <iosfwd>
#include <vector>

namespace gmsflow {

enum class Side : int { Left = 0, Right = 1, Bottom = 2, Top = 3 };

inline constexpr std::array<Side, 4> all_sides{Side::Left, Side::Right, Side::Bottom, Side::Top};

enum class BoundaryKind : int { Dirichlet = 0, Neumann = 1 };

struct Point {
    double x = 0.0;
    double y = 0.0;
};

/// Rectangular block of cells of a grid: cells [i0, i0 + ni) x [j0, j0 + nj).
struct CellBlock {
    int i0 = 0;
    int j0 = 0;
    int ni = 0;
    int nj = 0;

    int num_cells() const { return ni * nj; }
    int num_nodes() const { return (ni + 1) * (nj + 1); }
    int local_node(int li, int lj) const { return lj * (ni + 1) + li; }
    /// Number of boundary segments along a side of the block.
    int side_length(Side s) const { return (s == Side::Left || s == Side::Right) ? nj : ni; }
};

/// Uniform grid of nx x ny rectangular cells.
///
/// Cells and nodes are numbered row by row starting at the bottom-left corner.
/// Local vertex order inside a cell is counter-clockwise: 0 = SW, 1 = SE, 2 = NE, 3 = NW.
///
/// Dual edges: every cell carries four interior half-edges (the halves of its two
/// midlines). Edge k of cell c has index 4c + k and separates quadrant k from
/// quadrant k + 1 (mod 4); its stored flux is positive when flowing from quadrant k
/// into quadrant k + 1. Boundary half-edges follow, side by side in the order
/// Left, Right, Bottom, Top; each boundary cell edge contributes two halves, the
/// first one adjacent to the node with the smaller coordinate. Boundary fluxes are
/// stored as outflow.
struct Grid2D {
    int nx = 0;
    int ny = 0;
    double x0 = 0.0;
    double y0 = 0.0;
    double dx = 0.0;
    double dy = 0.0;

    int num_cells() const { return nx * ny; }
    int num_nodes() const { return (nx + 1) * (ny + 1); }
    int cell(int i, int j) const { return j * nx + i; }
    int node(int i, int j) const { return j * (nx + 1) + i; }
    double node_x(int i) const { return x0 + i * dx; }
    double node_y(int j) const { return y0 + j * dy; }
    Point node_point(int n) const { return {node_x(n % (nx + 1)), node_y(n / (nx + 1))}; }
    double width() const { return nx * dx; }
    double height() const { return ny * dy; }
    CellBlock all_cells() const { return {0, 0, nx, ny}; }

    std::array<int, 4> cell_nodes(int c) const;
    int side_length(Side s) const { return (s == Side::Left || s == Side::Right) ? ny : nx; }

    int num_interior_dual_edges() const { return 4 * num_cells(); }
    int num_boundary_dual_edges() const { return 4 * (nx + ny); }
    int num_dual_edges() const { return num_interior_dual_edges() + num_boundary_dual_edges(); }
    /// Index of half `half` (0 or 1) of boundary segment `seg` on side `s`.
    int boundary_dual_edge(Side s, int seg, int half) const;
};

/// Quadrant index k -> the interior half-edge leaving it counter-clockwise is k,
/// the one entering it is (k + 3) % 4.
inline constexpr int next_quadrant(int k) { return (k + 1) % 4; }
inline constexpr int prev_quadrant(int k) { return (k + 3) % 4; }

struct DualEdgeGeometry {
    Point a;
    Point b;
    Point normal;  // unit normal in the direction of positive stored flux
    double length = 0.0;
};

DualEdgeGeometry dual_edge_geometry(const Grid2D& grid, int edge);

struct OrientedEdge {
    int edge = -1;
    int sign = 1;  // +1: stored flux counts as outflow of the control volume
};

enum class Face : int { West = 0, East = 1, South = 2, North = 3 };

struct ControlVolumeFace {
    Face face = Face::West;
    bool on_boundary = false;
    double length = 0.0;
    std::vector<OrientedEdge> pieces;
};

/// Faces of the dual control volume C_z around node z of `grid`, each split into
/// the per-cell half-edges that compose it.
std::vector<ControlVolumeFace> control_volume_edges(const Grid2D& grid, int z);

/// Flat list of oriented dual edges on the boundary of C_z (all faces).
std::vector<OrientedEdge> control_volume_boundary(const Grid2D& grid, int z);

/// Area of the (domain-clipped) control volume of node z.
double control_volume_area(const Grid2D& grid, int z);

/// Nested coarse/fine rectangular grids on a rectangle.
struct GridHierarchy {
    Grid2D coarse;
    Grid2D fine;
    int refine = 1;

    /// Coarse mesh parameter.
    double h() const;
    /// Fine cells covering coarse element e.
    CellBlock element_block(int e) const;
    /// Fine cells covering the control volume of coarse vertex z (needs even refinement).
    CellBlock control_volume_block(int z) const;
    /// Fine cells covering the support of coarse vertex z (all elements touching z).
    CellBlock patch_block(int z) const;
    /// Index of the coarse element containing fine cell c.
    int element_of_fine_cell(int c) const;
};

GridHierarchy build_nested_grids(int nx, int ny, int refine, double width = 1.0, double height = 1.0);

enum class VertexClass : int { Interior = 0, Dirichlet = 1, Neumann = 2 };

using BoundaryLayout = std::array<BoundaryKind, 4>;  // indexed by Side

struct VertexClasses {
    std::vector<VertexClass> of_vertex;
    std::vector<int> interior;
    std::vector<int> dirichlet;
    std::vector<int> neumann;
};

/// Classify the nodes of `grid` against a boundary layout. Corner nodes touching a
/// Dirichlet side are Dirichlet.
VertexClasses classify_vertices(const Grid2D& grid, const BoundaryLayout& layout);

/// Sides of the domain on which node n lies.
std::vector<Side> node_sides(const Grid2D& grid, int n);

void write_grid_summary(std::ostream& os, const GridHierarchy& grid, const VertexClasses& classes);

}  // namespace gmsflow

#endif
