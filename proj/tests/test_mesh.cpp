#include "doctest.h"

#include "gmsflow/mesh.hpp"

#include <cmath>
#include <map>
#include <sstream>

using namespace gmsflow;

TEST_CASE("nested grid counts")
{
    auto g = build_nested_grids(10, 10, 10);
    CHECK(g.fine.nx == 100);
    CHECK(g.fine.ny == 100);
    CHECK(g.fine.num_nodes() == 101 * 101);
    CHECK(g.coarse.num_nodes() == 121);
    CHECK(g.h() == doctest::Approx(0.1));

    auto one = build_nested_grids(1, 1, 1);
    CHECK(one.fine.num_cells() == 1);
    CHECK(one.coarse.num_nodes() == 4);
    CHECK(one.fine.dx == one.coarse.dx);

    auto two = build_nested_grids(2, 2, 2);
    CHECK(two.fine.num_cells() == 16);
    CHECK(two.coarse.num_nodes() == 9);
    CHECK(two.fine.num_nodes() == 25);

    CHECK_THROWS_AS(build_nested_grids(0, 2, 2), std::invalid_argument);
    CHECK_THROWS_AS(build_nested_grids(2, 2, -1), std::invalid_argument);
}

TEST_CASE("vertex classes")
{
    auto g = build_nested_grids(10, 10, 1);
    const BoundaryLayout lr{BoundaryKind::Dirichlet, BoundaryKind::Dirichlet, BoundaryKind::Neumann,
                            BoundaryKind::Neumann};
    auto vc = classify_vertices(g.coarse, lr);
    CHECK(vc.dirichlet.size() == 22);
    CHECK(vc.neumann.size() == 18);
    CHECK(vc.interior.size() == 81);

    BoundaryLayout neu;
    neu.fill(BoundaryKind::Neumann);
    vc = classify_vertices(g.coarse, neu);
    CHECK(vc.dirichlet.empty());
    CHECK(vc.neumann.size() == 40);
    CHECK(vc.interior.size() == 81);

    BoundaryLayout dir;
    dir.fill(BoundaryKind::Dirichlet);
    auto small = build_nested_grids(2, 2, 1);
    vc = classify_vertices(small.coarse, dir);
    CHECK(vc.interior.size() == 1);
    CHECK(vc.dirichlet.size() == 8);

    std::ostringstream os;
    write_grid_summary(os, g, classify_vertices(g.coarse, lr));
    CHECK(os.str().find("vertices_dirichlet = 22") != std::string::npos);
}

TEST_CASE("control volume geometry")
{
    auto g = build_nested_grids(10, 10, 1);
    const Grid2D& c = g.coarse;
    const int z = c.node(4, 6);
    auto faces = control_volume_edges(c, z);
    REQUIRE(faces.size() == 4);
    for (const auto& f : faces) {
        CHECK(f.length == doctest::Approx(0.1));
        CHECK(f.pieces.size() == 2);
        CHECK_FALSE(f.on_boundary);
        for (const auto& p : f.pieces)
            CHECK(dual_edge_geometry(c, p.edge).length == doctest::Approx(0.05));
    }

    auto corner = control_volume_edges(c, c.node(0, 0));
    REQUIRE(corner.size() == 4);
    int boundary = 0;
    for (const auto& f : corner) {
        CHECK(f.length == doctest::Approx(0.05));
        boundary += f.on_boundary;
    }
    CHECK(boundary == 2);
    CHECK(control_volume_area(c, c.node(0, 0)) == doctest::Approx(0.0025));

    CHECK_THROWS_AS(control_volume_edges(c, -1), std::out_of_range);
    CHECK_THROWS_AS(control_volume_edges(c, c.num_nodes()), std::out_of_range);
}

TEST_CASE("dual edge pairing and area partition")
{
    Grid2D g{7, 5, 0.0, 0.0, 1.0 / 7, 1.0 / 5};
    std::map<int, std::vector<int>> seen;
    double area = 0.0;
    for (int z = 0; z < g.num_nodes(); ++z) {
        area += control_volume_area(g, z);
        for (const auto& e : control_volume_boundary(g, z))
            seen[e.edge].push_back(e.sign);
    }
    CHECK(std::abs(area - 1.0) < 1e-12);
    CHECK(static_cast<int>(seen.size()) == g.num_dual_edges());
    for (const auto& [edge, signs] : seen) {
        if (edge < g.num_interior_dual_edges()) {
            REQUIRE(signs.size() == 2);
            CHECK(signs[0] == -signs[1]);
        } else {
            REQUIRE(signs.size() == 1);
            CHECK(signs[0] == 1);
        }
    }
}

TEST_CASE("quadrants split every element evenly")
{
    auto g = build_nested_grids(3, 3, 4);
    for (int e = 0; e < g.coarse.num_cells(); ++e) {
        auto b = g.element_block(e);
        CHECK(b.ni == 4);
        CHECK(b.nj == 4);
        // each quadrant is (r/2)^2 fine cells
        CHECK((b.ni / 2) * (b.nj / 2) * 4 == b.num_cells());
    }
    // one interior dual edge of the coarse grid is half a cell midline
    for (int k = 0; k < 4; ++k) {
        auto geo = dual_edge_geometry(g.coarse, 4 * 4 + k);
        CHECK(geo.length == doctest::Approx(0.5 / 3));
    }
}

TEST_CASE("blocks of the hierarchy")
{
    auto g = build_nested_grids(4, 4, 6);
    const int zi = g.coarse.node(2, 2);
    auto cv = g.control_volume_block(zi);
    CHECK(cv.i0 == 9);
    CHECK(cv.ni == 6);
    auto corner = g.control_volume_block(0);
    CHECK(corner.ni == 3);
    CHECK(corner.nj == 3);
    auto patch = g.patch_block(zi);
    CHECK(patch.i0 == 6);
    CHECK(patch.ni == 12);
    auto edge_patch = g.patch_block(g.coarse.node(0, 2));
    CHECK(edge_patch.ni == 6);
    CHECK(edge_patch.nj == 12);
    CHECK(g.element_of_fine_cell(g.fine.cell(23, 0)) == 3);

    auto odd = build_nested_grids(2, 2, 3);
    CHECK_THROWS_AS(odd.control_volume_block(4), std::invalid_argument);
}
