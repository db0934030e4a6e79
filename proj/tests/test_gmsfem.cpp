#include "doctest.h"

#include "gmsflow/field.hpp"
#include "gmsflow/gmsfem.hpp"

#include <cmath>
#include <sstream>

using namespace gmsflow;

namespace {

const BoundaryLayout left_right_layout{BoundaryKind::Dirichlet, BoundaryKind::Dirichlet, BoundaryKind::Neumann,
                                       BoundaryKind::Neumann};

struct Setup {
    GridHierarchy g;
    std::vector<double> k;
    VertexClasses classes;
    MultiscaleBasis chi;
    EnrichedBasisSet set;
};

Setup make_setup(int n, int r, std::span<const Feature> features, int max_level)
{
    Setup s{build_nested_grids(n, n, r), {}, {}, {}, {}};
    s.k = gen_inclusions(s.g.fine, 1.0, features).values;
    s.classes = classify_vertices(s.g.coarse, left_right_layout);
    s.chi = harmonic_basis(s.g, s.k);
    const auto kt = energy_weight(s.chi, s.k, s.classes);
    const auto spectra = compute_spectra(s.g, s.k, kt, s.classes.interior, max_level);
    s.set = build_enriched(s.chi, spectra, enrichment_levels(s.classes, max_level));
    return s;
}

const Feature blocks[] = {{0.1, 0.2, 0.9, 0.3, 500.0}, {0.2, 0.55, 0.45, 0.8, 0.01}, {0.6, 0.6, 0.7, 0.95, 300.0}};

}  // namespace

TEST_CASE("coarse dof counts")
{
    auto s = make_setup(10, 2, {}, 4);
    CHECK(build_coarse_space(s.set, s.classes, 1).num_dofs() == 121);
    CHECK(build_coarse_space(s.set, s.classes, 2).num_dofs() == 202);
    CHECK(build_coarse_space(s.set, s.classes, 4).num_dofs() == 364);
    CHECK(coarse_dof_count(s.classes, 4) == 364);
    CHECK(coarse_dof_count(s.classes, 2, true) == 121 + 81 + 18);
    CHECK_THROWS_AS(build_coarse_space(s.set, s.classes, 5), std::invalid_argument);
    CHECK_THROWS_AS(build_coarse_space(s.set, s.classes, 0), std::invalid_argument);
}

TEST_CASE("restriction rows")
{
    auto s = make_setup(3, 4, blocks, 3);
    auto space = build_coarse_space(s.set, s.classes, 3);
    const Grid2D& fine = s.g.fine;
    Vector pou = Vector::Zero(fine.num_nodes());
    for (int d = 0; d < space.num_dofs(); ++d) {
        const CellBlock p = s.set.patches[space.dofs[d].vertex];
        const SparseMatrix row = space.R.row(d).transpose();
        for (SparseMatrix::InnerIterator it(row, 0); it; ++it) {
            const int i = static_cast<int>(it.row()) % (fine.nx + 1);
            const int j = static_cast<int>(it.row()) / (fine.nx + 1);
            CHECK(i >= p.i0);
            CHECK(i <= p.i0 + p.ni);
            CHECK(j >= p.j0);
            CHECK(j <= p.j0 + p.nj);
            if (space.dofs[d].level == 0)
                pou[it.row()] += it.value();
        }
        CHECK(space.dirichlet[d] ==
              (space.dofs[d].level == 0 && s.classes.of_vertex[space.dofs[d].vertex] == VertexClass::Dirichlet));
    }
    CHECK((pou.array() - 1.0).abs().maxCoeff() < 1e-12);
}

TEST_CASE("linear pressure is reproduced for k = 1")
{
    auto s = make_setup(4, 3, {}, 3);
    const auto bc = BoundaryConditions::left_to_right(1.0, 0.0);
    for (int level = 1; level <= 3; ++level) {
        auto space = build_coarse_space(s.set, s.classes, level);
        auto sol = assemble_and_solve_coarse(space, s.k, {}, bc);
        const Vector p = project_to_fine(space, sol.coefficients);
        double err = 0.0;
        for (int n = 0; n < s.g.fine.num_nodes(); ++n)
            err = std::max(err, std::abs(p[n] - (1.0 - s.g.fine.node_point(n).x)));
        CHECK(err < 1e-10);
        for (int d = 0; d < space.num_dofs(); ++d)
            if (space.dofs[d].level > 0)
                CHECK(std::abs(sol.coefficients[d]) < 1e-10);
    }
}

TEST_CASE("r = 1 coarse solve equals the fine solve")
{
    auto g = build_nested_grids(6, 6, 1);
    auto k = gen_inclusions(g.fine, 1.0, blocks).values;
    auto classes = classify_vertices(g.coarse, left_right_layout);
    auto chi = harmonic_basis(g, k);
    auto set = build_enriched(chi, {}, enrichment_levels(classes, 1));
    auto space = build_coarse_space(set, classes, 1);
    std::vector<double> q(g.fine.num_cells(), 0.0);
    q[14] = 3.0;
    const auto bc = BoundaryConditions::left_to_right(1.0, 0.0);
    auto sol = assemble_and_solve_coarse(space, k, q, bc);
    const Vector fine = solve_fine(g.fine, k, q, bc);
    CHECK((project_to_fine(space, sol.coefficients) - fine).norm() <= 1e-12 * fine.norm());
}

TEST_CASE("L = 1 matches the element-wise MsFEM assembly")
{
    auto s = make_setup(5, 6, blocks, 1);
    auto space = build_coarse_space(s.set, s.classes, 1);
    std::vector<double> q(s.g.fine.num_cells(), 0.0);
    q[100] = 1.0;
    q[700] = -0.5;
    for (const auto& bc : {BoundaryConditions::left_to_right(1.0, 0.0),
                           BoundaryConditions::all_dirichlet([](double x, double y) { return x * y; })}) {
        auto gms = assemble_and_solve_coarse(space, s.k, q, bc);
        auto ms = solve_msfem(s.chi, s.classes, s.k, q, bc);
        CHECK((gms.coefficients - ms.coefficients).norm() <= 1e-10 * ms.coefficients.norm());
        CHECK((Eigen::MatrixXd(gms.matrix) - Eigen::MatrixXd(ms.matrix)).norm() <=
              1e-10 * Eigen::MatrixXd(ms.matrix).norm());
        const Vector a = project_to_fine(space, gms.coefficients);
        const Vector b = project_msfem(s.chi, ms.coefficients);
        CHECK((a - b).norm() <= 1e-10 * b.norm());
    }
}

TEST_CASE("energy error decreases with enrichment")
{
    auto s = make_setup(4, 6, blocks, 4);
    const auto bc = BoundaryConditions::left_to_right(1.0, 0.0);
    const Vector fine = solve_fine(s.g.fine, s.k, {}, bc);
    double prev = 1e300, first = 0.0;
    for (int level = 1; level <= 4; ++level) {
        auto space = build_coarse_space(s.set, s.classes, level);
        auto sol = assemble_and_solve_coarse(space, s.k, {}, bc);
        CHECK(sol.residual < 1e-10);
        const SparseMatrix& a = sol.matrix;
        CHECK((Eigen::MatrixXd(a) - Eigen::MatrixXd(a).transpose()).norm() == 0.0);
        const Vector e = project_to_fine(space, sol.coefficients) - fine;
        const double err = energy_norm(s.g.fine, s.k, e);
        // Galerkin orthogonality against the free dofs
        const Vector ortho = space.R * (assemble_stiffness(s.g.fine, s.g.fine.all_cells(), s.k) * e);
        for (int d = 0; d < space.num_dofs(); ++d)
            if (!space.dirichlet[d])
                CHECK(std::abs(ortho[d]) < 1e-9 * sol.rhs.cwiseAbs().sum() + 1e-9);
        CHECK(err <= prev * (1.0 + 1e-12));
        if (level == 1)
            first = err;
        prev = err;
    }
    CHECK(prev < 0.95 * first);
}

TEST_CASE("pure Neumann coarse problem")
{
    auto g = build_nested_grids(3, 3, 4);
    auto k = gen_inclusions(g.fine, 1.0, blocks).values;
    BoundaryLayout neumann;
    neumann.fill(BoundaryKind::Neumann);
    auto classes = classify_vertices(g.coarse, neumann);
    auto chi = harmonic_basis(g, k);
    auto set = build_enriched(chi, {}, enrichment_levels(classes, 1));
    auto space = build_coarse_space(set, classes, 1);
    std::vector<double> q(g.fine.num_cells(), 0.0);
    q.front() = 1.0;
    q.back() = -1.0;
    auto sol = assemble_and_solve_coarse(space, k, q, BoundaryConditions::all_neumann());
    CHECK(sol.coefficients[0] == 0.0);
    CHECK(sol.coefficients.norm() > 0.0);
    q.back() = 0.0;
    CHECK_THROWS_AS(assemble_and_solve_coarse(space, k, q, BoundaryConditions::all_neumann()), std::runtime_error);
}

TEST_CASE("coarse solution dump")
{
    auto s = make_setup(2, 2, {}, 2);
    auto space = build_coarse_space(s.set, s.classes, 2);
    auto sol = assemble_and_solve_coarse(space, s.k, {}, BoundaryConditions::left_to_right(1.0, 0.0));
    std::ostringstream os;
    write_coarse_solution(os, space, sol.coefficients);
    const std::string dump = os.str();
    CHECK(std::count(dump.begin(), dump.end(), '\n') == space.num_dofs() + 1);
}
