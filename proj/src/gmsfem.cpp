#include "gmsflow/gmsfem.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>

namespace gmsflow {

namespace {

bool enriched_vertex(VertexClass c, bool enrich_neumann)
{
    return c == VertexClass::Interior || (enrich_neumann && c == VertexClass::Neumann);
}

// Boundary data of one coarse element: domain Neumann data on sides lying on ∂Ω,
// nothing elsewhere (the element Dirichlet data never enters a load vector).
BoundaryData element_boundary(const GridHierarchy& g, int e, const BoundaryData& domain)
{
    const CellBlock b = g.element_block(e);
    BoundaryData d = BoundaryData::zero_flux(b);
    const bool on[4] = {b.i0 == 0, b.i0 + b.ni == g.fine.nx, b.j0 == 0, b.j0 + b.nj == g.fine.ny};
    for (Side s : all_sides) {
        if (!on[static_cast<int>(s)])
            continue;
        const int offset = (s == Side::Left || s == Side::Right) ? b.j0 : b.i0;
        for (int m = 0; m < b.side_length(s); ++m)
            d.segment(s, m) = domain.segment(s, offset + m);
    }
    return d;
}

// Dirichlet elimination and solve of a symmetric system with some fixed unknowns.
Vector solve_with_fixed(const SparseMatrix& a, const Vector& f, const std::vector<char>& fixed, const Vector& values,
                        double& residual)
{
    const int n = static_cast<int>(a.rows());
    std::vector<int> map(n, -1);
    int nf = 0;
    for (int i = 0; i < n; ++i)
        if (!fixed[i])
            map[i] = nf++;
    const Vector lift = a * values;
    Vector rhs(nf);
    for (int i = 0; i < n; ++i)
        if (map[i] >= 0)
            rhs[map[i]] = f[i] - lift[i];
    std::vector<Eigen::Triplet<double>> trip;
    for (int c = 0; c < a.outerSize(); ++c)
        for (SparseMatrix::InnerIterator it(a, c); it; ++it)
            if (map[it.row()] >= 0 && map[it.col()] >= 0)
                trip.emplace_back(map[it.row()], map[it.col()], it.value());
    SparseMatrix af(nf, nf);
    af.setFromTriplets(trip.begin(), trip.end());
    const Vector x = solve_spd(af, rhs);
    residual = rhs.norm() > 0.0 ? (af * x - rhs).norm() / rhs.norm() : (af * x - rhs).norm();
    Vector out = values;
    for (int i = 0; i < n; ++i)
        if (map[i] >= 0)
            out[i] = x[map[i]];
    return out;
}

}  // namespace

int coarse_dof_count(const VertexClasses& classes, int level, bool enrich_neumann)
{
    const int extra = static_cast<int>(classes.interior.size() + (enrich_neumann ? classes.neumann.size() : 0));
    return static_cast<int>(classes.of_vertex.size()) + (level - 1) * extra;
}

CoarseSpace build_coarse_space(const EnrichedBasisSet& basis, const VertexClasses& classes, int level,
                               bool enrich_neumann)
{
    if (level < 1)
        throw std::invalid_argument("enrichment level must be >= 1");
    const auto& g = basis.grid;
    const int nv = g.coarse.num_nodes();
    CoarseSpace space;
    space.grid = g;
    for (int z = 0; z < nv; ++z)
        space.dofs.push_back({z, 0});
    for (int l = 1; l < level; ++l)
        for (int z = 0; z < nv; ++z)
            if (enriched_vertex(classes.of_vertex[z], enrich_neumann)) {
                if (basis.levels[z] <= l)
                    throw std::invalid_argument("vertex " + std::to_string(z) + " has " +
                                                std::to_string(basis.levels[z]) + " basis functions, level " +
                                                std::to_string(level) + " requested");
                space.dofs.push_back({z, l});
            }

    std::vector<Eigen::Triplet<double>> trip;
    for (int d = 0; d < space.num_dofs(); ++d) {
        const auto [z, l] = space.dofs[d];
        const CellBlock p = basis.patches[z];
        const Vector phi = basis.phi_patch(z, l);
        for (int lj = 0; lj <= p.nj; ++lj)
            for (int li = 0; li <= p.ni; ++li) {
                const double v = phi[p.local_node(li, lj)];
                if (v != 0.0)
                    trip.emplace_back(d, g.fine.node(p.i0 + li, p.j0 + lj), v);
            }
        space.dirichlet.push_back(l == 0 && classes.of_vertex[z] == VertexClass::Dirichlet);
    }
    space.R.resize(space.num_dofs(), g.fine.num_nodes());
    space.R.setFromTriplets(trip.begin(), trip.end());
    return space;
}

double dirichlet_vertex_value(const Grid2D& coarse, int z, const BoundaryConditions& bc)
{
    const Point x = coarse.node_point(z);
    for (Side s : node_sides(coarse, z))
        if (bc[s].kind == BoundaryKind::Dirichlet)
            return bc[s](x.x, x.y);
    throw std::invalid_argument("vertex " + std::to_string(z) + " is not on a Dirichlet side");
}

CoarseSolution assemble_and_solve_coarse(const CoarseSpace& space, std::span<const double> coeff,
                                         std::span<const double> source, const BoundaryConditions& bc)
{
    const Grid2D& fine = space.grid.fine;
    const SparseMatrix a = assemble_stiffness(fine, fine.all_cells(), coeff);
    const Vector f = assemble_load(fine, fine.all_cells(), source, make_boundary_data(fine, fine.all_cells(), bc));

    CoarseSolution sol;
    const SparseMatrix ra = space.R * a;
    sol.matrix = ra * SparseMatrix(space.R.transpose());
    sol.matrix = 0.5 * (sol.matrix + SparseMatrix(sol.matrix.transpose()));
    sol.rhs = space.R * f;

    const int n = space.num_dofs();
    std::vector<char> fixed(space.dirichlet.begin(), space.dirichlet.end());
    Vector values = Vector::Zero(n);
    bool any = false;
    for (int d = 0; d < n; ++d)
        if (fixed[d]) {
            values[d] = dirichlet_vertex_value(space.grid.coarse, space.dofs[d].vertex, bc);
            any = true;
        }
    if (!any) {
        const double mismatch = std::abs(sol.rhs.head(space.grid.coarse.num_nodes()).sum());
        if (mismatch > 1e-9 * sol.rhs.cwiseAbs().sum() && mismatch > 1e-300)
            throw std::runtime_error("incompatible pure Neumann data in the coarse problem");
        fixed[0] = 1;  // constants are in the space; fix their coefficient
    }
    sol.coefficients = solve_with_fixed(sol.matrix, sol.rhs, fixed, values, sol.residual);
    return sol;
}

Vector project_to_fine(const CoarseSpace& space, const Vector& coefficients)
{
    if (coefficients.size() != space.num_dofs())
        throw std::invalid_argument("coefficient vector does not match the coarse space");
    return space.R.transpose() * coefficients;
}

CoarseSolution solve_msfem(const MultiscaleBasis& chi, const VertexClasses& classes, std::span<const double> coeff,
                           std::span<const double> source, const BoundaryConditions& bc)
{
    const auto& g = chi.grid;
    const int nv = g.coarse.num_nodes();
    const BoundaryData domain = make_boundary_data(g.fine, g.fine.all_cells(), bc);

    std::vector<Eigen::Triplet<double>> trip;
    CoarseSolution sol;
    sol.rhs = Vector::Zero(nv);
    for (int e = 0; e < g.coarse.num_cells(); ++e) {
        const CellBlock b = g.element_block(e);
        const SparseMatrix ae = assemble_stiffness(g.fine, b, coeff);
        const Vector fe = assemble_load(g.fine, b, source, element_boundary(g, e, domain));
        Eigen::MatrixXd x(chi.nodes_per_element, 4);
        for (int j = 0; j < 4; ++j)
            x.col(j) = Eigen::Map<const Vector>(chi.chi(e, j).data(), chi.nodes_per_element);
        const Eigen::Matrix4d local = x.transpose() * (ae * x);
        const Eigen::Vector4d load = x.transpose() * fe;
        const auto verts = g.coarse.cell_nodes(e);
        for (int a = 0; a < 4; ++a) {
            sol.rhs[verts[a]] += load[a];
            for (int c = 0; c < 4; ++c)
                trip.emplace_back(verts[a], verts[c], local(a, c));
        }
    }
    sol.matrix.resize(nv, nv);
    sol.matrix.setFromTriplets(trip.begin(), trip.end());

    std::vector<char> fixed(nv, 0);
    Vector values = Vector::Zero(nv);
    for (int z : classes.dirichlet) {
        fixed[z] = 1;
        values[z] = dirichlet_vertex_value(g.coarse, z, bc);
    }
    if (classes.dirichlet.empty())
        fixed[0] = 1;
    sol.coefficients = solve_with_fixed(sol.matrix, sol.rhs, fixed, values, sol.residual);
    return sol;
}

Vector project_msfem(const MultiscaleBasis& chi, const Vector& coefficients)
{
    const auto& g = chi.grid;
    Vector p = Vector::Zero(g.fine.num_nodes());
    std::vector<char> done(g.fine.num_nodes(), 0);
    for (int e = 0; e < g.coarse.num_cells(); ++e) {
        const CellBlock b = g.element_block(e);
        const auto verts = g.coarse.cell_nodes(e);
        for (int n = 0; n < chi.nodes_per_element; ++n) {
            const int gn = block_node_to_global(g.fine, b, n);
            if (done[gn])
                continue;
            done[gn] = 1;
            double v = 0.0;
            for (int j = 0; j < 4; ++j)
                v += coefficients[verts[j]] * chi.chi(e, j)[n];
            p[gn] = v;
        }
    }
    return p;
}

Vector solve_fine(const Grid2D& fine, std::span<const double> coeff, std::span<const double> source,
                  const BoundaryConditions& bc)
{
    const BoundaryData data = make_boundary_data(fine, fine.all_cells(), bc);
    LinearSystem sys = assemble(fine, fine.all_cells(), coeff, source, data);
    if (sys.singular)
        sys = pin_one_dof(std::move(sys), 0, 0.0);
    return expand_solution(sys, solve_spd(sys));
}

double energy_norm(const Grid2D& fine, std::span<const double> coeff, const Vector& nodal)
{
    return std::sqrt(std::max(0.0, energy(fine, fine.all_cells(), coeff, nodal)));
}

void write_coarse_solution(std::ostream& os, const CoarseSpace& space, const Vector& coefficients)
{
    os << "# vertex level coefficient\n" << std::setprecision(17);
    for (int d = 0; d < space.num_dofs(); ++d)
        os << space.dofs[d].vertex << ' ' << space.dofs[d].level + 1 << ' ' << coefficients[d] << '\n';
}

}  // namespace gmsflow
