#include "gmsflow/fem.hpp"

#include <Eigen/IterativeLinearSolvers>
#include <Eigen/SparseCholesky>

#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace gmsflow {

Eigen::Matrix4d local_stiffness(double hx, double hy, double coeff)
{
    if (!(hx > 0.0) || !(hy > 0.0))
        throw std::invalid_argument("degenerate cell");
    // Tensor product of 1D stiffness (1/h)[1 -1; -1 1] and mass (h/6)[2 1; 1 2].
    static constexpr int ax[4] = {0, 1, 1, 0};
    static constexpr int ay[4] = {0, 0, 1, 1};
    Eigen::Matrix4d k;
    for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) {
            const double sx = ax[a] == ax[b] ? 1.0 : -1.0;
            const double sy = ay[a] == ay[b] ? 1.0 : -1.0;
            const double mx = ax[a] == ax[b] ? 2.0 : 1.0;
            const double my = ay[a] == ay[b] ? 2.0 : 1.0;
            k(a, b) = coeff * (sx / hx * hy * my / 6.0 + hx * mx / 6.0 * sy / hy);
        }
    return k;
}

Eigen::Matrix4d local_mass(double hx, double hy, double weight)
{
    static constexpr int ax[4] = {0, 1, 1, 0};
    static constexpr int ay[4] = {0, 0, 1, 1};
    Eigen::Matrix4d m;
    for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b)
            m(a, b) = weight * hx * hy / 36.0 * (ax[a] == ax[b] ? 2.0 : 1.0) * (ay[a] == ay[b] ? 2.0 : 1.0);
    return m;
}

Eigen::Vector2d cell_gradient(const std::array<double, 4>& v, double hx, double hy, double s, double t)
{
    const double gx = ((v[1] - v[0]) * (1.0 - t) + (v[2] - v[3]) * t) / hx;
    const double gy = ((v[3] - v[0]) * (1.0 - s) + (v[2] - v[1]) * s) / hy;
    return {gx, gy};
}

BoundaryLayout BoundaryConditions::layout() const
{
    return {sides[0].kind, sides[1].kind, sides[2].kind, sides[3].kind};
}

BoundaryConditions BoundaryConditions::left_to_right(double left, double right)
{
    BoundaryConditions bc;
    bc[Side::Left] = {BoundaryKind::Dirichlet, [left](double, double) { return left; }};
    bc[Side::Right] = {BoundaryKind::Dirichlet, [right](double, double) { return right; }};
    bc[Side::Bottom] = {BoundaryKind::Neumann, {}};
    bc[Side::Top] = {BoundaryKind::Neumann, {}};
    return bc;
}

BoundaryConditions BoundaryConditions::all_dirichlet(std::function<double(double, double)> value)
{
    BoundaryConditions bc;
    for (auto& s : bc.sides)
        s = {BoundaryKind::Dirichlet, value};
    return bc;
}

BoundaryConditions BoundaryConditions::all_neumann(std::function<double(double, double)> flux)
{
    BoundaryConditions bc;
    for (auto& s : bc.sides)
        s = {BoundaryKind::Neumann, flux};
    return bc;
}

BoundaryData BoundaryData::zero_flux(const CellBlock& block)
{
    BoundaryData d;
    d.block = block;
    for (Side s : all_sides)
        d.segments[static_cast<int>(s)].assign(block.side_length(s), BoundarySegment{});
    d.dirichlet_node.assign(block.num_nodes(), 0);
    d.dirichlet_value.assign(block.num_nodes(), 0.0);
    return d;
}

int BoundaryData::side_node(Side s, int m) const
{
    switch (s) {
    case Side::Left:
        return block.local_node(0, m);
    case Side::Right:
        return block.local_node(block.ni, m);
    case Side::Bottom:
        return block.local_node(m, 0);
    case Side::Top:
        return block.local_node(m, block.nj);
    }
    return -1;
}

void BoundaryData::set_dirichlet(Side s, int m, double value_start, double value_end)
{
    auto& seg = segment(s, m);
    seg = BoundarySegment{};
    seg.kind = BoundaryKind::Dirichlet;
    const int a = side_node(s, m);
    const int b = side_node(s, m + 1);
    // A node shared with an earlier Dirichlet segment keeps its first value.
    if (!dirichlet_node[a]) {
        dirichlet_node[a] = 1;
        dirichlet_value[a] = value_start;
    }
    if (!dirichlet_node[b]) {
        dirichlet_node[b] = 1;
        dirichlet_value[b] = value_end;
    }
}

void BoundaryData::set_neumann_constant(Side s, int m, double outflow)
{
    auto& seg = segment(s, m);
    seg.kind = BoundaryKind::Neumann;
    seg.weighted = {0.5 * outflow, 0.5 * outflow};
    seg.half = {0.5 * outflow, 0.5 * outflow};
}

bool BoundaryData::has_dirichlet() const
{
    for (char c : dirichlet_node)
        if (c)
            return true;
    return false;
}

int block_node_to_global(const Grid2D& grid, const CellBlock& b, int local)
{
    const int li = local % (b.ni + 1);
    const int lj = local / (b.ni + 1);
    return grid.node(b.i0 + li, b.j0 + lj);
}

BoundaryData make_boundary_data(const Grid2D& grid, const CellBlock& block, const BoundaryConditions& bc)
{
    BoundaryData d = BoundaryData::zero_flux(block);
    const double xa = grid.node_x(block.i0);
    const double xb = grid.node_x(block.i0 + block.ni);
    const double ya = grid.node_y(block.j0);
    const double yb = grid.node_y(block.j0 + block.nj);
    // Two-point Gauss rule on each half of a segment.
    const double g1 = 0.5 - 0.5 / std::sqrt(3.0);
    const double g2 = 0.5 + 0.5 / std::sqrt(3.0);

    for (Side s : all_sides) {
        const auto& cond = bc[s];
        const bool vertical = (s == Side::Left || s == Side::Right);
        const double fixed = s == Side::Left ? xa : s == Side::Right ? xb : s == Side::Bottom ? ya : yb;
        const double step = vertical ? grid.dy : grid.dx;
        const double origin = vertical ? ya : xa;
        auto at = [&](double u) { return vertical ? cond(fixed, u) : cond(u, fixed); };
        for (int m = 0; m < block.side_length(s); ++m) {
            const double u0 = origin + m * step;
            if (cond.kind == BoundaryKind::Dirichlet) {
                d.set_dirichlet(s, m, at(u0), at(u0 + step));
                continue;
            }
            auto& seg = d.segment(s, m);
            seg.kind = BoundaryKind::Neumann;
            seg.weighted = {0.0, 0.0};
            seg.half = {0.0, 0.0};
            for (int h = 0; h < 2; ++h)
                for (double g : {g1, g2}) {
                    const double r = 0.5 * (h + g);  // position along the segment in [0, 1]
                    const double w = 0.25 * step;    // half length times Gauss weight 1/2
                    const double val = at(u0 + r * step);
                    seg.half[h] += w * val;
                    seg.weighted[0] += w * val * (1.0 - r);
                    seg.weighted[1] += w * val * r;
                }
        }
    }
    return d;
}

SparseMatrix assemble_stiffness(const Grid2D& grid, const CellBlock& block, std::span<const double> coeff)
{
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(16 * static_cast<std::size_t>(block.num_cells()));
    const Eigen::Matrix4d unit = local_stiffness(grid.dx, grid.dy, 1.0);
    for (int lj = 0; lj < block.nj; ++lj)
        for (int li = 0; li < block.ni; ++li) {
            const double c = coeff[block_cell(grid, block, li, lj)];
            const std::array<int, 4> n{block.local_node(li, lj), block.local_node(li + 1, lj),
                                       block.local_node(li + 1, lj + 1), block.local_node(li, lj + 1)};
            for (int a = 0; a < 4; ++a)
                for (int b = 0; b < 4; ++b)
                    trip.emplace_back(n[a], n[b], c * unit(a, b));
        }
    SparseMatrix a(block.num_nodes(), block.num_nodes());
    a.setFromTriplets(trip.begin(), trip.end());
    return a;
}

Vector assemble_load(const Grid2D& grid, const CellBlock& block, std::span<const double> source, const BoundaryData& bc)
{
    Vector f = Vector::Zero(block.num_nodes());
    if (!source.empty()) {
        const double quarter = 0.25 * grid.dx * grid.dy;
        for (int lj = 0; lj < block.nj; ++lj)
            for (int li = 0; li < block.ni; ++li) {
                const double q = source[block_cell(grid, block, li, lj)] * quarter;
                f[block.local_node(li, lj)] += q;
                f[block.local_node(li + 1, lj)] += q;
                f[block.local_node(li + 1, lj + 1)] += q;
                f[block.local_node(li, lj + 1)] += q;
            }
    }
    for (Side s : all_sides)
        for (int m = 0; m < block.side_length(s); ++m) {
            const auto& seg = bc.segment(s, m);
            if (seg.kind != BoundaryKind::Neumann)
                continue;
            f[bc.side_node(s, m)] -= seg.weighted[0];
            f[bc.side_node(s, m + 1)] -= seg.weighted[1];
        }
    return f;
}

LinearSystem assemble(const Grid2D& grid, const CellBlock& block, std::span<const double> coeff,
                      std::span<const double> source, const BoundaryData& bc)
{
    if (bc.block.ni != block.ni || bc.block.nj != block.nj)
        throw std::invalid_argument("boundary data does not match the block");
    if (block.i0 < 0 || block.j0 < 0 || block.i0 + block.ni > grid.nx || block.j0 + block.nj > grid.ny)
        throw std::invalid_argument("block outside grid");
    if (static_cast<int>(coeff.size()) != grid.num_cells())
        throw std::invalid_argument("coefficient size " + std::to_string(coeff.size()) + " does not match grid cells " +
                                    std::to_string(grid.num_cells()));
    if (!source.empty() && static_cast<int>(source.size()) != grid.num_cells())
        throw std::invalid_argument("source size does not match grid cells");

    const SparseMatrix full = assemble_stiffness(grid, block, coeff);
    const Vector load = assemble_load(grid, block, source, bc);

    LinearSystem sys;
    sys.block = block;
    const int nn = block.num_nodes();
    sys.node_to_dof.assign(nn, -1);
    sys.dirichlet = Vector::Zero(nn);
    for (int n = 0; n < nn; ++n) {
        if (bc.dirichlet_node[n]) {
            sys.dirichlet[n] = bc.dirichlet_value[n];
            continue;
        }
        sys.node_to_dof[n] = static_cast<int>(sys.dof_to_node.size());
        sys.dof_to_node.push_back(n);
    }
    const int nd = sys.num_dofs();

    // f_free - A_free,D * p_D
    const Vector lift = full * sys.dirichlet;
    sys.rhs.resize(nd);
    for (int d = 0; d < nd; ++d)
        sys.rhs[d] = load[sys.dof_to_node[d]] - lift[sys.dof_to_node[d]];

    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(full.nonZeros());
    for (int col = 0; col < full.outerSize(); ++col)
        for (SparseMatrix::InnerIterator it(full, col); it; ++it) {
            const int r = sys.node_to_dof[it.row()];
            const int c = sys.node_to_dof[it.col()];
            if (r >= 0 && c >= 0)
                trip.emplace_back(r, c, it.value());
        }
    sys.matrix.resize(nd, nd);
    sys.matrix.setFromTriplets(trip.begin(), trip.end());

    sys.singular = nd == nn;
    if (sys.singular) {
        sys.compatibility_residual = std::abs(sys.rhs.sum());
        const double scale = sys.rhs.cwiseAbs().sum();
        if (sys.compatibility_residual > 1e-9 * scale && sys.compatibility_residual > 1e-300)
            throw std::runtime_error("incompatible pure Neumann data: |sum f| = " +
                                     std::to_string(sys.compatibility_residual) + " vs scale " + std::to_string(scale));
    }
    return sys;
}

LinearSystem pin_one_dof(LinearSystem sys, int dof, double value)
{
    if (dof < 0 || dof >= sys.num_dofs())
        throw std::out_of_range("pinned dof out of range");
    const Vector col = sys.matrix.col(dof);
    sys.rhs -= col * value;
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(sys.matrix.nonZeros());
    for (int c = 0; c < sys.matrix.outerSize(); ++c)
        for (SparseMatrix::InnerIterator it(sys.matrix, c); it; ++it)
            if (it.row() != dof && it.col() != dof)
                trip.emplace_back(it.row(), it.col(), it.value());
    trip.emplace_back(dof, dof, 1.0);
    sys.matrix.setFromTriplets(trip.begin(), trip.end());
    sys.rhs[dof] = value;
    sys.pinned = true;
    return sys;
}

namespace {

// b - A x accumulated in long double, so that the residual of a well-solved
// high-contrast system is not swamped by the rounding of the product itself.
Vector residual(const SparseMatrix& a, const Vector& x, const Vector& b)
{
    std::vector<long double> r(b.data(), b.data() + b.size());
    for (int c = 0; c < a.outerSize(); ++c)
        for (SparseMatrix::InnerIterator it(a, c); it; ++it)
            r[it.row()] -= static_cast<long double>(it.value()) * x[it.col()];
    Vector out(b.size());
    for (int i = 0; i < b.size(); ++i)
        out[i] = static_cast<double>(r[i]);
    return out;
}

double relative_residual(const SparseMatrix& a, const Vector& x, const Vector& b)
{
    const double nb = b.norm();
    const double nr = residual(a, x, b).norm();
    if (nb == 0.0)
        return nr;
    return nr / nb;
}

// Normwise backward error |r|_inf / (|A|_inf |x|_inf + |b|_inf).
double backward_error(const SparseMatrix& a, const Vector& x, const Vector& b)
{
    Vector rowsum = Vector::Zero(a.rows());
    for (int c = 0; c < a.outerSize(); ++c)
        for (SparseMatrix::InnerIterator it(a, c); it; ++it)
            rowsum[it.row()] += std::abs(it.value());
    const double scale = rowsum.maxCoeff() * x.cwiseAbs().maxCoeff() + b.cwiseAbs().maxCoeff();
    return scale > 0.0 ? residual(a, x, b).cwiseAbs().maxCoeff() / scale : 0.0;
}

// At high contrast the rounding of x alone can leave |Ax - b| above 1e-10 |b|; the
// solve is then accepted when it is backward stable to a few ulps.
bool converged(const SparseMatrix& a, const Vector& x, const Vector& b, double res, double tolerance)
{
    if (!std::isfinite(res))
        return false;
    return res <= tolerance || backward_error(a, x, b) <= 1e-14;
}

}  // namespace

Vector solve_spd(const SparseMatrix& matrix, const Vector& rhs)
{
    constexpr double tolerance = 1e-10;
    if (matrix.rows() == 0)
        return Vector();
    if (rhs.norm() == 0.0)
        return Vector::Zero(rhs.size());

    Eigen::SimplicialLDLT<SparseMatrix> ldlt(matrix);
    if (ldlt.info() == Eigen::Success) {
        Vector x = ldlt.solve(rhs);
        double res = relative_residual(matrix, x, rhs);
        // a few steps of iterative refinement
        for (int step = 0; step < 3 && std::isfinite(res) && res > tolerance; ++step) {
            x += ldlt.solve(residual(matrix, x, rhs));
            res = relative_residual(matrix, x, rhs);
        }
        if (converged(matrix, x, rhs, res, tolerance))
            return x;
    }

    Eigen::ConjugateGradient<SparseMatrix, Eigen::Lower | Eigen::Upper, Eigen::DiagonalPreconditioner<double>> cg;
    cg.setTolerance(1e-12);
    cg.setMaxIterations(std::max<Eigen::Index>(1000, 10 * matrix.rows()));
    cg.compute(matrix);
    const Vector x = cg.solve(rhs);
    const double res = relative_residual(matrix, x, rhs);
    if (!converged(matrix, x, rhs, res, tolerance)) {
        std::ostringstream msg;
        msg << "SPD solve failed to reach relative residual 1e-10 (got " << res << ", backward error "
            << backward_error(matrix, x, rhs) << ")";
        throw SolverError(msg.str(), res);
    }
    return x;
}

Vector solve_spd(const LinearSystem& sys)
{
    if (sys.singular && !sys.pinned)
        throw SolverError("pure Neumann system is singular; pin one dof before solving", 0.0);
    return solve_spd(sys.matrix, sys.rhs);
}

Vector expand_solution(const LinearSystem& sys, const Vector& dofs)
{
    Vector nodal = sys.dirichlet;
    for (int d = 0; d < sys.num_dofs(); ++d)
        nodal[sys.dof_to_node[d]] = dofs[d];
    return nodal;
}

double energy(const Grid2D& grid, const CellBlock& block, std::span<const double> coeff, const Vector& nodal)
{
    const Eigen::Matrix4d unit = local_stiffness(grid.dx, grid.dy, 1.0);
    double e = 0.0;
    for (int lj = 0; lj < block.nj; ++lj)
        for (int li = 0; li < block.ni; ++li) {
            const Eigen::Vector4d v(nodal[block.local_node(li, lj)], nodal[block.local_node(li + 1, lj)],
                                    nodal[block.local_node(li + 1, lj + 1)], nodal[block.local_node(li, lj + 1)]);
            e += coeff[block_cell(grid, block, li, lj)] * v.dot(unit * v);
        }
    return e;
}

void write_matrix_coo(std::ostream& os, const SparseMatrix& m)
{
    os << std::setprecision(17);
    for (int c = 0; c < m.outerSize(); ++c)
        for (SparseMatrix::InnerIterator it(m, c); it; ++it)
            os << it.row() << ' ' << it.col() << ' ' << it.value() << '\n';
}

}  // namespace gmsflow
