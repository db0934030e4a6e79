#include "gmsflow/msbasis.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>

namespace gmsflow {

std::array<Vector, 4> harmonic_element(const GridHierarchy& grid, int element, std::span<const double> k)
{
    const CellBlock block = grid.element_block(element);
    const int r = grid.refine;
    std::array<Vector, 4> out;
    for (int j = 0; j < 4; ++j) {
        // bilinear vertex function, evaluated from node indices so traces match exactly
        auto phi = [j, r](int li, int lj) {
            const double s = static_cast<double>(li) / r;
            const double t = static_cast<double>(lj) / r;
            switch (j) {
            case 0:
                return (1.0 - s) * (1.0 - t);
            case 1:
                return s * (1.0 - t);
            case 2:
                return s * t;
            default:
                return (1.0 - s) * t;
            }
        };
        BoundaryData bc = BoundaryData::zero_flux(block);
        for (int m = 0; m < r; ++m) {
            bc.set_dirichlet(Side::Left, m, phi(0, m), phi(0, m + 1));
            bc.set_dirichlet(Side::Right, m, phi(r, m), phi(r, m + 1));
            bc.set_dirichlet(Side::Bottom, m, phi(m, 0), phi(m + 1, 0));
            bc.set_dirichlet(Side::Top, m, phi(m, r), phi(m + 1, r));
        }
        const LinearSystem sys = assemble(grid.fine, block, k, {}, bc);
        out[j] = expand_solution(sys, solve_spd(sys));
    }
    // The four solves share one matrix, so Σχ = 1 holds only to solver accuracy; at high
    // contrast that gap times λk∇p breaks the element target sums. Renormalize inside.
    for (int lj = 1; lj < r; ++lj)
        for (int li = 1; li < r; ++li) {
            const int n = lj * (r + 1) + li;
            const double s = out[0][n] + out[1][n] + out[2][n] + out[3][n];
            for (auto& chi : out)
                chi[n] /= s;
        }
    return out;
}

MultiscaleBasis harmonic_basis(const GridHierarchy& grid, std::span<const double> k)
{
    MultiscaleBasis b;
    b.grid = grid;
    b.nodes_per_element = (grid.refine + 1) * (grid.refine + 1);
    b.values.resize(static_cast<std::size_t>(grid.coarse.num_cells()) * 4 * b.nodes_per_element);
    for (int e = 0; e < grid.coarse.num_cells(); ++e) {
        const auto chi = harmonic_element(grid, e, k);
        for (int j = 0; j < 4; ++j)
            std::copy(chi[j].data(), chi[j].data() + b.nodes_per_element, b.chi(e, j).begin());
    }
    return b;
}

MultiscaleBasis bilinear_basis(const GridHierarchy& grid)
{
    MultiscaleBasis b;
    b.grid = grid;
    const int r = grid.refine;
    b.nodes_per_element = (r + 1) * (r + 1);
    b.values.resize(static_cast<std::size_t>(grid.coarse.num_cells()) * 4 * b.nodes_per_element);
    for (int e = 0; e < grid.coarse.num_cells(); ++e)
        for (int lj = 0; lj <= r; ++lj)
            for (int li = 0; li <= r; ++li) {
                const double s = static_cast<double>(li) / r;
                const double t = static_cast<double>(lj) / r;
                const int n = lj * (r + 1) + li;
                b.chi(e, 0)[n] = (1.0 - s) * (1.0 - t);
                b.chi(e, 1)[n] = s * (1.0 - t);
                b.chi(e, 2)[n] = s * t;
                b.chi(e, 3)[n] = (1.0 - s) * t;
            }
    return b;
}

std::vector<double> energy_weight(const MultiscaleBasis& basis, std::span<const double> k, const VertexClasses& classes)
{
    const auto& g = basis.grid;
    const int r = g.refine;
    const double h2 = g.h() * g.h();
    std::vector<double> kt(g.fine.num_cells(), 0.0);
    for (int e = 0; e < g.coarse.num_cells(); ++e) {
        const CellBlock b = g.element_block(e);
        const auto verts = g.coarse.cell_nodes(e);
        for (int j = 0; j < 4; ++j) {
            if (classes.of_vertex[verts[j]] == VertexClass::Dirichlet)
                continue;
            const auto chi = basis.chi(e, j);
            for (int lj = 0; lj < r; ++lj)
                for (int li = 0; li < r; ++li) {
                    const std::array<double, 4> v{chi[b.local_node(li, lj)], chi[b.local_node(li + 1, lj)],
                                                  chi[b.local_node(li + 1, lj + 1)], chi[b.local_node(li, lj + 1)]};
                    kt[block_cell(g.fine, b, li, lj)] += cell_gradient(v, g.fine.dx, g.fine.dy, 0.5, 0.5).squaredNorm();
                }
        }
    }
    for (int c = 0; c < g.fine.num_cells(); ++c)
        kt[c] *= k[c] * h2;
    return kt;
}

PatchMatrices patch_matrices(const Grid2D& fine, const CellBlock& block, std::span<const double> k,
                             std::span<const double> ktilde, double eps)
{
    PatchMatrices p;
    p.block = block;
    const int n = block.num_nodes();
    p.stiffness = Eigen::MatrixXd::Zero(n, n);
    p.mass = Eigen::MatrixXd::Zero(n, n);
    const Eigen::Matrix4d ks = local_stiffness(fine.dx, fine.dy, 1.0);
    const Eigen::Matrix4d ms = local_mass(fine.dx, fine.dy, 1.0);
    for (int lj = 0; lj < block.nj; ++lj)
        for (int li = 0; li < block.ni; ++li) {
            const int c = block_cell(fine, block, li, lj);
            double w = ktilde[c];
            if (!(w > 0.0)) {
                w = eps * k[c];
                p.regularized = true;
            }
            const std::array<int, 4> nodes{block.local_node(li, lj), block.local_node(li + 1, lj),
                                           block.local_node(li + 1, lj + 1), block.local_node(li, lj + 1)};
            for (int a = 0; a < 4; ++a)
                for (int b = 0; b < 4; ++b) {
                    p.stiffness(nodes[a], nodes[b]) += k[c] * ks(a, b);
                    p.mass(nodes[a], nodes[b]) += w * ms(a, b);
                }
        }
    return p;
}

namespace {

// Symmetric tridiagonal matrix: diagonal a, off-diagonal b.
struct Tridiagonal {
    Vector a;
    Vector b;

    int size() const { return static_cast<int>(a.size()); }
    double norm() const
    {
        double m = 0.0;
        for (int i = 0; i < size(); ++i) {
            double s = std::abs(a[i]);
            if (i > 0)
                s += std::abs(b[i - 1]);
            if (i + 1 < size())
                s += std::abs(b[i]);
            m = std::max(m, s);
        }
        return m;
    }
};

// Number of eigenvalues strictly below x (Sturm sequence via LDL^T pivots).
int count_below(const Tridiagonal& t, double x, double pivmin)
{
    int count = 0;
    double q = t.a[0] - x;
    if (std::abs(q) < pivmin)
        q = -pivmin;
    count += q < 0.0;
    for (int i = 1; i < t.size(); ++i) {
        q = t.a[i] - x - t.b[i - 1] * t.b[i - 1] / q;
        if (std::abs(q) < pivmin)
            q = -pivmin;
        count += q < 0.0;
    }
    return count;
}

double bisect_eigenvalue(const Tridiagonal& t, int index, double lo, double hi, double pivmin)
{
    constexpr double eps = std::numeric_limits<double>::epsilon();
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (hi - lo <= 2.0 * eps * std::max(std::abs(lo), std::abs(hi)) + pivmin || mid == lo || mid == hi)
            break;
        if (count_below(t, mid, pivmin) > index)
            hi = mid;
        else
            lo = mid;
    }
    return 0.5 * (lo + hi);
}

// LU of (T - shift I) with partial pivoting, then solves; the classic tridiagonal
// elimination with one extra fill-in diagonal.
class ShiftedTridiagonalLU {
public:
    ShiftedTridiagonalLU(const Tridiagonal& t, double shift, double tiny)
    {
        const int n = t.size();
        d_ = t.a.array() - shift;
        du_ = t.b;
        u2_ = Vector::Zero(std::max(0, n - 2));
        l_ = Vector::Zero(std::max(0, n - 1));
        piv_.assign(std::max(0, n - 1), 0);
        for (int i = 0; i + 1 < n; ++i) {
            const double lower = t.b[i];
            if (std::abs(d_[i]) >= std::abs(lower)) {
                if (d_[i] == 0.0)
                    d_[i] = tiny;
                l_[i] = lower / d_[i];
                d_[i + 1] -= l_[i] * du_[i];
            } else {
                piv_[i] = 1;
                l_[i] = d_[i] / lower;
                d_[i] = lower;
                const double tmp = d_[i + 1];
                d_[i + 1] = du_[i] - l_[i] * tmp;
                if (i + 2 < n) {
                    u2_[i] = du_[i + 1];
                    du_[i + 1] = -l_[i] * du_[i + 1];
                }
                du_[i] = tmp;
            }
        }
        if (n > 0 && d_[n - 1] == 0.0)
            d_[n - 1] = tiny;
    }

    Vector solve(Vector x) const
    {
        const int n = static_cast<int>(d_.size());
        for (int i = 0; i + 1 < n; ++i) {
            if (piv_[i])
                std::swap(x[i], x[i + 1]);
            x[i + 1] -= l_[i] * x[i];
        }
        for (int i = n - 1; i >= 0; --i) {
            double s = x[i];
            if (i + 1 < n)
                s -= du_[i] * x[i + 1];
            if (i + 2 < n)
                s -= u2_[i] * x[i + 2];
            x[i] = s / d_[i];
        }
        return x;
    }

private:
    Vector d_, du_, u2_, l_;
    std::vector<char> piv_;
};

// Largest m eigenpairs of a symmetric tridiagonal matrix, descending.
void top_eigenpairs(const Tridiagonal& t, int m, std::vector<double>& values, Eigen::MatrixXd& vectors)
{
    const int n = t.size();
    const double tnorm = std::max(t.norm(), std::numeric_limits<double>::min());
    constexpr double eps = std::numeric_limits<double>::epsilon();
    const double pivmin = std::numeric_limits<double>::min() * std::max(1.0, tnorm * tnorm);
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (int i = 0; i < n; ++i) {
        double rad = 0.0;
        if (i > 0)
            rad += std::abs(t.b[i - 1]);
        if (i + 1 < n)
            rad += std::abs(t.b[i]);
        lo = std::min(lo, t.a[i] - rad);
        hi = std::max(hi, t.a[i] + rad);
    }
    lo -= eps * tnorm + pivmin;
    hi += eps * tnorm + pivmin;

    values.resize(m);
    vectors.resize(n, m);
    const double cluster_gap = 1e-3 * tnorm;
    const double tiny = eps * tnorm;
    int cluster_start = 0;
    for (int i = 0; i < m; ++i) {
        const int index = n - 1 - i;
        values[i] = bisect_eigenvalue(t, index, lo, hi, pivmin);
        if (i > 0 && std::abs(values[i - 1] - values[i]) > cluster_gap)
            cluster_start = i;

        ShiftedTridiagonalLU lu(t, values[i], tiny);
        Vector v(n);
        for (int k = 0; k < n; ++k)
            v[k] = 1.0 + 0.5 * std::sin(1.0 + 7.3 * k + 3.1 * i);
        for (int it = 0; it < 4; ++it) {
            v = lu.solve(v);
            for (int pass = 0; pass < 2; ++pass)
                for (int c = cluster_start; c < i; ++c)
                    v -= vectors.col(c).dot(v) * vectors.col(c);
            const double nv = v.norm();
            if (!(nv > 0.0) || !std::isfinite(nv))
                throw EigenSolverError("inverse iteration broke down");
            v /= nv;
        }
        vectors.col(i) = v;
    }
}

}  // namespace

SpectralResult local_spectral(const PatchMatrices& patch, int n_eigs)
{
    const Eigen::MatrixXd& K = patch.stiffness;
    const Eigen::MatrixXd& M = patch.mass;
    const int n = static_cast<int>(K.rows());
    if (n_eigs < 1 || n_eigs > n)
        throw std::invalid_argument("requested " + std::to_string(n_eigs) + " eigenpairs on a patch with " +
                                    std::to_string(n) + " dofs");

    SpectralResult res;
    res.regularized = patch.regularized;
    res.eigenvalues.assign(1, 0.0);
    res.vectors.resize(n, n_eigs);
    const Vector ones = Vector::Ones(n);
    const Vector u = M * ones;
    const double s = ones.dot(u);
    res.vectors.col(0) = ones / std::sqrt(s);
    res.residuals.assign(1, 0.0);
    if (n_eigs == 1)
        return res;

    // Deflate constants: x = P y with y_0 = 0, P the M-orthogonal projector onto 1^⊥.
    const int m = n_eigs - 1;
    const int nd = n - 1;
    const Eigen::MatrixXd Kh = K.bottomRightCorner(nd, nd);
    Eigen::MatrixXd Mh = M.bottomRightCorner(nd, nd);
    Mh.noalias() -= u.tail(nd) * u.tail(nd).transpose() / s;

    // Largest ν of Mh y = ν Kh y give the smallest μ = 1/ν.
    Eigen::LLT<Eigen::MatrixXd> llt(Kh);
    if (llt.info() != Eigen::Success)
        throw EigenSolverError("patch stiffness is not positive definite after deflation");
    Eigen::MatrixXd C = llt.matrixL().solve(Mh);
    C = llt.matrixL().solve(C.transpose().eval());
    C = 0.5 * (C + C.transpose()).eval();

    Eigen::Tridiagonalization<Eigen::MatrixXd> tri(C);
    Tridiagonal t{tri.diagonal(), tri.subDiagonal()};
    std::vector<double> nu;
    Eigen::MatrixXd V;
    top_eigenpairs(t, m, nu, V);

    Eigen::MatrixXd Z = tri.matrixQ() * V;
    Eigen::MatrixXd Y = llt.matrixU().solve(Z);

    Eigen::MatrixXd X(n, m);
    for (int i = 0; i < m; ++i) {
        Vector x(n);
        x[0] = 0.0;
        x.tail(nd) = Y.col(i);
        x -= ones * (u.dot(x) / s);
        X.col(i) = x;
    }
    // M-orthonormalize, constant mode included.
    for (int i = 0; i < m; ++i) {
        Vector x = X.col(i);
        for (int pass = 0; pass < 2; ++pass) {
            x -= res.vectors.col(0) * (res.vectors.col(0).dot(M * x));
            for (int j = 0; j < i; ++j)
                x -= X.col(j) * (X.col(j).dot(M * x));
        }
        x /= std::sqrt(x.dot(M * x));
        X.col(i) = x;
    }
    for (int i = 0; i < m; ++i) {
        const Vector x = X.col(i);
        const Vector kx = K * x;
        const double mu = x.dot(kx);
        res.eigenvalues.push_back(mu);
        res.vectors.col(i + 1) = x;
        const double nk = kx.norm();
        res.residuals.push_back((kx - mu * (M * x)).norm() / (nk > 0.0 ? nk : 1.0));
    }
    for (std::size_t i = 1; i < res.eigenvalues.size(); ++i)
        if (res.eigenvalues[i] < res.eigenvalues[i - 1] * (1.0 - 1e-12))
            throw EigenSolverError("eigenvalues returned out of order");
    for (double r : res.residuals)
        if (!(r <= 1e-6))
            throw EigenSolverError("eigenpair residual " + std::to_string(r) + " too large");
    return res;
}

std::vector<VertexSpectrum> compute_spectra(const GridHierarchy& grid, std::span<const double> k,
                                            std::span<const double> ktilde, std::span<const int> vertices, int n_eigs)
{
    std::vector<VertexSpectrum> out;
    out.reserve(vertices.size());
    for (int z : vertices) {
        VertexSpectrum vs;
        vs.vertex = z;
        vs.patch = grid.patch_block(z);
        vs.result = local_spectral(patch_matrices(grid.fine, vs.patch, k, ktilde), n_eigs);
        out.push_back(std::move(vs));
    }
    return out;
}

std::vector<int> enrichment_levels(const VertexClasses& classes, int level, bool enrich_neumann)
{
    if (level < 1)
        throw std::invalid_argument("enrichment level must be >= 1");
    std::vector<int> l(classes.of_vertex.size(), 1);
    for (std::size_t z = 0; z < l.size(); ++z)
        if (classes.of_vertex[z] == VertexClass::Interior ||
            (enrich_neumann && classes.of_vertex[z] == VertexClass::Neumann))
            l[z] = level;
    return l;
}

int EnrichedBasisSet::patch_node(int z, int e, int n) const
{
    const CellBlock& p = patches[z];
    const CellBlock eb = grid.element_block(e);
    const int r = grid.refine;
    const int li = n % (r + 1);
    const int lj = n / (r + 1);
    return p.local_node(eb.i0 - p.i0 + li, eb.j0 - p.j0 + lj);
}

Vector EnrichedBasisSet::phi_patch(int z, int l) const
{
    const CellBlock& p = patches[z];
    Vector out = Vector::Zero(p.num_nodes());
    const int r = grid.refine;
    const int zi = z % (grid.coarse.nx + 1);
    const int zj = z / (grid.coarse.nx + 1);
    for (int ej = std::max(0, zj - 1); ej < std::min(grid.coarse.ny, zj + 1); ++ej)
        for (int ei = std::max(0, zi - 1); ei < std::min(grid.coarse.nx, zi + 1); ++ei) {
            const int e = grid.coarse.cell(ei, ej);
            const auto verts = grid.coarse.cell_nodes(e);
            const int j = static_cast<int>(std::find(verts.begin(), verts.end(), z) - verts.begin());
            const auto col = phi_element(e, j, l);
            for (int n = 0; n < (r + 1) * (r + 1); ++n)
                out[patch_node(z, e, n)] = col[n];
        }
    return out;
}

EnrichedBasisSet build_enriched(const MultiscaleBasis& chi, const std::vector<VertexSpectrum>& spectra,
                                const std::vector<int>& levels)
{
    const auto& g = chi.grid;
    const int nv = g.coarse.num_nodes();
    if (static_cast<int>(levels.size()) != nv)
        throw std::invalid_argument("one enrichment level per coarse vertex expected");

    EnrichedBasisSet set;
    set.grid = g;
    set.chi = chi;
    set.levels = levels;
    set.patches.resize(nv);
    set.eigenvalues.resize(nv);
    set.psi.resize(nv);

    std::vector<const VertexSpectrum*> by_vertex(nv, nullptr);
    for (const auto& s : spectra)
        if (s.vertex >= 0 && s.vertex < nv)
            by_vertex[s.vertex] = &s;

    for (int z = 0; z < nv; ++z) {
        if (levels[z] < 1)
            throw std::invalid_argument("L_z must be >= 1");
        set.patches[z] = g.patch_block(z);
        const int np = set.patches[z].num_nodes();
        const VertexSpectrum* s = by_vertex[z];
        const int have = s ? static_cast<int>(s->result.eigenvalues.size()) : 1;
        if (levels[z] > have)
            throw std::invalid_argument("vertex " + std::to_string(z) + " needs " + std::to_string(levels[z]) +
                                        " eigenpairs, only " + std::to_string(have) + " computed");
        Eigen::MatrixXd psi(np, levels[z]);
        psi.col(0).setOnes();
        set.eigenvalues[z].assign(1, 0.0);
        if (s) {
            const Vector first = s->result.vectors.col(0);
            const double c = first.mean();
            if ((first.array() - c).abs().maxCoeff() > 1e-8 * std::abs(c))
                throw std::invalid_argument("first eigenvector of vertex " + std::to_string(z) + " is not constant");
            for (int l = 1; l < levels[z]; ++l) {
                psi.col(l) = s->result.vectors.col(l);
                set.eigenvalues[z].push_back(s->result.eigenvalues[l]);
            }
        }
        set.psi[z] = std::move(psi);
    }

    const int ne = g.coarse.num_cells();
    set.element_phi.resize(ne);
    set.element_offset.resize(ne);
    for (int e = 0; e < ne; ++e) {
        const auto verts = g.coarse.cell_nodes(e);
        int cols = 0;
        for (int j = 0; j < 4; ++j) {
            set.element_offset[e][j] = cols;
            cols += levels[verts[j]];
        }
        Eigen::MatrixXd& m = set.element_phi[e];
        m.resize(chi.nodes_per_element, cols);
        for (int j = 0; j < 4; ++j) {
            const int z = verts[j];
            const auto c = chi.chi(e, j);
            for (int l = 0; l < levels[z]; ++l)
                for (int n = 0; n < chi.nodes_per_element; ++n)
                    m(n, set.element_offset[e][j] + l) = c[n] * set.psi[z](set.patch_node(z, e, n), l);
        }
    }
    return set;
}

void write_basis(std::ostream& os, const MultiscaleBasis& basis)
{
    const auto& g = basis.grid;
    os << std::setprecision(17);
    for (int e = 0; e < g.coarse.num_cells(); ++e) {
        const auto verts = g.coarse.cell_nodes(e);
        for (int j = 0; j < 4; ++j) {
            os << "vertex " << verts[j] << " element " << e << ':';
            for (double v : basis.chi(e, j))
                os << ' ' << v;
            os << '\n';
        }
    }
}

}  // namespace gmsflow
