#include "gmsflow/field.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

namespace gmsflow {

CoefficientField make_field(const Grid2D& grid, std::vector<double> values)
{
    if (static_cast<int>(values.size()) != grid.num_cells())
        throw std::invalid_argument("field has " + std::to_string(values.size()) + " values, grid has " +
                                    std::to_string(grid.num_cells()) + " cells");
    CoefficientField f;
    f.grid = grid;
    f.min_value = std::numeric_limits<double>::infinity();
    f.max_value = 0.0;
    for (std::size_t c = 0; c < values.size(); ++c) {
        const double v = values[c];
        if (!(v > 0.0) || !std::isfinite(v))
            throw std::invalid_argument("nonpositive or non-finite coefficient " + std::to_string(v) + " in cell " +
                                        std::to_string(c));
        f.min_value = std::min(f.min_value, v);
        f.max_value = std::max(f.max_value, v);
    }
    f.values = std::move(values);
    return f;
}

std::vector<double> read_cell_values(const std::string& path, int rows, int cols)
{
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("cannot open " + path);
    int r = 0;
    int c = 0;
    if (!(in >> r >> c))
        throw std::runtime_error(path + ": missing \"rows cols\" header");
    if (r != rows || c != cols)
        throw std::invalid_argument(path + ": size " + std::to_string(r) + "x" + std::to_string(c) + " does not match grid " +
                                    std::to_string(rows) + "x" + std::to_string(cols));
    std::vector<double> values(static_cast<std::size_t>(rows) * cols);
    for (auto& v : values)
        if (!(in >> v))
            throw std::invalid_argument(path + ": expected " + std::to_string(values.size()) + " values");
    double extra = 0.0;
    if (in >> extra)
        throw std::invalid_argument(path + ": more values than rows*cols");
    return values;
}

void write_cell_values(const std::string& path, int rows, int cols, std::span<const double> values)
{
    std::ofstream out(path);
    if (!out)
        throw std::runtime_error("cannot write " + path);
    out << rows << ' ' << cols << '\n' << std::setprecision(17);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c)
            out << (c ? " " : "") << values[static_cast<std::size_t>(r) * cols + c];
        out << '\n';
    }
    if (!out)
        throw std::runtime_error("write failed for " + path);
}

CoefficientField load_field(const std::string& path, const Grid2D& grid)
{
    return make_field(grid, read_cell_values(path, grid.ny, grid.nx));
}

CoefficientField gen_inclusions(const Grid2D& grid, double background, std::span<const Feature> features)
{
    if (!(background > 0.0))
        throw std::invalid_argument("background permeability must be positive");
    for (const auto& f : features)
        if (!(f.value > 0.0))
            throw std::invalid_argument("feature permeability must be positive");
    std::vector<double> v(grid.num_cells(), background);
    for (int j = 0; j < grid.ny; ++j) {
        const double yc = grid.node_y(j) + 0.5 * grid.dy;
        for (int i = 0; i < grid.nx; ++i) {
            const double xc = grid.node_x(i) + 0.5 * grid.dx;
            for (const auto& f : features)
                if (xc >= f.x0 && xc <= f.x1 && yc >= f.y0 && yc <= f.y1)
                    v[grid.cell(i, j)] = f.value;
        }
    }
    return make_field(grid, std::move(v));
}

std::vector<Feature> deterministic_features(double high)
{
    // Long thin channels that cross several coarse blocks, plus isolated inclusions.
    std::vector<Feature> f{
        {0.05, 0.13, 0.62, 0.15, high},
        {0.35, 0.33, 0.95, 0.35, high},
        {0.12, 0.52, 0.78, 0.54, high},
        {0.28, 0.72, 0.88, 0.74, high},
        {0.10, 0.86, 0.55, 0.88, high},
        {0.47, 0.15, 0.49, 0.33, high},
    };
    const double s = 0.03;
    const double spots[][2] = {{0.18, 0.25}, {0.42, 0.42}, {0.72, 0.22}, {0.85, 0.45}, {0.25, 0.63},
                               {0.62, 0.62}, {0.15, 0.78}, {0.82, 0.82}, {0.55, 0.05}, {0.35, 0.92}};
    for (const auto& p : spots)
        f.push_back({p[0], p[1], p[0] + s, p[1] + s, high});
    return f;
}

namespace {

// Box-Muller on top of the raw 64-bit engine, so the stream only depends on the
// engine definition.
class NormalStream {
public:
    explicit NormalStream(std::uint64_t seed) : engine_(seed) {}

    double operator()()
    {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(t);
        has_spare_ = true;
        return r * std::cos(t);
    }

private:
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

std::vector<double> gaussian_kernel(double sigma)
{
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> w(2 * radius + 1);
    double sum = 0.0;
    for (int k = -radius; k <= radius; ++k) {
        w[k + radius] = sigma > 0.0 ? std::exp(-0.5 * (k / sigma) * (k / sigma)) : (k == 0 ? 1.0 : 0.0);
        sum += w[k + radius];
    }
    for (auto& x : w)
        x /= sum;
    return w;
}

}  // namespace

CoefficientField gen_channelized(const Grid2D& grid, const ChannelizedParams& p)
{
    if (!(p.contrast >= 1.0))
        throw std::invalid_argument("contrast must be >= 1");
    if (!(p.k_min > 0.0))
        throw std::invalid_argument("k_min must be positive");
    const double sx = std::max(0.0, p.corr_x * grid.nx);
    const double sy = std::max(0.0, p.corr_y * grid.ny);
    const auto kx = gaussian_kernel(sx);
    const auto ky = gaussian_kernel(sy);
    const int rx = static_cast<int>(kx.size() / 2);
    const int ry = static_cast<int>(ky.size() / 2);

    // Noise on a padded grid so the smoothed field has no boundary artifacts.
    const int px = grid.nx + 2 * rx;
    const int py = grid.ny + 2 * ry;
    NormalStream normal(p.seed);
    std::vector<double> noise(static_cast<std::size_t>(px) * py);
    for (auto& v : noise)
        v = normal();

    std::vector<double> tmp(static_cast<std::size_t>(grid.nx) * py, 0.0);
    for (int j = 0; j < py; ++j)
        for (int i = 0; i < grid.nx; ++i) {
            double s = 0.0;
            for (int k = 0; k < static_cast<int>(kx.size()); ++k)
                s += kx[k] * noise[static_cast<std::size_t>(j) * px + i + k];
            tmp[static_cast<std::size_t>(j) * grid.nx + i] = s;
        }
    std::vector<double> y(grid.num_cells(), 0.0);
    for (int j = 0; j < grid.ny; ++j)
        for (int i = 0; i < grid.nx; ++i) {
            double s = 0.0;
            for (int k = 0; k < static_cast<int>(ky.size()); ++k)
                s += ky[k] * tmp[static_cast<std::size_t>(j + k) * grid.nx + i];
            y[grid.cell(i, j)] = s;
        }

    double mean = 0.0;
    for (double v : y)
        mean += v;
    mean /= y.size();
    double var = 0.0;
    for (double v : y)
        var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / y.size());

    std::vector<double> g(y.size());
    double gmin = std::numeric_limits<double>::infinity();
    double gmax = -gmin;
    for (std::size_t c = 0; c < y.size(); ++c) {
        const double t = ((y[c] - mean) / (sd > 0.0 ? sd : 1.0) - p.threshold) / p.sharpness;
        g[c] = 1.0 / (1.0 + std::exp(-t));
        gmin = std::min(gmin, g[c]);
        gmax = std::max(gmax, g[c]);
    }
    const double span = gmax > gmin ? gmax - gmin : 1.0;
    const double log_contrast = std::log(p.contrast);
    std::vector<double> k(y.size());
    for (std::size_t c = 0; c < y.size(); ++c)
        k[c] = p.k_min * std::exp(log_contrast * (g[c] - gmin) / span);
    return make_field(grid, std::move(k));
}

double clamp_saturation(double s)
{
    static std::atomic<bool> warned{false};
    if ((s < -1e-9 || s > 1.0 + 1e-9) && !warned.exchange(true))
        std::cerr << "warning: saturation " << s << " outside [0, 1] clamped\n";
    return std::clamp(s, 0.0, 1.0);
}

double MobilityModel::krw(double s) const { return std::pow(clamp_saturation(s), exponent); }

double MobilityModel::kro(double s) const { return std::pow(1.0 - clamp_saturation(s), exponent); }

double MobilityModel::mobility(double s) const { return krw(s) / mu_w + kro(s) / mu_o; }

double MobilityModel::frac_flow(double s) const { return (krw(s) / mu_w) / mobility(s); }

double MobilityModel::max_frac_flow_slope() const
{
    constexpr int n = 1000;
    double best = 0.0;
    for (int i = 0; i <= n; ++i) {
        const double s = static_cast<double>(i) / n;
        const double a = krw(s) / mu_w;
        const double b = kro(s) / mu_o;
        const double da = s > 0.0 ? exponent * std::pow(s, exponent - 1.0) / mu_w : (exponent == 1.0 ? 1.0 / mu_w : 0.0);
        const double db = s < 1.0 ? -exponent * std::pow(1.0 - s, exponent - 1.0) / mu_o : (exponent == 1.0 ? -1.0 / mu_o : 0.0);
        best = std::max(best, std::abs((da * b - a * db) / ((a + b) * (a + b))));
    }
    return best;
}

}  // namespace gmsflow
