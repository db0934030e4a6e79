#include "doctest.h"

#include "gmsflow/field.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <queue>

using namespace gmsflow;

namespace {

std::string temp_path(const std::string& name)
{
    return (std::filesystem::temp_directory_path() / ("gmsflow_" + name)).string();
}

// Mean bounding-box aspect ratio (width / height) of 4-connected components of
// cells above the threshold, ignoring specks.
double mean_component_aspect(const Grid2D& g, const std::vector<double>& v, double threshold)
{
    std::vector<int> label(v.size(), -1);
    double sum = 0.0;
    int count = 0;
    for (int start = 0; start < g.num_cells(); ++start) {
        if (label[start] >= 0 || v[start] <= threshold)
            continue;
        int imin = g.nx, imax = -1, jmin = g.ny, jmax = -1, size = 0;
        std::queue<int> q;
        q.push(start);
        label[start] = start;
        while (!q.empty()) {
            const int c = q.front();
            q.pop();
            const int i = c % g.nx, j = c / g.nx;
            imin = std::min(imin, i), imax = std::max(imax, i);
            jmin = std::min(jmin, j), jmax = std::max(jmax, j);
            ++size;
            const int nb[4][2] = {{i - 1, j}, {i + 1, j}, {i, j - 1}, {i, j + 1}};
            for (const auto& n : nb) {
                if (n[0] < 0 || n[1] < 0 || n[0] >= g.nx || n[1] >= g.ny)
                    continue;
                const int d = g.cell(n[0], n[1]);
                if (label[d] < 0 && v[d] > threshold) {
                    label[d] = start;
                    q.push(d);
                }
            }
        }
        if (size < 10)
            continue;
        sum += static_cast<double>(imax - imin + 1) / (jmax - jmin + 1);
        ++count;
    }
    return count ? sum / count : 0.0;
}

}  // namespace

TEST_CASE("load_field round trip and validation")
{
    Grid2D g{100, 100, 0.0, 0.0, 0.01, 0.01};
    const auto path = temp_path("ones.txt");
    std::vector<double> ones(g.num_cells(), 1.0);
    write_cell_values(path, g.ny, g.nx, ones);
    auto f = load_field(path, g);
    CHECK(f.contrast() == 1.0);

    Grid2D g2{120, 120, 0.0, 0.0, 1.0 / 120, 1.0 / 120};
    std::vector<double> v(g2.num_cells(), 1.0);
    v[17] = 1.8e6;
    write_cell_values(path, 120, 120, v);
    f = load_field(path, g2);
    CHECK(f.contrast() == doctest::Approx(1.8e6));
    CHECK(f.values[17] == 1.8e6);

    v[3] = 0.0;
    write_cell_values(path, 120, 120, v);
    CHECK_THROWS_AS(load_field(path, g2), std::invalid_argument);
    CHECK_THROWS_AS(load_field(path, g), std::invalid_argument);
    std::remove(path.c_str());
}

TEST_CASE("inclusions")
{
    Grid2D g{20, 20, 0.0, 0.0, 0.05, 0.05};
    const Feature channel{0.0, 0.4, 1.0, 0.5, 2e4};
    auto f = gen_inclusions(g, 1.0, std::span(&channel, 1));
    CHECK(f.contrast() == doctest::Approx(2e4));

    auto flat = gen_inclusions(g, 3.0, {});
    CHECK(flat.contrast() == 1.0);

    const Feature two[] = {{0.0, 0.0, 0.5, 0.5, 10.0}, {0.2, 0.2, 0.7, 0.7, 20.0}};
    auto ov = gen_inclusions(g, 1.0, two);
    CHECK(ov.values[g.cell(6, 6)] == 20.0);  // center (0.325, 0.325) is in both
    CHECK(ov.values[g.cell(1, 1)] == 10.0);

    const Feature bad{0.0, 0.0, 1.0, 1.0, -1.0};
    CHECK_THROWS_AS(gen_inclusions(g, 1.0, std::span(&bad, 1)), std::invalid_argument);

    auto det = gen_inclusions(Grid2D{100, 100, 0.0, 0.0, 0.01, 0.01}, 1.0, deterministic_features());
    CHECK(det.contrast() == doctest::Approx(2e4));
}

TEST_CASE("channelized generator")
{
    Grid2D g{120, 120, 0.0, 0.0, 1.0 / 120, 1.0 / 120};
    ChannelizedParams p;
    p.seed = 7;
    auto a = gen_channelized(g, p);
    auto b = gen_channelized(g, p);
    CHECK(a.values == b.values);
    CHECK(a.contrast() >= 1.8e5);
    CHECK(a.contrast() <= 1.8e7);
    for (double v : a.values)
        CHECK_UNARY(v > 0.0);

    p.seed = 8;
    auto c = gen_channelized(g, p);
    CHECK(c.values != a.values);

    // geometric midpoint between extremes separates channels from background
    for (auto s : {7u, 11u, 23u}) {
        p.seed = s;
        auto f = gen_channelized(g, p);
        const double mid = std::sqrt(f.min_value * f.max_value);
        CHECK(mean_component_aspect(g, f.values, mid) > 2.0);
    }

    p.contrast = 0.5;
    CHECK_THROWS_AS(gen_channelized(g, p), std::invalid_argument);
}

TEST_CASE("mobility and fractional flow")
{
    MobilityModel m;
    CHECK(m.mobility(0.0) == doctest::Approx(0.2));
    CHECK(m.frac_flow(0.0) == 0.0);
    CHECK(m.mobility(1.0) == doctest::Approx(1.0));
    CHECK(m.frac_flow(1.0) == doctest::Approx(1.0));
    CHECK(m.mobility(0.5) == doctest::Approx(0.3));
    CHECK(m.frac_flow(0.5) == doctest::Approx(0.25 / 0.3));

    double prev = -1.0;
    double lmin = 1e300;
    for (int i = 0; i <= 1000; ++i) {
        const double s = i / 1000.0;
        CHECK(m.frac_flow(s) >= prev);
        prev = m.frac_flow(s);
        lmin = std::min(lmin, m.mobility(s));
    }
    CHECK(lmin >= 0.16 - 1e-12);
    CHECK(lmin == doctest::Approx(1.0 / 6.0).epsilon(1e-5));

    // finite-difference oracle for max |f'|
    double fd = 0.0;
    for (int i = 0; i < 100000; ++i) {
        const double s = i / 100000.0;
        fd = std::max(fd, std::abs(m.frac_flow(s + 1e-5) - m.frac_flow(s)) / 1e-5);
    }
    CHECK(m.max_frac_flow_slope() == doctest::Approx(fd).epsilon(1e-3));

    CHECK(clamp_saturation(1.5) == 1.0);
    CHECK(clamp_saturation(-0.2) == 0.0);
}
