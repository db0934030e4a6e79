#ifndef GMSFLOW_FIELD_HPP
#define GMSFLOW_FIELD_HPP

#include "gmsflow/mesh.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace gmsflow {

/// Scalar permeability, constant on every fine cell.
struct CoefficientField {
    Grid2D grid;
    std::vector<double> values;
    double min_value = 0.0;
    double max_value = 0.0;

    double contrast() const { return max_value / min_value; }
};

/// Validates positivity and fills min/max.
CoefficientField make_field(const Grid2D& grid, std::vector<double> values);

/// Plain text: header "rows cols", then row-major values, row 0 at the bottom (y = y0).
CoefficientField load_field(const std::string& path, const Grid2D& grid);
std::vector<double> read_cell_values(const std::string& path, int rows, int cols);
void write_cell_values(const std::string& path, int rows, int cols, std::span<const double> values);

/// Axis-aligned box with a permeability value. A fine cell belongs to the box when
/// its center lies inside [x0, x1] x [y0, y1].
struct Feature {
    double x0 = 0.0;
    double y0 = 0.0;
    double x1 = 0.0;
    double y1 = 0.0;
    double value = 1.0;
};

/// Background value overwritten inside each feature; later features win.
CoefficientField gen_inclusions(const Grid2D& grid, double background, std::span<const Feature> features);

/// High-contrast field with horizontal channels and scattered inclusions used by
/// the single- and two-phase experiments (contrast = high / background).
std::vector<Feature> deterministic_features(double high = 2.0e4);

struct ChannelizedParams {
    std::uint64_t seed = 0;
    double corr_x = 0.25;      // correlation lengths as fractions of the domain
    double corr_y = 0.02;
    double threshold = 0.3;    // in standard deviations of the smoothed noise
    double sharpness = 0.15;   // width of the logistic threshold, same units
    double contrast = 1.8e6;
    double k_min = 1.0;
};

/// Smoothed thresholded Gaussian noise with anisotropic correlation, exponentiated
/// to the requested contrast. Deterministic for a fixed seed.
CoefficientField gen_channelized(const Grid2D& grid, const ChannelizedParams& params);

/// Two-phase constitutive model with power-law relative permeabilities
/// k_rw = S^n, k_ro = (1 - S)^n.
struct MobilityModel {
    double mu_w = 1.0;
    double mu_o = 5.0;
    double exponent = 2.0;

    double krw(double s) const;
    double kro(double s) const;
    double mobility(double s) const;
    double frac_flow(double s) const;
    /// max |f'| sampled on a 1001-point grid of [0, 1].
    double max_frac_flow_slope() const;
};

/// Clamp a saturation into [0, 1]; values further than 1e-9 outside warn once.
double clamp_saturation(double s);

}  // namespace gmsflow

#endif
