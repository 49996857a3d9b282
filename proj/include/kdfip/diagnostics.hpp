// SPDX-License-Identifier: Apache-2.0
#pragma once

// Numerical checks of the first-order output model f(w + dw) ~ f(w) + J dw and
// of the output-space metric <dw, dw>_r = |J dw|^2, r = J^T J. The Jacobian is
// never formed; J dw comes from a central directional difference.

#include <functional>
#include <span>
#include <vector>

namespace kdfip {

/// f(x; w) for a fixed input x, flattened.
using OutputFn = std::function<std::vector<double>(std::span<const double> w)>;

struct DiagnosticsReport {
    std::vector<double> scales;
    /// |f(w + s dw) - f(w) - s J dw| per scale.
    std::vector<double> residual_norms;
    /// <s dw, s dw>_r per scale.
    std::vector<double> metric_values;
    /// residual_norms[i] / residual_norms[i+1]; empty when undefined.
    std::vector<double> convergence_ratios;
    /// |f(w + s dw) - f(w)|^2 / metric_values[i]; empty when undefined.
    std::vector<double> displacement_ratios;
    /// Set when dw is identically zero (ratios are undefined).
    bool zero_direction = false;
};

/// J dw by central difference with step h along dw.
std::vector<double> directional_derivative(const OutputFn &f, std::span<const double> w,
                                           std::span<const double> dw, double h);

/// `scales` must be positive and strictly decreasing; h should be much smaller
/// than the last scale.
DiagnosticsReport output_perturbation_residual(const OutputFn &f, std::span<const double> w,
                                               std::span<const double> dw,
                                               std::span<const double> scales, double h);

/// |J dw|^2, always >= 0.
double metric_inner_product(const OutputFn &f, std::span<const double> w,
                            std::span<const double> dw, double h = 1e-5);

} // namespace kdfip
