// SPDX-License-Identifier: Apache-2.0
#include "kdfip/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "kdfip/tensor.hpp"

namespace kdfip {

namespace {

std::vector<double> shifted(std::span<const double> w, std::span<const double> dw, double s) {
    std::vector<double> out(w.begin(), w.end());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] += s * dw[i];
    return out;
}

double squared_norm(const std::vector<double> &v) {
    double s = 0.0;
    for (double x : v)
        s += x * x;
    return s;
}

void check_direction(std::span<const double> w, std::span<const double> dw) {
    if (w.size() != dw.size())
        throw ShapeError("perturbation has " + std::to_string(dw.size()) +
                         " entries, weights have " + std::to_string(w.size()));
}

std::vector<double> evaluate(const OutputFn &f, std::span<const double> w, std::size_t expect) {
    auto out = f(w);
    if (expect != 0 && out.size() != expect)
        throw ShapeError("output size changed between evaluations");
    return out;
}

} // namespace

std::vector<double> directional_derivative(const OutputFn &f, std::span<const double> w,
                                           std::span<const double> dw, double h) {
    check_direction(w, dw);
    if (!(h > 0.0))
        throw std::invalid_argument("directional_derivative: h must be > 0");
    const auto up = f(shifted(w, dw, h));
    const auto down = evaluate(f, shifted(w, dw, -h), up.size());
    std::vector<double> jdw(up.size());
    for (std::size_t i = 0; i < up.size(); ++i)
        jdw[i] = (up[i] - down[i]) / (2.0 * h);
    return jdw;
}

DiagnosticsReport output_perturbation_residual(const OutputFn &f, std::span<const double> w,
                                               std::span<const double> dw,
                                               std::span<const double> scales, double h) {
    check_direction(w, dw);
    if (scales.empty())
        throw std::invalid_argument("output_perturbation_residual: no scales");
    for (std::size_t i = 0; i < scales.size(); ++i) {
        if (!(scales[i] > 0.0) || (i > 0 && !(scales[i] < scales[i - 1])))
            throw std::invalid_argument(
                "output_perturbation_residual: scales must be positive and decreasing");
    }

    DiagnosticsReport report;
    report.scales.assign(scales.begin(), scales.end());
    report.zero_direction = std::all_of(dw.begin(), dw.end(), [](double v) { return v == 0.0; });
    if (report.zero_direction) {
        report.residual_norms.assign(scales.size(), 0.0);
        report.metric_values.assign(scales.size(), 0.0);
        return report;
    }

    const auto base = f(w);
    const auto jdw = directional_derivative(f, w, dw, h);
    if (jdw.size() != base.size())
        throw ShapeError("output size changed between evaluations");
    const double jnorm2 = squared_norm(jdw);

    for (double s : scales) {
        const auto moved = evaluate(f, shifted(w, dw, s), base.size());
        double res2 = 0.0, disp2 = 0.0;
        for (std::size_t i = 0; i < base.size(); ++i) {
            const double disp = moved[i] - base[i];
            const double r = disp - s * jdw[i];
            res2 += r * r;
            disp2 += disp * disp;
        }
        const double metric = s * s * jnorm2;
        report.residual_norms.push_back(std::sqrt(res2));
        report.metric_values.push_back(metric);
        if (metric > 0.0)
            report.displacement_ratios.push_back(disp2 / metric);
    }
    if (report.displacement_ratios.size() != scales.size())
        report.displacement_ratios.clear();

    const bool any_zero = std::any_of(report.residual_norms.begin(), report.residual_norms.end(),
                                      [](double r) { return r == 0.0; });
    if (!any_zero)
        for (std::size_t i = 0; i + 1 < report.residual_norms.size(); ++i)
            report.convergence_ratios.push_back(report.residual_norms[i] /
                                                report.residual_norms[i + 1]);
    return report;
}

double metric_inner_product(const OutputFn &f, std::span<const double> w,
                            std::span<const double> dw, double h) {
    check_direction(w, dw);
    if (std::all_of(dw.begin(), dw.end(), [](double v) { return v == 0.0; }))
        return 0.0;
    return squared_norm(directional_derivative(f, w, dw, h));
}

} // namespace kdfip
