// SPDX-License-Identifier: Apache-2.0
#pragma once

// Finite-difference checks of every tape primitive and of the four stage
// objectives on a tiny model. Shared by the `gradcheck` subcommand and tests.

#include <string>
#include <vector>

#include "kdfip/gradcheck.hpp"

namespace kdfip {

struct GradcheckCase {
    std::string name;
    GradcheckResult result;
};

struct GradcheckSuiteReport {
    double h = 0.0;
    std::vector<GradcheckCase> cases;
    double seconds = 0.0;

    double max_rel_error() const;
    const GradcheckCase &worst() const;
};

/// Primitive cases first (one per Op), then "stage1".."stage4".
GradcheckSuiteReport run_gradcheck_suite(double h = 1e-5);

} // namespace kdfip
