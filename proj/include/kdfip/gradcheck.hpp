// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>
#include <string>

#include "kdfip/tape.hpp"

namespace kdfip {

using ParamMap = std::map<std::string, Tensor>;

/// Builds a scalar loss on `tape` from parameters already registered on it.
using LossClosure = std::function<Var(Tape &, const std::map<std::string, Var> &)>;

struct GradcheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
};

/// Compares tape gradients against central differences element by element.
/// Relative error is |g_auto - g_fd| / max(1e-12, |g_auto| + |g_fd|).
/// Throws std::invalid_argument for h <= 0 or a closure that is not
/// bitwise reproducible.
GradcheckResult finite_diff_gradcheck(const LossClosure &closure, const ParamMap &params,
                                      double h);

/// Loss value only; registers every entry of `params` on a fresh tape.
double evaluate_loss(const LossClosure &closure, const ParamMap &params);

} // namespace kdfip
