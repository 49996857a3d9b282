// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>

#include "kdfip/gradcheck.hpp"

namespace kdfip::train {

struct AdamState {
    std::map<std::string, Tensor> m, v;
    std::uint64_t t = 0;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

/// One bias-corrected Adam update of every parameter that has a gradient and
/// is not in `frozen`. Gradients for unknown names or of the wrong shape are
/// rejected.
void adam_step(ParamMap &params, const std::map<std::string, Tensor> &grads, AdamState &state,
               double lr, const std::set<std::string> &frozen = {});

} // namespace kdfip::train
