// SPDX-License-Identifier: Apache-2.0
#include "kdfip/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace kdfip::train {

void adam_step(ParamMap &params, const std::map<std::string, Tensor> &grads, AdamState &state,
               double lr, const std::set<std::string> &frozen) {
    for (const auto &[name, g] : grads) {
        auto it = params.find(name);
        if (it == params.end())
            throw std::invalid_argument("adam_step: gradient for unknown parameter '" + name + "'");
        if (it->second.shape() != g.shape())
            throw ShapeError("adam_step: gradient shape " + shape_str(g.shape()) +
                             " for parameter '" + name + "' of shape " +
                             shape_str(it->second.shape()));
    }
    ++state.t;
    const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.t));
    for (const auto &[name, g] : grads) {
        if (frozen.count(name))
            continue;
        Tensor &p = params.at(name);
        auto [mit, fresh_m] = state.m.try_emplace(name, g.shape());
        auto [vit, fresh_v] = state.v.try_emplace(name, g.shape());
        Tensor &m = mit->second;
        Tensor &v = vit->second;
        for (std::size_t i = 0; i < p.numel(); ++i) {
            m[i] = kAdamBeta1 * m[i] + (1.0 - kAdamBeta1) * g[i];
            v[i] = kAdamBeta2 * v[i] + (1.0 - kAdamBeta2) * g[i] * g[i];
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            p[i] -= lr * mhat / (std::sqrt(vhat) + kAdamEps);
        }
    }
}

} // namespace kdfip::train
