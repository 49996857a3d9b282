// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstring>

#include "kdfip/config.hpp"
#include "kdfip/experiment.hpp"

namespace kdfip::testing {

/// A run small enough for unit tests: every stage trains in well under a second.
inline RunConfig small_config(std::uint64_t seed = 3) {
    RunConfig c;
    c.seed = seed;
    c.sim.targets = 1;
    c.sim.generic_train = 160;
    c.sim.generic_test = 40;
    c.sim.generic_calib = 30;
    c.sim.personal_train = 16;
    c.sim.personal_test = 20;
    c.sim.synthetic = 64;
    c.sim.text_pool = 120;
    c.hidden = 24;
    c.bottleneck = 4;
    c.stage1.epochs = 2;
    for (auto *s : {&c.stage2, &c.stage3, &c.stage4, &c.ft, &c.adapter, &c.pga, &c.fip})
        s->epochs = 1;
    c.ablation.betas = {0.01, 1.0};
    c.ablation.multipliers = {0.0, 0.5};
    c.ablation.non_targets = 1;
    return c;
}

inline const exp::Workspace &small_workspace() {
    static const exp::Workspace ws = exp::Workspace::build(small_config());
    return ws;
}

/// Stage 1 backbone of the small workspace, trained once.
inline const model::BackboneParams &small_backbone() {
    static const model::BackboneParams b =
        train::train_stage1(small_workspace().model_config(), small_workspace().config.stage("stage1"),
                            small_workspace().generic_train)
            .model.backbone;
    return b;
}

inline bool same_bits(const Tensor &a, const Tensor &b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

template <class Params> bool same_params(const Params &a, const Params &b) {
    const ParamMap ma = model::to_param_map(a), mb = model::to_param_map(b);
    if (ma.size() != mb.size())
        return false;
    for (const auto &[k, v] : ma)
        if (!mb.count(k) || !same_bits(v, mb.at(k)))
            return false;
    return true;
}

} // namespace kdfip::testing
