// SPDX-License-Identifier: Apache-2.0
#include "kdfip/gradcheck.hpp"

#include <bit>
#include <cmath>
#include <stdexcept>

namespace kdfip {

namespace {

Var build(Tape &tape, const LossClosure &closure, const ParamMap &params) {
    std::map<std::string, Var> vars;
    for (const auto &[name, value] : params)
        vars.emplace(name, tape.param(name, value));
    return closure(tape, vars);
}

} // namespace

double evaluate_loss(const LossClosure &closure, const ParamMap &params) {
    Tape tape;
    return tape.value(build(tape, closure, params)).item();
}

GradcheckResult finite_diff_gradcheck(const LossClosure &closure, const ParamMap &params,
                                      double h) {
    if (!(h > 0.0))
        throw std::invalid_argument("gradcheck: step h must be > 0");

    Tape tape;
    const Var loss = build(tape, closure, params);
    const double first = tape.value(loss).item();
    if (std::bit_cast<std::uint64_t>(first) !=
        std::bit_cast<std::uint64_t>(evaluate_loss(closure, params)))
        throw std::invalid_argument("gradcheck: closure is not deterministic");
    const Gradients grads = tape.backward(loss);

    GradcheckResult result;
    ParamMap probe = params;
    for (const auto &[name, value] : params) {
        Tensor &p = probe.at(name);
        const Tensor &g = grads[name];
        for (std::size_t i = 0; i < value.numel(); ++i) {
            const double orig = p[i];
            p[i] = orig + h;
            const double up = evaluate_loss(closure, probe);
            p[i] = orig - h;
            const double down = evaluate_loss(closure, probe);
            p[i] = orig;
            const double fd = (up - down) / (2.0 * h);
            const double rel =
                std::abs(g[i] - fd) / std::max(1e-12, std::abs(g[i]) + std::abs(fd));
            ++result.checked;
            if (rel > result.max_rel_error) {
                result.max_rel_error = rel;
                result.worst_param = name;
                result.worst_index = i;
            }
        }
    }
    return result;
}

} // namespace kdfip
