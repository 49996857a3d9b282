// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>

#include "kdfip/sim.hpp"
#include "kdfip/tape.hpp"

namespace kdfip::train {

/// Mean over frames of -log p(label). Labels must lie in [0, classes).
Var ce_frame_loss(Tape &tape, Var log_probs, std::span<const sim::Label> labels);

/// Mean over frames of sum_c p_t(c) (log p_t(c) - log p_s(c)). The teacher
/// enters as a constant, so no gradient reaches it.
Var kl_frame_loss(Tape &tape, const Tensor &teacher_log_probs, Var student_log_probs);

struct HybridLoss {
    Var total;
    Var ce;
    Var kl; // invalid when no old-task batch was used
};

/// total = ce + beta * kl. Without a kl term, total is ce itself.
HybridLoss hybrid_loss(Tape &tape, Var ce, Var kl, double beta);

// Plain evaluations of the same quantities.
double ce_frame_loss(const Tensor &log_probs, std::span<const sim::Label> labels);
double kl_frame_loss(const Tensor &teacher_log_probs, const Tensor &student_log_probs);

} // namespace kdfip::train
