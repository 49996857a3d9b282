// SPDX-License-Identifier: Apache-2.0
#include "kdfip/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace kdfip::train {

namespace {

Tensor one_hot(std::size_t rows, std::size_t classes, std::span<const sim::Label> labels) {
    if (labels.size() != rows)
        throw ShapeError("ce_frame_loss: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(rows) + " frames");
    Tensor m({rows, classes});
    for (std::size_t r = 0; r < rows; ++r) {
        if (labels[r] >= classes)
            throw std::out_of_range("ce_frame_loss: label " + std::to_string(labels[r]) +
                                    " outside [0, " + std::to_string(classes - 1) + "]");
        m.at(r, labels[r]) = 1.0;
    }
    return m;
}

} // namespace

Var ce_frame_loss(Tape &tape, Var log_probs, std::span<const sim::Label> labels) {
    // Sizes are copied out: pushing nodes may reallocate the tape's storage.
    const std::size_t R = tape.value(log_probs).rows(), C = tape.value(log_probs).cols();
    const Var picked = tape.mul(log_probs, tape.constant(one_hot(R, C, labels)));
    const Var per_frame = tape.scale(tape.mean(picked, 1), -static_cast<double>(C));
    return tape.mean(per_frame, 0);
}

Var kl_frame_loss(Tape &tape, const Tensor &teacher, Var student) {
    const Shape s_shape = tape.value(student).shape();
    if (teacher.shape() != s_shape)
        throw ShapeError("kl_frame_loss: teacher " + shape_str(teacher.shape()) + " vs student " +
                         shape_str(s_shape));
    Tensor probs = teacher;
    for (auto &v : probs.data())
        v = std::exp(v);
    const Var diff = tape.add(tape.constant(teacher), tape.scale(student, -1.0));
    const Var weighted = tape.mul(tape.constant(std::move(probs)), diff);
    const Var per_frame = tape.scale(tape.mean(weighted, 1), static_cast<double>(s_shape[1]));
    return tape.mean(per_frame, 0);
}

HybridLoss hybrid_loss(Tape &tape, Var ce, Var kl, double beta) {
    if (!(beta >= 0.0))
        throw std::invalid_argument("hybrid_loss: beta must be >= 0");
    HybridLoss h{ce, ce, kl};
    if (kl.valid())
        h.total = tape.add(ce, tape.scale(kl, beta));
    return h;
}

double ce_frame_loss(const Tensor &log_probs, std::span<const sim::Label> labels) {
    Tape tape;
    return tape.value(ce_frame_loss(tape, tape.constant(log_probs), labels)).item();
}

double kl_frame_loss(const Tensor &teacher, const Tensor &student) {
    Tape tape;
    return tape.value(kl_frame_loss(tape, teacher, tape.constant(student))).item();
}

} // namespace kdfip::train
