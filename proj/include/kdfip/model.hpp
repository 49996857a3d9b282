// SPDX-License-Identifier: Apache-2.0
#pragma once

// Toy frame-level recognizer. Each block stacks frames (t-1, t, t+1) with edge
// repetition, projects, applies tanh and an affine layer norm. An optional
// bottleneck adapter per block adds g * Up(tanh(Down(H_b))) to the block
// output; g is one utterance-level gate shared by all blocks.

#include <optional>
#include <type_traits>
#include <span>
#include <string>
#include <vector>

#include "kdfip/gradcheck.hpp"
#include "kdfip/rng.hpp"
#include "kdfip/sim.hpp"
#include "kdfip/tape.hpp"

namespace kdfip::model {

struct ModelConfig {
    std::size_t blocks = 2;
    std::size_t hidden = 64;
    std::size_t bottleneck = 8;
    std::size_t vocab_size = 20;
    std::size_t feature_dim = 16;

    std::size_t classes() const { return vocab_size + 1; }
    void validate() const;
};

struct BlockParams {
    Tensor proj_w; // 3*in x H
    Tensor proj_b; // 1 x H
    Tensor ln_gamma;
    Tensor ln_beta;
};

struct BackboneParams {
    std::vector<BlockParams> blocks;
    Tensor head_w; // H x (V+1)
    Tensor head_b;
};

struct AdapterBlock {
    Tensor down_w; // H x r
    Tensor down_b;
    Tensor up_w; // r x H, zero at init
    Tensor up_b;
};

struct AdapterParams {
    std::vector<AdapterBlock> blocks;
};

struct GatingParams {
    Tensor centroid; // 1 x D
    double tau = 0.0;
    double sharpness = 1.0;
};

/// Backbone, optional adapters and optional gate: one deployable model.
struct ModelBundle {
    BackboneParams backbone;
    std::optional<AdapterParams> adapters;
    std::optional<GatingParams> gate;
};

BackboneParams init_backbone(const ModelConfig &cfg, rng::Key key);
AdapterParams init_adapters(const ModelConfig &cfg, rng::Key key);

/// Visits every tensor with its stable name ("backbone.block0.proj_w", ...).
template <class Params, class F> void visit_named(Params &p, F &&f);

ParamMap to_param_map(const BackboneParams &p);
ParamMap to_param_map(const AdapterParams &p);
ParamMap to_param_map(const ModelBundle &b);
/// Copies tensors back by name; every name in `p` must be present with the same shape.
void assign_from(BackboneParams &p, const ParamMap &m);
void assign_from(AdapterParams &p, const ParamMap &m);
/// Rebuilds a bundle from a map holding backbone.*, optionally adapter.* and gate.*.
ModelBundle bundle_from_map(const ModelConfig &cfg, const ParamMap &m);

std::vector<double> flatten(const BackboneParams &p);
BackboneParams unflatten(const BackboneParams &shape_like, std::span<const double> w);
std::vector<double> flatten(const AdapterParams &p);
AdapterParams unflatten(const AdapterParams &shape_like, std::span<const double> w);

/// 64-bit FNV-1a over the raw bytes of every tensor, in name order.
std::uint64_t params_hash(const ParamMap &m);

/// Utterances laid end to end, with context indices that never cross an
/// utterance boundary.
struct Batch {
    Tensor features; // N x D
    std::vector<sim::Label> labels;
    std::vector<std::size_t> prev, next;
    std::vector<std::size_t> offsets; // utterance start rows, plus N at the end
    std::size_t utterances() const { return offsets.empty() ? 0 : offsets.size() - 1; }
    std::size_t rows() const { return labels.size(); }
};

Batch make_batch(std::span<const sim::Utterance *const> utts);
Batch make_batch(const sim::Utterance &u);

struct BackboneVars {
    struct Block {
        Var proj_w, proj_b, gamma, beta;
    };
    std::vector<Block> blocks;
    Var head_w, head_b;
};

struct AdapterVars {
    struct Block {
        Var down_w, down_b, up_w, up_b;
    };
    std::vector<Block> blocks;
};

/// Puts parameters on a tape, as named trainables or as constants.
BackboneVars bind(Tape &tape, const BackboneParams &p, bool trainable);
AdapterVars bind(Tape &tape, const AdapterParams &p, bool trainable);

/// Per-row gate values for a batch (one value per utterance, repeated).
std::vector<double> gate_rows(const Batch &batch, std::span<const double> per_utterance);

/// Log-probabilities N x (V+1). Without adapters: the backbone alone. With
/// adapters and no gate rows: ungated fusion H = H_b + H_a. With gate rows:
/// H = H_b + g * H_a.
Var forward(Tape &tape, const Batch &batch, const BackboneVars &backbone,
            const AdapterVars *adapters = nullptr,
            const std::vector<double> *gates = nullptr);

// Tape-free conveniences for evaluation and tests.

Tensor backbone_forward(const BackboneParams &p, const sim::Utterance &u);
/// H_a for one block's output.
Tensor adapter_forward(const Tensor &block_hidden, const AdapterBlock &a);
Tensor fused_forward(const BackboneParams &b, const AdapterParams &a, double gate,
                     const sim::Utterance &u);

struct GateScore {
    double value = 0.0;
    double cosine = 0.0;
    bool zero_norm = false;
};

double cosine(const Tensor &a, const Tensor &b, bool *zero_norm = nullptr);
double sigmoid(double x);
GateScore gating_score(const GatingParams &g, const sim::Utterance &u);

struct GateCalibration {
    GatingParams params;
    double target_mean_cos = 0.0;
    double non_target_mean_cos = 0.0;
    bool zero_gap = false; // means coincided; tau at the common value, s = 0.05
};

/// Centroid = mean target embedding; tau = midpoint of the mean target and
/// non-target cosines to it; s = max(0.01, gap / 4).
GateCalibration calibrate_gate(std::span<const Tensor> target_embeddings,
                               std::span<const Tensor> non_target_embeddings);

/// Per-frame argmax (ties to the lowest index), merge repeats, drop blanks.
std::string greedy_decode(const Tensor &log_probs, const sim::VocabSpec &vocab);

// ---------------------------------------------------------------------------

template <class Params, class F> void visit_named(Params &p, F &&f) {
    using Raw = std::remove_const_t<Params>;
    if constexpr (std::is_same_v<Raw, BackboneParams>) {
        for (std::size_t b = 0; b < p.blocks.size(); ++b) {
            const std::string pre = "backbone.block" + std::to_string(b) + ".";
            f(pre + "proj_w", p.blocks[b].proj_w);
            f(pre + "proj_b", p.blocks[b].proj_b);
            f(pre + "ln_gamma", p.blocks[b].ln_gamma);
            f(pre + "ln_beta", p.blocks[b].ln_beta);
        }
        f(std::string("backbone.head_w"), p.head_w);
        f(std::string("backbone.head_b"), p.head_b);
    } else {
        static_assert(std::is_same_v<Raw, AdapterParams>);
        for (std::size_t b = 0; b < p.blocks.size(); ++b) {
            const std::string pre = "adapter.block" + std::to_string(b) + ".";
            f(pre + "down_w", p.blocks[b].down_w);
            f(pre + "down_b", p.blocks[b].down_b);
            f(pre + "up_w", p.blocks[b].up_w);
            f(pre + "up_b", p.blocks[b].up_b);
        }
    }
}

} // namespace kdfip::model
