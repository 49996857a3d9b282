// SPDX-License-Identifier: Apache-2.0
#include "kdfip/model.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace kdfip::model {

namespace {

constexpr double kHeadInitScale = 0.5;

Tensor gaussian(rng::Stream &s, std::size_t rows, std::size_t cols, double stddev) {
    Tensor t({rows, cols});
    for (auto &v : t.data())
        v = s.normal() * stddev;
    return t;
}

Var broadcast_rows(Tape &tape, Var row, std::size_t n) {
    return tape.gather_rows(row, std::vector<std::size_t>(n, 0));
}

Var affine(Tape &tape, Var x, Var w, Var b) {
    const Var xw = tape.matmul(x, w);
    return tape.add(xw, broadcast_rows(tape, b, tape.value(xw).rows()));
}

Var context_stack(Tape &tape, const Batch &batch, Var x) {
    const Var parts[3] = {tape.gather_rows(x, batch.prev), x, tape.gather_rows(x, batch.next)};
    return tape.concat(parts, 1);
}

Tensor take_tensor(const ParamMap &m, const std::string &name, const Shape &shape) {
    auto it = m.find(name);
    if (it == m.end())
        throw std::invalid_argument("missing tensor '" + name + "'");
    if (it->second.shape() != shape)
        throw ShapeError("tensor '" + name + "' has shape " + shape_str(it->second.shape()) +
                         ", model expects " + shape_str(shape));
    return it->second;
}

} // namespace

void ModelConfig::validate() const {
    if (blocks == 0 || hidden == 0 || bottleneck == 0 || vocab_size == 0 || feature_dim == 0)
        throw std::invalid_argument("model sizes must all be positive");
}

BackboneParams init_backbone(const ModelConfig &cfg, rng::Key key) {
    cfg.validate();
    BackboneParams p;
    std::size_t in = cfg.feature_dim;
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
        rng::Stream s(key.child("backbone").child(b));
        BlockParams blk;
        const std::size_t fan_in = 3 * in;
        blk.proj_w = gaussian(s, fan_in, cfg.hidden, 1.0 / std::sqrt(static_cast<double>(fan_in)));
        blk.proj_b = Tensor({1, cfg.hidden});
        blk.ln_gamma = Tensor({1, cfg.hidden}, 1.0);
        blk.ln_beta = Tensor({1, cfg.hidden});
        p.blocks.push_back(std::move(blk));
        in = cfg.hidden;
    }
    rng::Stream s(key.child("backbone").child("head"));
    p.head_w = gaussian(s, cfg.hidden, cfg.classes(),
                        kHeadInitScale / std::sqrt(static_cast<double>(cfg.hidden)));
    p.head_b = Tensor({1, cfg.classes()});
    return p;
}

AdapterParams init_adapters(const ModelConfig &cfg, rng::Key key) {
    cfg.validate();
    AdapterParams p;
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
        rng::Stream s(key.child("adapter").child(b));
        AdapterBlock a;
        a.down_w = gaussian(s, cfg.hidden, cfg.bottleneck,
                            1.0 / std::sqrt(static_cast<double>(cfg.hidden)));
        a.down_b = Tensor({1, cfg.bottleneck});
        a.up_w = Tensor({cfg.bottleneck, cfg.hidden});
        a.up_b = Tensor({1, cfg.hidden});
        p.blocks.push_back(std::move(a));
    }
    return p;
}

ParamMap to_param_map(const BackboneParams &p) {
    ParamMap m;
    visit_named(p, [&](const std::string &name, const Tensor &t) { m.emplace(name, t); });
    return m;
}

ParamMap to_param_map(const AdapterParams &p) {
    ParamMap m;
    visit_named(p, [&](const std::string &name, const Tensor &t) { m.emplace(name, t); });
    return m;
}

ParamMap to_param_map(const ModelBundle &b) {
    ParamMap m = to_param_map(b.backbone);
    if (b.adapters)
        m.merge(to_param_map(*b.adapters));
    if (b.gate) {
        m.emplace("gate.centroid", b.gate->centroid);
        m.emplace("gate.tau", Tensor::scalar(b.gate->tau));
        m.emplace("gate.sharpness", Tensor::scalar(b.gate->sharpness));
    }
    return m;
}

void assign_from(BackboneParams &p, const ParamMap &m) {
    visit_named(p, [&](const std::string &name, Tensor &t) { t = take_tensor(m, name, t.shape()); });
}

void assign_from(AdapterParams &p, const ParamMap &m) {
    visit_named(p, [&](const std::string &name, Tensor &t) { t = take_tensor(m, name, t.shape()); });
}

ModelBundle bundle_from_map(const ModelConfig &cfg, const ParamMap &m) {
    ModelBundle b;
    b.backbone = init_backbone(cfg, rng::Key{0});
    assign_from(b.backbone, m);
    if (m.count("adapter.block0.down_w")) {
        AdapterParams a = init_adapters(cfg, rng::Key{0});
        assign_from(a, m);
        b.adapters = std::move(a);
    }
    if (m.count("gate.centroid")) {
        GatingParams g;
        g.centroid = take_tensor(m, "gate.centroid", {1, cfg.feature_dim});
        g.tau = take_tensor(m, "gate.tau", {1, 1}).item();
        g.sharpness = take_tensor(m, "gate.sharpness", {1, 1}).item();
        if (!(g.sharpness > 0.0))
            throw std::invalid_argument("gate.sharpness must be > 0");
        b.gate = std::move(g);
    }
    for (const auto &[name, t] : m) {
        const bool known = name.starts_with("backbone.") || name.starts_with("adapter.") ||
                           name.starts_with("gate.");
        if (!known)
            throw std::invalid_argument("unexpected tensor '" + name + "'");
    }
    return b;
}

namespace {

template <class Params> std::vector<double> flatten_impl(const Params &p) {
    std::vector<double> w;
    visit_named(p, [&](const std::string &, const Tensor &t) {
        w.insert(w.end(), t.data().begin(), t.data().end());
    });
    return w;
}

template <class Params> Params unflatten_impl(const Params &shape_like, std::span<const double> w) {
    Params p = shape_like;
    std::size_t pos = 0;
    visit_named(p, [&](const std::string &, Tensor &t) {
        if (pos + t.numel() > w.size())
            throw ShapeError("unflatten: vector too short");
        std::copy_n(w.begin() + static_cast<std::ptrdiff_t>(pos), t.numel(), t.data().begin());
        pos += t.numel();
    });
    if (pos != w.size())
        throw ShapeError("unflatten: vector too long");
    return p;
}

} // namespace

std::vector<double> flatten(const BackboneParams &p) { return flatten_impl(p); }
BackboneParams unflatten(const BackboneParams &s, std::span<const double> w) {
    return unflatten_impl(s, w);
}
std::vector<double> flatten(const AdapterParams &p) { return flatten_impl(p); }
AdapterParams unflatten(const AdapterParams &s, std::span<const double> w) {
    return unflatten_impl(s, w);
}

std::uint64_t params_hash(const ParamMap &m) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    auto feed = [&](const void *data, std::size_t n) {
        const auto *bytes = static_cast<const unsigned char *>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 0x100000001B3ULL;
        }
    };
    for (const auto &[name, t] : m) {
        feed(name.data(), name.size());
        feed(t.data().data(), t.numel() * sizeof(double));
    }
    return h;
}

Batch make_batch(std::span<const sim::Utterance *const> utts) {
    if (utts.empty())
        throw std::invalid_argument("make_batch: no utterances");
    const std::size_t D = utts.front()->features.cols();
    std::size_t N = 0;
    for (const auto *u : utts) {
        if (u->frames() == 0)
            throw std::invalid_argument("make_batch: empty utterance");
        if (u->features.cols() != D)
            throw ShapeError("make_batch: mixed feature dims");
        N += u->frames();
    }
    Batch b;
    b.features = Tensor({N, D});
    b.labels.reserve(N);
    b.prev.resize(N);
    b.next.resize(N);
    std::size_t row = 0;
    for (const auto *u : utts) {
        b.offsets.push_back(row);
        const std::size_t T = u->frames();
        std::copy(u->features.data().begin(), u->features.data().end(),
                  b.features.data().begin() + static_cast<std::ptrdiff_t>(row * D));
        b.labels.insert(b.labels.end(), u->frame_labels.begin(), u->frame_labels.end());
        for (std::size_t t = 0; t < T; ++t) {
            b.prev[row + t] = row + (t == 0 ? 0 : t - 1);
            b.next[row + t] = row + (t + 1 == T ? t : t + 1);
        }
        row += T;
    }
    b.offsets.push_back(N);
    return b;
}

Batch make_batch(const sim::Utterance &u) {
    const sim::Utterance *one[] = {&u};
    return make_batch(one);
}

BackboneVars bind(Tape &tape, const BackboneParams &p, bool trainable) {
    auto put = [&](const std::string &name, const Tensor &t) {
        return trainable ? tape.param(name, t) : tape.constant(t);
    };
    BackboneVars v;
    for (std::size_t b = 0; b < p.blocks.size(); ++b) {
        const std::string pre = "backbone.block" + std::to_string(b) + ".";
        const auto &blk = p.blocks[b];
        v.blocks.push_back({put(pre + "proj_w", blk.proj_w), put(pre + "proj_b", blk.proj_b),
                            put(pre + "ln_gamma", blk.ln_gamma), put(pre + "ln_beta", blk.ln_beta)});
    }
    v.head_w = put("backbone.head_w", p.head_w);
    v.head_b = put("backbone.head_b", p.head_b);
    return v;
}

AdapterVars bind(Tape &tape, const AdapterParams &p, bool trainable) {
    auto put = [&](const std::string &name, const Tensor &t) {
        return trainable ? tape.param(name, t) : tape.constant(t);
    };
    AdapterVars v;
    for (std::size_t b = 0; b < p.blocks.size(); ++b) {
        const std::string pre = "adapter.block" + std::to_string(b) + ".";
        const auto &a = p.blocks[b];
        v.blocks.push_back({put(pre + "down_w", a.down_w), put(pre + "down_b", a.down_b),
                            put(pre + "up_w", a.up_w), put(pre + "up_b", a.up_b)});
    }
    return v;
}

std::vector<double> gate_rows(const Batch &batch, std::span<const double> per_utterance) {
    if (per_utterance.size() != batch.utterances())
        throw ShapeError("gate_rows: " + std::to_string(per_utterance.size()) + " gates for " +
                         std::to_string(batch.utterances()) + " utterances");
    std::vector<double> rows(batch.rows());
    for (std::size_t u = 0; u < batch.utterances(); ++u)
        for (std::size_t r = batch.offsets[u]; r < batch.offsets[u + 1]; ++r)
            rows[r] = per_utterance[u];
    return rows;
}

Var forward(Tape &tape, const Batch &batch, const BackboneVars &backbone,
            const AdapterVars *adapters, const std::vector<double> *gates) {
    if (adapters && adapters->blocks.size() != backbone.blocks.size())
        throw ShapeError("forward: adapter count differs from block count");
    const std::size_t N = batch.rows();
    if (tape.value(backbone.blocks.at(0).proj_w).rows() != 3 * batch.features.cols())
        throw ShapeError("forward: feature dim " + std::to_string(batch.features.cols()) +
                         " does not match model input " +
                         shape_str(tape.value(backbone.blocks[0].proj_w).shape()));
    if (gates && gates->size() != N)
        throw ShapeError("forward: gate rows do not match batch rows");

    Var h = tape.constant(batch.features);
    for (std::size_t b = 0; b < backbone.blocks.size(); ++b) {
        const auto &blk = backbone.blocks[b];
        const Var z = affine(tape, context_stack(tape, batch, h), blk.proj_w, blk.proj_b);
        const Var normed = tape.layer_norm(tape.tanh(z));
        const Var hb = tape.add(tape.mul(normed, broadcast_rows(tape, blk.gamma, N)),
                                broadcast_rows(tape, blk.beta, N));
        h = hb;
        if (adapters) {
            const auto &ad = adapters->blocks[b];
            const Var down = tape.tanh(affine(tape, hb, ad.down_w, ad.down_b));
            Var ha = affine(tape, down, ad.up_w, ad.up_b);
            if (gates) {
                const std::size_t H = tape.value(ha).cols();
                Tensor g({N, H});
                for (std::size_t r = 0; r < N; ++r)
                    for (std::size_t c = 0; c < H; ++c)
                        g.at(r, c) = (*gates)[r];
                ha = tape.mul(tape.constant(std::move(g)), ha);
            }
            h = tape.add(hb, ha);
        }
    }
    return tape.log_softmax(affine(tape, h, backbone.head_w, backbone.head_b));
}

Tensor backbone_forward(const BackboneParams &p, const sim::Utterance &u) {
    Tape tape;
    const Batch batch = make_batch(u);
    return tape.value(forward(tape, batch, bind(tape, p, false)));
}

Tensor adapter_forward(const Tensor &block_hidden, const AdapterBlock &a) {
    Tape tape;
    const Var x = tape.constant(block_hidden);
    const std::size_t N = block_hidden.rows();
    const Var down = tape.tanh(tape.add(tape.matmul(x, tape.constant(a.down_w)),
                                        broadcast_rows(tape, tape.constant(a.down_b), N)));
    return tape.value(tape.add(tape.matmul(down, tape.constant(a.up_w)),
                               broadcast_rows(tape, tape.constant(a.up_b), N)));
}

Tensor fused_forward(const BackboneParams &b, const AdapterParams &a, double gate,
                     const sim::Utterance &u) {
    if (!(gate >= 0.0 && gate <= 1.0))
        throw std::invalid_argument("fused_forward: gate must lie in [0, 1]");
    Tape tape;
    const Batch batch = make_batch(u);
    const auto bv = bind(tape, b, false);
    const auto av = bind(tape, a, false);
    const std::vector<double> rows(batch.rows(), gate);
    return tape.value(forward(tape, batch, bv, &av, &rows));
}

double sigmoid(double x) {
    if (x >= 0.0)
        return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double cosine(const Tensor &a, const Tensor &b, bool *zero_norm) {
    if (a.numel() != b.numel())
        throw ShapeError("cosine: size mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const bool zero = na == 0.0 || nb == 0.0;
    if (zero_norm)
        *zero_norm = zero;
    return zero ? 0.0 : dot / (std::sqrt(na) * std::sqrt(nb));
}

GateScore gating_score(const GatingParams &g, const sim::Utterance &u) {
    if (!(g.sharpness > 0.0))
        throw std::invalid_argument("gating_score: sharpness must be > 0");
    GateScore s;
    s.cosine = cosine(sim::utterance_embedding(u), g.centroid, &s.zero_norm);
    s.value = sigmoid((s.cosine - g.tau) / g.sharpness);
    return s;
}

GateCalibration calibrate_gate(std::span<const Tensor> target, std::span<const Tensor> non_target) {
    if (target.empty())
        throw std::invalid_argument("calibrate_gate: empty target set");
    if (non_target.empty())
        throw std::invalid_argument("calibrate_gate: empty non-target set");
    GateCalibration cal;
    Tensor centroid(target.front().shape());
    for (const auto &e : target)
        for (std::size_t i = 0; i < e.numel(); ++i)
            centroid[i] += e[i];
    for (auto &v : centroid.data())
        v /= static_cast<double>(target.size());

    auto mean_cos = [&](std::span<const Tensor> set) {
        double s = 0.0;
        for (const auto &e : set)
            s += cosine(e, centroid);
        return s / static_cast<double>(set.size());
    };
    cal.target_mean_cos = mean_cos(target);
    cal.non_target_mean_cos = mean_cos(non_target);
    cal.params.centroid = std::move(centroid);
    const double gap = cal.target_mean_cos - cal.non_target_mean_cos;
    cal.params.tau = 0.5 * (cal.target_mean_cos + cal.non_target_mean_cos);
    if (gap == 0.0) {
        cal.zero_gap = true;
        cal.params.sharpness = 0.05;
    } else {
        cal.params.sharpness = std::max(0.01, std::abs(gap) / 4.0);
    }
    return cal;
}

std::string greedy_decode(const Tensor &log_probs, const sim::VocabSpec &vocab) {
    const std::size_t T = log_probs.rows(), C = log_probs.cols();
    if (T == 0)
        throw std::invalid_argument("greedy_decode: no frames");
    if (C != vocab.size() + 1)
        throw ShapeError("greedy_decode: " + std::to_string(C) + " classes for vocab of " +
                         std::to_string(vocab.size()));
    std::string out;
    std::size_t prev = C;
    for (std::size_t t = 0; t < T; ++t) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c)
            if (log_probs.at(t, c) > log_probs.at(t, best))
                best = c;
        if (best != prev && best != vocab.blank())
            out.push_back(vocab.characters[best]);
        prev = best;
    }
    return out;
}

} // namespace kdfip::model
