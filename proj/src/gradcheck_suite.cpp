// SPDX-License-Identifier: Apache-2.0
#include "kdfip/gradcheck_suite.hpp"

#include <array>
#include <chrono>
#include <cmath>
#include <stdexcept>

#include "kdfip/losses.hpp"
#include "kdfip/model.hpp"
#include "kdfip/rng.hpp"
#include "kdfip/sim.hpp"

namespace kdfip {

namespace {

using Vars = std::map<std::string, Var>;

Tensor random_tensor(rng::Key key, Shape shape, double scale) {
    rng::Stream s(key);
    Tensor t(std::move(shape));
    for (auto &x : t.data())
        x = scale * s.normal();
    return t;
}

/// Entries with |x| >= 0.2 so relu and finite differences never straddle the kink.
Tensor away_from_zero(rng::Key key, Shape shape) {
    rng::Stream s(key);
    Tensor t(std::move(shape));
    for (auto &x : t.data()) {
        const double m = 0.2 + s.uniform();
        x = s.bernoulli(0.5) ? m : -m;
    }
    return t;
}

/// Scalar read-out of a matrix: mean over all entries of y * r.
Var project(Tape &tape, Var y, const Tensor &r) {
    const Var w = tape.constant(r);
    return tape.mean(tape.mean(tape.mul(y, w), 1), 0);
}

Tensor readout_for(rng::Key key, std::size_t rows, std::size_t cols) {
    return random_tensor(key, {rows, cols}, 1.0);
}

struct PrimitiveCase {
    std::string name;
    ParamMap params;
    LossClosure closure;
};

std::vector<PrimitiveCase> primitive_cases() {
    const rng::Key k = rng::Key{2024}.child("gradcheck");
    std::vector<PrimitiveCase> out;

    {
        const Tensor r = readout_for(k.child("matmul.r"), 4, 5);
        out.push_back({"matmul",
                       {{"a", random_tensor(k.child("matmul.a"), {4, 3}, 1.0)},
                        {"b", random_tensor(k.child("matmul.b"), {3, 5}, 1.0)}},
                       [r](Tape &t, const Vars &v) {
                           return project(t, t.matmul(v.at("a"), v.at("b")), r);
                       }});
    }
    {
        const Tensor r = readout_for(k.child("add.r"), 3, 4);
        out.push_back({"add",
                       {{"a", random_tensor(k.child("add.a"), {3, 4}, 1.0)},
                        {"b", random_tensor(k.child("add.b"), {3, 4}, 1.0)}},
                       [r](Tape &t, const Vars &v) {
                           return project(t, t.add(v.at("a"), v.at("b")), r);
                       }});
    }
    {
        const Tensor r = readout_for(k.child("mul.r"), 3, 4);
        out.push_back({"mul",
                       {{"a", random_tensor(k.child("mul.a"), {3, 4}, 1.0)},
                        {"b", random_tensor(k.child("mul.b"), {3, 4}, 1.0)}},
                       [r](Tape &t, const Vars &v) {
                           return project(t, t.mul(v.at("a"), v.at("b")), r);
                       }});
    }
    {
        const Tensor r = readout_for(k.child("relu.r"), 4, 4);
        out.push_back({"relu",
                       {{"x", away_from_zero(k.child("relu.x"), {4, 4})}},
                       [r](Tape &t, const Vars &v) { return project(t, t.relu(v.at("x")), r); }});
    }
    {
        const Tensor r = readout_for(k.child("tanh.r"), 3, 4);
        out.push_back({"tanh",
                       {{"x", random_tensor(k.child("tanh.x"), {3, 4}, 1.0)}},
                       [r](Tape &t, const Vars &v) { return project(t, t.tanh(v.at("x")), r); }});
    }
    {
        const Tensor r = readout_for(k.child("layer_norm.r"), 3, 6);
        out.push_back({"layer_norm",
                       {{"x", random_tensor(k.child("layer_norm.x"), {3, 6}, 1.0)}},
                       [r](Tape &t, const Vars &v) {
                           return project(t, t.layer_norm(v.at("x")), r);
                       }});
    }
    {
        const Tensor r = readout_for(k.child("softmax.r"), 3, 5);
        out.push_back({"softmax",
                       {{"x", random_tensor(k.child("softmax.x"), {3, 5}, 1.0)}},
                       [r](Tape &t, const Vars &v) { return project(t, t.softmax(v.at("x")), r); }});
    }
    {
        const Tensor r = readout_for(k.child("log_softmax.r"), 3, 5);
        out.push_back({"log_softmax",
                       {{"x", random_tensor(k.child("log_softmax.x"), {3, 5}, 1.0)}},
                       [r](Tape &t, const Vars &v) {
                           return project(t, t.log_softmax(v.at("x")), r);
                       }});
    }
    {
        // Repeated and skipped rows: gradients accumulate and vanish respectively.
        const Tensor r = readout_for(k.child("gather_rows.r"), 5, 3);
        out.push_back({"gather_rows",
                       {{"x", random_tensor(k.child("gather_rows.x"), {4, 3}, 1.0)}},
                       [r](Tape &t, const Vars &v) {
                           return project(t, t.gather_rows(v.at("x"), {0, 2, 2, 3, 0}), r);
                       }});
    }
    {
        const Tensor r = readout_for(k.child("mean0.r"), 1, 4);
        out.push_back({"mean_axis0",
                       {{"x", random_tensor(k.child("mean0.x"), {3, 4}, 1.0)}},
                       [r](Tape &t, const Vars &v) { return project(t, t.mean(v.at("x"), 0), r); }});
    }
    {
        const Tensor r = readout_for(k.child("mean1.r"), 3, 1);
        out.push_back({"mean_axis1",
                       {{"x", random_tensor(k.child("mean1.x"), {3, 4}, 1.0)}},
                       [r](Tape &t, const Vars &v) { return project(t, t.mean(v.at("x"), 1), r); }});
    }
    {
        const Tensor r = readout_for(k.child("concat0.r"), 5, 3);
        out.push_back({"concat_axis0",
                       {{"a", random_tensor(k.child("concat0.a"), {2, 3}, 1.0)},
                        {"b", random_tensor(k.child("concat0.b"), {3, 3}, 1.0)}},
                       [r](Tape &t, const Vars &v) {
                           const std::array<Var, 2> xs{v.at("a"), v.at("b")};
                           return project(t, t.concat(xs, 0), r);
                       }});
    }
    {
        const Tensor r = readout_for(k.child("concat1.r"), 3, 5);
        out.push_back({"concat_axis1",
                       {{"a", random_tensor(k.child("concat1.a"), {3, 2}, 1.0)},
                        {"b", random_tensor(k.child("concat1.b"), {3, 3}, 1.0)}},
                       [r](Tape &t, const Vars &v) {
                           const std::array<Var, 2> xs{v.at("a"), v.at("b")};
                           return project(t, t.concat(xs, 1), r);
                       }});
    }
    {
        const Tensor r = readout_for(k.child("scale.r"), 3, 4);
        out.push_back({"scale",
                       {{"x", random_tensor(k.child("scale.x"), {3, 4}, 1.0)}},
                       [r](Tape &t, const Vars &v) { return project(t, t.scale(v.at("x"), -1.7), r); }});
    }
    return out;
}

model::BackboneVars backbone_vars(const Vars &v, std::size_t blocks) {
    model::BackboneVars out;
    for (std::size_t b = 0; b < blocks; ++b) {
        const std::string pre = "backbone.block" + std::to_string(b) + ".";
        out.blocks.push_back({v.at(pre + "proj_w"), v.at(pre + "proj_b"), v.at(pre + "ln_gamma"),
                              v.at(pre + "ln_beta")});
    }
    out.head_w = v.at("backbone.head_w");
    out.head_b = v.at("backbone.head_b");
    return out;
}

model::AdapterVars adapter_vars(const Vars &v, std::size_t blocks) {
    model::AdapterVars out;
    for (std::size_t b = 0; b < blocks; ++b) {
        const std::string pre = "adapter.block" + std::to_string(b) + ".";
        out.blocks.push_back(
            {v.at(pre + "down_w"), v.at(pre + "down_b"), v.at(pre + "up_w"), v.at(pre + "up_b")});
    }
    return out;
}

/// Perturbs every tensor so no parameter sits at an initialisation constant
/// (zero up-projections would make half the adapter gradients vanish).
template <class Params> Params jittered(Params p, rng::Key key, double scale) {
    std::uint64_t i = 0;
    model::visit_named(p, [&](const std::string &, Tensor &t) {
        rng::Stream s(key.child(i++));
        for (auto &x : t.data())
            x += scale * s.normal();
    });
    return p;
}

Tensor teacher_log_probs(const model::BackboneParams &b, const model::AdapterParams &a,
                         const model::Batch &batch) {
    Tape tape;
    const auto bv = model::bind(tape, b, false);
    const auto av = model::bind(tape, a, false);
    return tape.value(model::forward(tape, batch, bv, &av));
}

struct StageFixture {
    model::ModelConfig mc;
    model::BackboneParams backbone;
    model::AdapterParams adapters;
    model::AdapterParams teacher_adapters;
    sim::Corpus generic, personal, synthetic;
};

StageFixture stage_fixture() {
    sim::SimConfig sc;
    sc.vocab_size = 3;
    sc.feature_dim = 3;
    sc.generic_speakers = 2;
    sc.targets = 1;
    sc.generic_train = 2;
    sc.personal_train = 2;
    sc.synthetic = 2;
    sc.text_pool = 8;
    sc.min_len = 2;
    sc.max_len = 3;
    const sim::World world = sim::World::build(7, sc);

    StageFixture f;
    f.mc.blocks = 2;
    f.mc.hidden = 5;
    f.mc.bottleneck = 2;
    f.mc.vocab_size = sc.vocab_size;
    f.mc.feature_dim = sc.feature_dim;
    const rng::Key k = rng::Key{7}.child("gradcheck");
    f.backbone = jittered(model::init_backbone(f.mc, k.child("backbone")), k.child("jb"), 0.1);
    f.adapters = jittered(model::init_adapters(f.mc, k.child("adapters")), k.child("ja"), 0.3);
    f.teacher_adapters =
        jittered(model::init_adapters(f.mc, k.child("teacher")), k.child("jt"), 0.3);
    f.generic = sim::gen_corpus(world, sim::generic_request(world, sim::Split::Train));
    f.personal = sim::gen_corpus(world, sim::personal_request(world, 0, sim::Split::Train));
    f.synthetic = sim::gen_corpus(world, sim::synthetic_request(world, 0, world.default_corruption()));
    return f;
}

model::Batch whole(const sim::Corpus &c) {
    std::vector<const sim::Utterance *> ptrs;
    for (const auto &u : c.utterances)
        ptrs.push_back(&u);
    return model::make_batch(ptrs);
}

GradcheckCase check(std::string name, const LossClosure &closure, const ParamMap &params,
                    double h) {
    return {std::move(name), finite_diff_gradcheck(closure, params, h)};
}

} // namespace

double GradcheckSuiteReport::max_rel_error() const {
    double m = 0.0;
    for (const auto &c : cases)
        m = std::max(m, c.result.max_rel_error);
    return m;
}

const GradcheckCase &GradcheckSuiteReport::worst() const {
    if (cases.empty())
        throw std::logic_error("gradcheck suite: no cases");
    const GradcheckCase *w = &cases.front();
    for (const auto &c : cases)
        if (c.result.max_rel_error > w->result.max_rel_error)
            w = &c;
    return *w;
}

GradcheckSuiteReport run_gradcheck_suite(double h) {
    const auto t0 = std::chrono::steady_clock::now();
    GradcheckSuiteReport report;
    report.h = h;
    for (const auto &c : primitive_cases())
        report.cases.push_back(check(c.name, c.closure, c.params, h));

    const StageFixture f = stage_fixture();
    const std::size_t nb = f.mc.blocks;
    const double beta = 0.5; // large enough that the KL term shows in the gradient
    const model::Batch generic = whole(f.generic);
    const model::Batch personal = whole(f.personal);
    const model::Batch synthetic = whole(f.synthetic);

    // Stage 1: CE on generic data, backbone trainable.
    report.cases.push_back(check(
        "stage1",
        [&](Tape &t, const Vars &v) {
            const auto bv = backbone_vars(v, nb);
            return train::ce_frame_loss(t, model::forward(t, generic, bv), generic.labels);
        },
        model::to_param_map(f.backbone), h));

    // Stage 2: CE on personal data, adapters trainable, ungated fusion.
    report.cases.push_back(check(
        "stage2",
        [&](Tape &t, const Vars &v) {
            const auto bv = model::bind(t, f.backbone, false);
            const auto av = adapter_vars(v, nb);
            return train::ce_frame_loss(t, model::forward(t, personal, bv, &av), personal.labels);
        },
        model::to_param_map(f.adapters), h));

    // Stage 3: CE on synthetic + beta * KL on personal against a frozen teacher.
    const Tensor stage2_teacher = teacher_log_probs(f.backbone, f.teacher_adapters, personal);
    report.cases.push_back(check(
        "stage3",
        [&](Tape &t, const Vars &v) {
            const auto bv = model::bind(t, f.backbone, false);
            const auto av = adapter_vars(v, nb);
            const Var ce = train::ce_frame_loss(t, model::forward(t, synthetic, bv, &av),
                                                synthetic.labels);
            const Var kl = train::kl_frame_loss(t, stage2_teacher,
                                                model::forward(t, personal, bv, &av));
            return train::hybrid_loss(t, ce, kl, beta).total;
        },
        model::to_param_map(f.adapters), h));

    // Stage 4: gated student, backbone trainable, CE on generic + beta * KL on
    // personal against the ungated teacher.
    const Tensor stage3_teacher = teacher_log_probs(f.backbone, f.adapters, personal);
    const std::vector<double> generic_gates = model::gate_rows(generic, std::vector<double>{0.2, 0.35});
    const std::vector<double> personal_gates = model::gate_rows(personal, std::vector<double>{0.9, 0.6});
    report.cases.push_back(check(
        "stage4",
        [&](Tape &t, const Vars &v) {
            const auto bv = backbone_vars(v, nb);
            const auto av = model::bind(t, f.adapters, false);
            const Var ce = train::ce_frame_loss(
                t, model::forward(t, generic, bv, &av, &generic_gates), generic.labels);
            const Var kl = train::kl_frame_loss(
                t, stage3_teacher, model::forward(t, personal, bv, &av, &personal_gates));
            return train::hybrid_loss(t, ce, kl, beta).total;
        },
        model::to_param_map(f.backbone), h));

    report.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

} // namespace kdfip
