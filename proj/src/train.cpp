// SPDX-License-Identifier: Apache-2.0
#include "kdfip/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

#include "kdfip/losses.hpp"
#include "kdfip/optim.hpp"

namespace kdfip::train {

using model::ModelBundle;

void StageConfig::validate() const {
    if (!(beta >= 0.0))
        throw std::invalid_argument("beta ≥ 0 violated (beta = " + std::to_string(beta) + ")");
    if (!(lr > 0.0))
        throw std::invalid_argument("lr > 0 violated (lr = " + std::to_string(lr) + ")");
    if (batch_size == 0)
        throw std::invalid_argument("batch_size >= 1 violated");
}

double StageConfig::lr_at(std::size_t step, std::size_t total_steps) const {
    if (schedule == LrSchedule::Constant || total_steps == 0)
        return lr;
    return lr * (1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
}

std::string_view to_string(LrSchedule s) {
    return s == LrSchedule::Linear ? "linear" : "constant";
}

LrSchedule parse_schedule(std::string_view s) {
    if (s == "linear")
        return LrSchedule::Linear;
    if (s == "constant")
        return LrSchedule::Constant;
    throw std::invalid_argument("unknown lr schedule '" + std::string(s) + "'");
}

std::string_view to_string(Method m) {
    switch (m) {
    case Method::KDFIP: return "KDFIP";
    case Method::FT: return "FT";
    case Method::Adapter: return "Adapter";
    case Method::PGA: return "PGA";
    case Method::FIP: return "FIP";
    }
    return "?";
}

Method parse_method(std::string_view s) {
    for (Method m : {Method::KDFIP, Method::FT, Method::Adapter, Method::PGA, Method::FIP})
        if (s == to_string(m))
            return m;
    throw std::invalid_argument("unknown method '" + std::string(s) +
                                "' (expected KDFIP, FT, Adapter, PGA or FIP)");
}

void MethodSpec::validate() const {
    auto reject = [&](const char *why) {
        throw std::invalid_argument(std::string(to_string(method)) + ": " + why);
    };
    switch (method) {
    case Method::KDFIP:
        if (!(use_personal && use_synthetic && use_generic))
            reject("KDFIP uses D_per, D_syn and D_g");
        break;
    case Method::FT:
    case Method::Adapter:
        if (!use_personal)
            reject("requires D_per");
        if (use_generic)
            reject("does not train on D_g");
        break;
    case Method::PGA:
        if (!(use_personal && use_generic))
            reject("requires D_per and D_g");
        break;
    case Method::FIP:
        if (!(use_personal && use_generic))
            reject("requires D_per (CE) and D_g (KL)");
        break;
    }
}

std::string MethodSpec::data_flags() const {
    std::string s;
    auto add = [&](bool on, const char *name) {
        if (on)
            s += (s.empty() ? "" : "+") + std::string(name);
    };
    add(use_generic && method == Method::PGA, "D_g");
    add(use_personal, "D_per");
    add(use_synthetic, "D_syn");
    return s.empty() ? "N/A" : s;
}

std::string TrainReport::to_csv() const {
    std::string out = "step,stage,loss_ce,loss_kl,total,lr\n";
    char buf[256];
    for (const auto &r : steps) {
        std::snprintf(buf, sizeof buf, "%zu,%s,%.17g,%.17g,%.17g,%.17g\n", r.step, r.stage.c_str(),
                      r.loss_ce, r.loss_kl, r.total, r.lr);
        out += buf;
    }
    return out;
}

std::vector<double> corpus_gates(const model::GatingParams &gate, const sim::Corpus &corpus) {
    std::vector<double> g;
    g.reserve(corpus.size());
    for (const auto &u : corpus.utterances)
        g.push_back(model::gating_score(gate, u).value);
    return g;
}

rng::Key adapter_init_key(const StageConfig &cfg) {
    return rng::Key{cfg.seed}.child("adapter-init");
}

namespace {

struct Pool {
    std::vector<const sim::Utterance *> utts;
    std::vector<double> gates; // empty unless gated
};

Pool make_pool(const std::vector<const sim::Corpus *> &data, const model::GatingParams *gate) {
    Pool p;
    for (const auto *c : data) {
        if (!c)
            throw std::invalid_argument("training data pointer is null");
        for (const auto &u : c->utterances) {
            p.utts.push_back(&u);
            if (gate)
                p.gates.push_back(model::gating_score(*gate, u).value);
        }
    }
    return p;
}

struct Picked {
    std::vector<const sim::Utterance *> utts;
    std::vector<double> gates;
};

Picked pick(const Pool &pool, const std::vector<std::size_t> &order, std::size_t begin,
            std::size_t end) {
    Picked out;
    for (std::size_t i = begin; i < end; ++i) {
        out.utts.push_back(pool.utts[order[i]]);
        if (!pool.gates.empty())
            out.gates.push_back(pool.gates[order[i]]);
    }
    return out;
}

/// Cycles through a pool in freshly shuffled rounds.
class KlCursor {
  public:
    KlCursor(const Pool &pool, rng::Key key) : pool_(pool), key_(key) {}

    Picked next(std::size_t n) {
        Picked out;
        while (out.utts.size() < n) {
            if (pos_ == order_.size())
                reshuffle();
            const std::size_t idx = order_[pos_++];
            out.utts.push_back(pool_.utts[idx]);
            if (!pool_.gates.empty())
                out.gates.push_back(pool_.gates[idx]);
        }
        return out;
    }

  private:
    void reshuffle() {
        order_.resize(pool_.utts.size());
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        rng::Stream(key_.child(round_++)).shuffle(order_);
        pos_ = 0;
    }

    const Pool &pool_;
    rng::Key key_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
    std::uint64_t round_ = 0;
};

struct BoundModel {
    model::BackboneVars backbone;
    std::optional<model::AdapterVars> adapters;
};

BoundModel bind_model(Tape &tape, const ModelBundle &m, std::optional<Part> trainable) {
    BoundModel b{model::bind(tape, m.backbone, trainable == Part::Backbone), std::nullopt};
    if (m.adapters)
        b.adapters = model::bind(tape, *m.adapters, trainable == Part::Adapters);
    return b;
}

Var run_forward(Tape &tape, const BoundModel &bm, const model::Batch &batch, GateMode mode,
                const std::vector<double> &gates) {
    const model::AdapterVars *ad = bm.adapters ? &*bm.adapters : nullptr;
    if (mode == GateMode::Gated && ad) {
        const auto rows = model::gate_rows(batch, gates);
        return model::forward(tape, batch, bm.backbone, ad, &rows);
    }
    return model::forward(tape, batch, bm.backbone, ad, nullptr);
}

Tensor teacher_log_probs(const ModelBundle &teacher, GateMode mode, const model::Batch &batch,
                         const std::vector<const sim::Utterance *> &utts) {
    Tape tape;
    const BoundModel bm = bind_model(tape, teacher, std::nullopt);
    std::vector<double> gates;
    if (mode == GateMode::Gated && teacher.adapters) {
        for (const auto *u : utts)
            gates.push_back(model::gating_score(*teacher.gate, *u).value);
    }
    return tape.value(run_forward(tape, bm, batch, mode, gates));
}

} // namespace

TrainResult run_plan(const TrainPlan &plan, const StepObserver &observer) {
    const auto started = std::chrono::steady_clock::now();
    plan.cfg.validate();
    if (plan.trainable == Part::Adapters && !plan.student.adapters)
        throw std::invalid_argument(plan.label + ": adapters are trainable but absent");
    const bool student_gated = plan.student_mode == GateMode::Gated && plan.student.adapters;
    if (student_gated && !plan.student.gate)
        throw std::invalid_argument(plan.label + ": gated student without a calibrated gate");

    const Pool ce_pool = make_pool(plan.ce_data, student_gated ? &*plan.student.gate : nullptr);
    if (ce_pool.utts.empty())
        throw std::invalid_argument(plan.label + ": new-task training data is empty");

    const bool with_kl = plan.use_kl && !plan.kl_data.empty();
    Pool kl_pool;
    if (with_kl) {
        if (!plan.teacher)
            throw std::invalid_argument(plan.label + ": KL term requires a teacher");
        if (plan.teacher_mode == GateMode::Gated && plan.teacher->adapters && !plan.teacher->gate)
            throw std::invalid_argument(plan.label + ": gated teacher without a gate");
        kl_pool = make_pool(plan.kl_data, student_gated ? &*plan.student.gate : nullptr);
        if (kl_pool.utts.empty())
            throw std::invalid_argument(plan.label + ": old-task (KL) data is empty");
    }

    TrainResult result;
    result.model = plan.student;
    result.report.stage = plan.label;
    result.report.beta = plan.cfg.beta;
    ModelBundle &student = result.model;

    AdamState adam;
    const rng::Key seed{plan.cfg.seed};
    KlCursor kl_cursor(kl_pool, seed.child("kl"));
    std::size_t step = 0;
    const std::size_t n = ce_pool.utts.size();
    const std::size_t bs = plan.cfg.batch_size;
    const std::size_t total_steps = plan.cfg.epochs * ((n + bs - 1) / bs);

    for (std::size_t epoch = 0; epoch < plan.cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng::Stream(seed.child("ce").child(epoch)).shuffle(order);

        for (std::size_t begin = 0; begin < n; begin += bs) {
            const std::size_t end = std::min(n, begin + bs);
            const Picked ce_pick = pick(ce_pool, order, begin, end);
            const model::Batch ce_batch = model::make_batch(ce_pick.utts);

            Tape tape;
            const BoundModel bm = bind_model(tape, student, plan.trainable);
            HybridLoss loss;
            try {
                const Var ce_lp = run_forward(tape, bm, ce_batch, plan.student_mode, ce_pick.gates);
                const Var ce = ce_frame_loss(tape, ce_lp, ce_batch.labels);
                Var kl;
                if (with_kl) {
                    const Picked kl_pick = kl_cursor.next(bs);
                    const model::Batch kl_batch = model::make_batch(kl_pick.utts);
                    const Tensor target =
                        teacher_log_probs(*plan.teacher, plan.teacher_mode, kl_batch, kl_pick.utts);
                    const Var s_lp = run_forward(tape, bm, kl_batch, plan.student_mode, kl_pick.gates);
                    kl = kl_frame_loss(tape, target, s_lp);
                }
                loss = hybrid_loss(tape, ce, kl, plan.cfg.beta);
            } catch (const NonFiniteError &e) {
                throw NonFiniteError(plan.label + ": divergence at step " + std::to_string(step) +
                                     " (" + e.what() + ")");
            }

            StepRecord rec;
            rec.step = step;
            rec.stage = plan.label;
            rec.loss_ce = tape.value(loss.ce).item();
            rec.loss_kl = loss.kl.valid() ? tape.value(loss.kl).item() : 0.0;
            rec.total = tape.value(loss.total).item();
            rec.lr = plan.cfg.lr_at(step, total_steps);
            if (!std::isfinite(rec.total))
                throw NonFiniteError(plan.label + ": non-finite loss at step " + std::to_string(step));
            if (step == 0 && loss.kl.valid())
                result.report.initial_kl = rec.loss_kl;
            result.report.steps.push_back(rec);

            const Gradients grads = tape.backward(loss.total);
            if (plan.trainable == Part::Backbone) {
                ParamMap p = model::to_param_map(student.backbone);
                adam_step(p, grads.by_name, adam, rec.lr);
                model::assign_from(student.backbone, p);
            } else {
                ParamMap p = model::to_param_map(*student.adapters);
                adam_step(p, grads.by_name, adam, rec.lr);
                model::assign_from(*student.adapters, p);
            }
            if (observer)
                observer(step, student);
            ++step;
        }
    }
    result.report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return result;
}

TrainResult train_stage1(const model::ModelConfig &mc, const StageConfig &cfg,
                         const sim::Corpus &generic) {
    if (generic.empty())
        throw std::invalid_argument("stage 1: generic corpus is empty");
    TrainPlan plan;
    plan.label = "1";
    plan.cfg = cfg;
    plan.student.backbone = model::init_backbone(mc, rng::Key{cfg.seed}.child("backbone-init"));
    plan.trainable = Part::Backbone;
    plan.ce_data = {&generic};
    return run_plan(plan);
}

TrainResult train_stage2(const model::ModelConfig &mc, const StageConfig &cfg,
                         const model::BackboneParams &backbone, const sim::Corpus &personal) {
    TrainPlan plan;
    plan.label = "2";
    plan.cfg = cfg;
    plan.student.backbone = backbone;
    plan.student.adapters = model::init_adapters(mc, adapter_init_key(cfg));
    plan.trainable = Part::Adapters;
    plan.student_mode = GateMode::Ungated;
    plan.ce_data = {&personal};
    return run_plan(plan);
}

TrainResult train_stage3(const StageConfig &cfg, const ModelBundle &stage2,
                         const sim::Corpus &synthetic, const sim::Corpus &personal, bool use_kl) {
    if (!stage2.adapters)
        throw std::invalid_argument("stage 3: the Stage 2 model has no adapters");
    if (synthetic.empty())
        throw std::invalid_argument("stage 3: synthetic corpus is empty");
    TrainPlan plan;
    plan.label = "3";
    plan.cfg = cfg;
    plan.student.backbone = stage2.backbone;
    plan.student.adapters = stage2.adapters;
    plan.trainable = Part::Adapters;
    plan.student_mode = GateMode::Ungated;
    plan.ce_data = {&synthetic};
    plan.kl_data = {&personal};
    plan.teacher = ModelBundle{stage2.backbone, stage2.adapters, std::nullopt};
    plan.teacher_mode = GateMode::Ungated;
    plan.use_kl = use_kl;
    return run_plan(plan);
}

TrainResult train_stage4(const StageConfig &cfg, const ModelBundle &stage3,
                         const sim::Corpus &generic, const sim::Corpus &personal) {
    if (!stage3.adapters)
        throw std::invalid_argument("stage 4: the Stage 3 model has no adapters");
    if (!stage3.gate)
        throw std::invalid_argument("stage 4: gate calibration is missing");
    TrainPlan plan;
    plan.label = "4";
    plan.cfg = cfg;
    plan.student = stage3;
    plan.trainable = Part::Backbone;
    plan.student_mode = GateMode::Gated;
    plan.ce_data = {&generic};
    plan.kl_data = {&personal};
    plan.teacher = ModelBundle{stage3.backbone, stage3.adapters, std::nullopt};
    plan.teacher_mode = GateMode::Ungated;
    return run_plan(plan);
}

TrainResult train_baseline(const MethodSpec &method, const StageConfig &cfg,
                           const BaselineInputs &in) {
    method.validate();
    if (method.method == Method::KDFIP)
        throw std::invalid_argument("KDFIP is trained through stages 1-4, not as a baseline");
    if (!in.backbone)
        throw std::invalid_argument(std::string(to_string(method.method)) +
                                    ": missing pretrained backbone");
    auto need = [&](const void *p, const char *what) {
        if (!p)
            throw std::invalid_argument(std::string(to_string(method.method)) + ": flag set but " +
                                        what + " not provided");
    };
    need(in.personal, "D_per");
    if (method.use_synthetic)
        need(in.synthetic, "D_syn");
    if (method.use_generic)
        need(in.generic, "D_g");

    std::vector<const sim::Corpus *> personal_data = {in.personal};
    if (method.use_synthetic)
        personal_data.push_back(in.synthetic);

    TrainPlan plan;
    plan.label = std::string(to_string(method.method));
    plan.cfg = cfg;
    plan.student.backbone = *in.backbone;
    switch (method.method) {
    case Method::FT:
        plan.trainable = Part::Backbone;
        plan.ce_data = personal_data;
        break;
    case Method::Adapter:
        need(in.model_config, "model config");
        plan.student.adapters = model::init_adapters(*in.model_config, adapter_init_key(cfg));
        plan.trainable = Part::Adapters;
        plan.ce_data = personal_data;
        break;
    case Method::PGA:
        need(in.adapter_hat, "adapter weights");
        need(in.gate, "gate calibration");
        plan.student.adapters = *in.adapter_hat;
        plan.student.gate = *in.gate;
        plan.trainable = Part::Backbone;
        plan.student_mode = GateMode::Gated;
        plan.ce_data = {in.generic};
        plan.ce_data.insert(plan.ce_data.end(), personal_data.begin(), personal_data.end());
        break;
    case Method::FIP:
        plan.trainable = Part::Backbone;
        plan.ce_data = personal_data;
        plan.kl_data = {in.generic};
        plan.teacher = ModelBundle{*in.backbone, std::nullopt, std::nullopt};
        break;
    case Method::KDFIP:
        break;
    }
    return run_plan(plan);
}

} // namespace kdfip::train
