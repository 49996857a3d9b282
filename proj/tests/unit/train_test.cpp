// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "fixture.hpp"
#include "kdfip/eval.hpp"
#include "kdfip/losses.hpp"
#include "kdfip/optim.hpp"
#include "kdfip/train.hpp"

using namespace kdfip;
using namespace kdfip::train;
using kdfip::testing::same_bits;
using kdfip::testing::same_params;
using kdfip::testing::small_backbone;
using kdfip::testing::small_workspace;

namespace {

Tensor log_of(std::initializer_list<double> probs) {
    std::vector<double> v;
    for (double p : probs)
        v.push_back(std::log(p));
    return Tensor({1, v.size()}, v);
}

model::GatingParams gate_for(std::size_t t) { return exp::calibrate_target_gate(small_workspace(), t).params; }

model::ModelBundle stage2_model() {
    const auto &ws = small_workspace();
    return train_stage2(ws.model_config(), ws.config.stage("stage2"), small_backbone(),
                        ws.personal_train[0])
        .model;
}

} // namespace

TEST_CASE("frame CE") {
    const std::vector<sim::Label> zero{0};
    CHECK(ce_frame_loss(Tensor({1, 3}, {0.0, -800.0, -800.0}), zero) == 0.0);
    const Tensor uniform({4, 5}, -std::log(5.0));
    const std::vector<sim::Label> labels{0, 4, 2, 2};
    CHECK(ce_frame_loss(uniform, labels) == doctest::Approx(std::log(5.0)).epsilon(1e-15));
    CHECK(ce_frame_loss(log_of({0.5, 0.25, 0.25}), zero) == doctest::Approx(0.69314718055994531));
    CHECK_THROWS(ce_frame_loss(uniform, std::vector<sim::Label>{0, 1, 2, 5}));
}

TEST_CASE("frame KL") {
    const Tensor p = log_of({0.2, 0.3, 0.5});
    CHECK(kl_frame_loss(p, p) == 0.0);
    const double expect = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
    CHECK(kl_frame_loss(log_of({0.5, 0.5}), log_of({0.9, 0.1})) == doctest::Approx(expect).epsilon(1e-14));
    CHECK(expect == doctest::Approx(0.5108).epsilon(1e-4));
    // Logits (10, 0) vs (0, 10): (p - q) * 10 with p = sigmoid(10), q = 1 - p.
    auto ls = [](double a, double b) {
        const double m = std::max(a, b), lse = m + std::log(std::exp(a - m) + std::exp(b - m));
        return Tensor({1, 2}, {a - lse, b - lse});
    };
    const double ps = 1.0 / (1.0 + std::exp(-10.0));
    const double oracle = (2.0 * ps - 1.0) * 10.0;
    CHECK(kl_frame_loss(ls(10, 0), ls(0, 10)) == doctest::Approx(oracle).epsilon(1e-13));
    CHECK(oracle == doctest::Approx(9.999).epsilon(1e-4));
}

TEST_CASE("tape losses agree with plain evaluations") {
    const Tensor s = log_of({0.1, 0.6, 0.3});
    const Tensor t = log_of({0.3, 0.3, 0.4});
    Tape tape;
    const Var sv = tape.constant(s);
    CHECK(tape.value(kl_frame_loss(tape, t, sv)).item() == doctest::Approx(kl_frame_loss(t, s)).epsilon(1e-15));
    const std::vector<sim::Label> l{1};
    CHECK(tape.value(ce_frame_loss(tape, sv, l)).item() == doctest::Approx(ce_frame_loss(s, l)).epsilon(1e-15));
}

TEST_CASE("hybrid loss") {
    Tape tape;
    const Var ce = tape.constant(Tensor::scalar(1.0));
    const Var kl = tape.constant(Tensor::scalar(2.0));
    CHECK(tape.value(hybrid_loss(tape, ce, kl, 0.0).total).item() == 1.0);
    CHECK(tape.value(hybrid_loss(tape, ce, kl, 0.01).total).item() == doctest::Approx(1.02).epsilon(1e-15));
    CHECK(tape.value(hybrid_loss(tape, ce, Var{}, 0.5).total).item() == 1.0);
    const Tensor p = log_of({0.2, 0.8});
    const Var zero_kl = kl_frame_loss(tape, p, tape.constant(p));
    CHECK(tape.value(hybrid_loss(tape, ce, zero_kl, 0.3).total).item() == 1.0);
    CHECK_THROWS_AS(hybrid_loss(tape, ce, kl, -1.0), std::invalid_argument);
}

TEST_CASE("Adam") {
    SUBCASE("first step with unit gradient moves by the learning rate") {
        ParamMap p{{"w", Tensor::scalar(0.5)}};
        AdamState st;
        adam_step(p, {{"w", Tensor::scalar(1.0)}}, st, 0.1);
        // m_hat = v_hat = 1: w -= lr / (1 + eps)
        CHECK(p["w"].item() == doctest::Approx(0.5 - 0.1 / (1.0 + kAdamEps)).epsilon(1e-15));
    }
    SUBCASE("second step matches the scalar recursion") {
        ParamMap p{{"w", Tensor::scalar(0.0)}};
        AdamState st;
        adam_step(p, {{"w", Tensor::scalar(2.0)}}, st, 0.01);
        adam_step(p, {{"w", Tensor::scalar(-1.0)}}, st, 0.01);
        double m = 0, v = 0, w = 0;
        for (int t = 1; t <= 2; ++t) {
            const double g = t == 1 ? 2.0 : -1.0;
            m = kAdamBeta1 * m + (1 - kAdamBeta1) * g;
            v = kAdamBeta2 * v + (1 - kAdamBeta2) * g * g;
            const double mh = m / (1 - std::pow(kAdamBeta1, t)), vh = v / (1 - std::pow(kAdamBeta2, t));
            w -= 0.01 * mh / (std::sqrt(vh) + kAdamEps);
        }
        CHECK(p["w"].item() == doctest::Approx(w).epsilon(1e-14));
    }
    SUBCASE("zero gradients and frozen parameters stay put") {
        ParamMap p{{"a", Tensor({2, 2}, 0.3)}, {"b", Tensor({1, 2}, -0.2)}};
        const ParamMap before = p;
        AdamState st;
        adam_step(p, {{"a", Tensor({2, 2}, 0.0)}, {"b", Tensor({1, 2}, 5.0)}}, st, 0.1, {"b"});
        CHECK(same_bits(p["a"], before.at("a")));
        CHECK(same_bits(p["b"], before.at("b")));
    }
    SUBCASE("unknown names and wrong shapes are rejected") {
        ParamMap p{{"a", Tensor({2, 2}, 0.3)}};
        AdamState st;
        CHECK_THROWS(adam_step(p, {{"z", Tensor({2, 2}, 1.0)}}, st, 0.1));
        CHECK_THROWS(adam_step(p, {{"a", Tensor({1, 2}, 1.0)}}, st, 0.1));
    }
}

TEST_CASE("stage config") {
    StageConfig c;
    c.lr = 0.01;
    CHECK(c.lr_at(0, 10) == 0.01);
    CHECK(c.lr_at(5, 10) == doctest::Approx(0.005));
    c.schedule = LrSchedule::Constant;
    CHECK(c.lr_at(9, 10) == 0.01);
    c.beta = -1;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("beta ≥ 0"), std::invalid_argument);
    CHECK(parse_schedule("constant") == LrSchedule::Constant);
    CHECK_THROWS(parse_schedule("cosine"));
}

TEST_CASE("zero epochs leave models at their initialization") {
    const auto &ws = small_workspace();
    const auto mc = ws.model_config();
    StageConfig c1 = ws.config.stage("stage1");
    c1.epochs = 0;
    const auto s1 = train_stage1(mc, c1, ws.generic_train);
    CHECK(same_params(s1.model.backbone, model::init_backbone(mc, rng::Key{c1.seed}.child("backbone-init"))));
    CHECK(s1.report.steps.empty());

    StageConfig c2 = ws.config.stage("stage2");
    c2.epochs = 0;
    const auto s2 = train_stage2(mc, c2, small_backbone(), ws.personal_train[0]);
    for (const auto &b : s2.model.adapters->blocks)
        for (double v : b.up_w.data())
            CHECK(v == 0.0);
    const auto &u = ws.personal_test[0].utterances[0];
    CHECK(same_bits(model::fused_forward(s2.model.backbone, *s2.model.adapters, 1.0, u),
                    model::backbone_forward(small_backbone(), u)));

    model::ModelBundle s3 = stage2_model();
    s3.gate = gate_for(0);
    StageConfig c4 = ws.config.stage("stage4");
    c4.epochs = 0;
    const auto s4 = train_stage4(c4, s3, ws.generic_train, ws.personal_train[0]);
    CHECK(same_params(s4.model.backbone, s3.backbone));
    CHECK(same_params(*s4.model.adapters, *s3.adapters));
}

TEST_CASE("freeze contracts") {
    const auto &ws = small_workspace();
    const auto mc = ws.model_config();
    const model::BackboneParams &wb = small_backbone();
    const auto s2 = stage2_model();
    CHECK(same_params(s2.backbone, wb));

    const auto s3 = train_stage3(ws.config.stage("stage3"), s2, ws.synthetic[0], ws.personal_train[0]);
    CHECK(same_params(s3.model.backbone, wb));
    CHECK_FALSE(same_params(*s3.model.adapters, *s2.adapters));

    model::ModelBundle gated = s3.model;
    gated.gate = gate_for(0);
    const auto s4 = train_stage4(ws.config.stage("stage4"), gated, ws.generic_train, ws.personal_train[0]);
    CHECK(same_params(*s4.model.adapters, *s3.model.adapters));
    CHECK(same_bits(s4.model.gate->centroid, gated.gate->centroid));
    CHECK(s4.model.gate->tau == gated.gate->tau);
    CHECK(s4.model.gate->sharpness == gated.gate->sharpness);
    CHECK_FALSE(same_params(s4.model.backbone, wb));

    BaselineInputs in;
    in.model_config = &mc;
    in.backbone = &wb;
    in.personal = &ws.personal_train[0];
    in.synthetic = &ws.synthetic[0];
    in.generic = &ws.generic_train;
    MethodSpec ad{Method::Adapter, true, true, false};
    CHECK(same_params(train_baseline(ad, ws.config.stage("adapter"), in).model.backbone, wb));

    const model::GatingParams g = gate_for(0);
    in.adapter_hat = &*s2.adapters;
    in.gate = &g;
    StageConfig cp = ws.config.stage("pga");
    cp.epochs = 0;
    MethodSpec pga{Method::PGA, true, false, true};
    CHECK(same_params(train_baseline(pga, cp, in).model.backbone, wb));
}

TEST_CASE("KL terms") {
    const auto &ws = small_workspace();
    const auto s2 = stage2_model();
    const auto s3 = train_stage3(ws.config.stage("stage3"), s2, ws.synthetic[0], ws.personal_train[0]);
    REQUIRE(s3.report.initial_kl.has_value());
    CHECK(*s3.report.initial_kl == 0.0);
    CHECK(s3.report.steps.front().loss_kl == 0.0);
    for (const auto &r : s3.report.steps)
        CHECK(r.loss_kl >= -1e-10);
    model::ModelBundle gated = s3.model;
    gated.gate = gate_for(0);
    const auto s4 = train_stage4(ws.config.stage("stage4"), gated, ws.generic_train, ws.personal_train[0]);
    for (const auto &r : s4.report.steps)
        CHECK(r.loss_kl >= -1e-10);
}

TEST_CASE("a huge beta pins Stage 3 to its teacher") {
    const auto &ws = small_workspace();
    const auto s2 = stage2_model();
    StageConfig c = ws.config.stage("stage3");
    c.beta = 1e6;
    c.epochs = 3;
    const auto s3 = train_stage3(c, s2, ws.synthetic[0], ws.personal_train[0]);
    CHECK(eval::mean_kl(s2, false, s3.model, false, ws.personal_test[0]) < 1e-3);
}

TEST_CASE("same seed, same models") {
    const auto &ws = small_workspace();
    const auto a = train_stage1(ws.model_config(), ws.config.stage("stage1"), ws.generic_train);
    CHECK(same_params(a.model.backbone, small_backbone()));
    const auto b = stage2_model(), c = stage2_model();
    CHECK(model::params_hash(model::to_param_map(b)) == model::params_hash(model::to_param_map(c)));
}

TEST_CASE("step records carry the scheduled learning rate") {
    const auto &ws = small_workspace();
    StageConfig c = ws.config.stage("stage2");
    const auto r = train_stage2(ws.model_config(), c, small_backbone(), ws.personal_train[0]);
    const std::size_t total = r.report.steps.size();
    REQUIRE(total > 1);
    for (const auto &s : r.report.steps)
        CHECK(s.lr == c.lr_at(s.step, total));
    CHECK(r.report.to_csv().rfind("step,stage,loss_ce,loss_kl,total,lr\n", 0) == 0);
}

TEST_CASE("method flags") {
    CHECK(parse_method("FIP") == Method::FIP);
    CHECK_THROWS(parse_method("fancy"));
    CHECK_THROWS((MethodSpec{Method::FT, true, false, true}.validate()));
    CHECK_THROWS((MethodSpec{Method::PGA, true, false, false}.validate()));
    CHECK(MethodSpec{Method::FT, true, true, false}.data_flags() == "D_per+D_syn");
}
