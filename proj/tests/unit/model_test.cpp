// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "kdfip/model.hpp"
#include "kdfip/sim.hpp"

using namespace kdfip;
using namespace kdfip::model;

namespace {

bool same_bits(const Tensor &a, const Tensor &b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

struct Fixture {
    ModelConfig mc;
    sim::World world;
    BackboneParams backbone;
    AdapterParams adapters; // nonzero
    sim::Corpus corpus;

    Fixture() {
        sim::SimConfig sc;
        sc.generic_train = 20;
        sc.text_pool = 40;
        world = sim::World::build(2, sc);
        mc.vocab_size = sc.vocab_size;
        mc.feature_dim = sc.feature_dim;
        backbone = init_backbone(mc, rng::Key{1});
        adapters = init_adapters(mc, rng::Key{2});
        rng::Stream s(rng::Key{3});
        for (auto &b : adapters.blocks)
            for (auto &x : b.up_w.data())
                x = 0.1 * s.normal();
        corpus = sim::gen_corpus(world, sim::generic_request(world, sim::Split::Train));
    }
};

/// One-frame utterance whose embedding is (cos a, sin a).
sim::Utterance at_angle(double a) {
    sim::Utterance u;
    u.features = Tensor({1, 2}, {std::cos(a), std::sin(a)});
    u.frame_labels = {0};
    return u;
}

Tensor log_one_hot(const std::vector<sim::Label> &labels, std::size_t classes) {
    Tensor t({labels.size(), classes}, -50.0);
    for (std::size_t r = 0; r < labels.size(); ++r)
        t.at(r, labels[r]) = 0.0;
    return t;
}

} // namespace

TEST_CASE("backbone output shape and determinism") {
    const Fixture f;
    const auto &u = f.corpus.utterances[0];
    const Tensor a = backbone_forward(f.backbone, u);
    CHECK(a.shape() == Shape{u.frames(), f.mc.classes()});
    CHECK(same_bits(a, backbone_forward(f.backbone, u)));
}

TEST_CASE("untrained model is close to uniform") {
    const Fixture f;
    double entropy = 0.0;
    std::size_t frames = 0;
    for (const auto &u : f.corpus.utterances) {
        const Tensor lp = backbone_forward(f.backbone, u);
        for (std::size_t t = 0; t < lp.rows(); ++t, ++frames)
            for (std::size_t c = 0; c < lp.cols(); ++c)
                entropy -= std::exp(lp.at(t, c)) * lp.at(t, c);
    }
    const double mean = entropy / frames;
    const double uniform = std::log(static_cast<double>(f.mc.classes()));
    CHECK(mean > 0.8 * uniform);
    CHECK(mean < 1.2 * uniform);
}

TEST_CASE("adapters") {
    const Fixture f;
    const ModelConfig &mc = f.mc;
    const Tensor h = Tensor({5, mc.hidden}, 0.7);
    SUBCASE("fresh adapters output zero") {
        const AdapterParams fresh = init_adapters(mc, rng::Key{9});
        const Tensor ha = adapter_forward(h, fresh.blocks[0]);
        CHECK(ha.shape() == h.shape());
        for (double v : ha.data())
            CHECK(v == 0.0);
    }
    SUBCASE("zero input with zero biases gives zero output") {
        AdapterBlock b = f.adapters.blocks[0];
        for (auto &x : b.down_b.data()) x = 0.0;
        for (auto &x : b.up_b.data()) x = 0.0;
        const Tensor out = adapter_forward(Tensor({3, mc.hidden}, 0.0), b);
        for (double v : out.data())
            CHECK(v == 0.0);
    }
}

TEST_CASE("gating score") {
    GatingParams g;
    g.centroid = Tensor({1, 2}, {1.0, 0.0});
    g.tau = 0.8;
    g.sharpness = 0.05;
    CHECK(gating_score(g, at_angle(0.0)).cosine == doctest::Approx(1.0));
    CHECK(gating_score(g, at_angle(0.0)).value == doctest::Approx(0.98201379003790845).epsilon(1e-12));
    CHECK(gating_score(g, at_angle(std::acos(0.8))).value == doctest::Approx(0.5).epsilon(1e-12));
    double prev = -1.0;
    for (int k = 20; k >= 0; --k) {
        const double v = gating_score(g, at_angle(0.15 * k)).value;
        CHECK(v > prev);
        prev = v;
    }
}

TEST_CASE("gate calibration from cosine sets") {
    const double s9 = std::sqrt(1 - 0.81), s5 = std::sqrt(1 - 0.25);
    // Mean of each pair lies on the first axis, so each member's cosine to
    // the target centroid is its first coordinate.
    const std::vector<Tensor> tgt{Tensor({1, 2}, {0.9, s9}), Tensor({1, 2}, {0.9, -s9})};
    const std::vector<Tensor> non{Tensor({1, 2}, {0.5, s5}), Tensor({1, 2}, {0.5, -s5})};
    const GateCalibration c = calibrate_gate(tgt, non);
    CHECK(c.params.tau == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(c.params.sharpness == doctest::Approx(0.1).epsilon(1e-12));
    const GateCalibration again = calibrate_gate(tgt, non);
    CHECK(same_bits(c.params.centroid, again.params.centroid));
    CHECK(c.params.tau == again.params.tau);
    CHECK(c.params.sharpness == again.params.sharpness);
    CHECK_THROWS_AS(calibrate_gate(tgt, {}), std::invalid_argument);
}

TEST_CASE("calibrated gate prefers held-out target utterances") {
    sim::SimConfig sc;
    sc.personal_test = 60;
    sc.generic_test = 60;
    const sim::World w = sim::World::build(6, sc);
    const auto train = sim::gen_corpus(w, sim::personal_request(w, 0, sim::Split::Train));
    const auto calib = sim::gen_corpus(w, sim::generic_request(w, sim::Split::Calib));
    std::vector<Tensor> te, ne;
    for (const auto &u : train.utterances) te.push_back(sim::utterance_embedding(u));
    for (const auto &u : calib.utterances) ne.push_back(sim::utterance_embedding(u));
    const GatingParams g = calibrate_gate(te, ne).params;
    auto mean_gate = [&](const sim::Corpus &c) {
        double s = 0.0;
        for (const auto &u : c.utterances) s += gating_score(g, u).value;
        return s / static_cast<double>(c.size());
    };
    const double tgt = mean_gate(sim::gen_corpus(w, sim::personal_request(w, 0, sim::Split::Test)));
    const double non = mean_gate(sim::gen_corpus(w, sim::generic_request(w, sim::Split::Test)));
    CHECK(tgt > non);
}

TEST_CASE("fusion degenerates to the backbone") {
    const Fixture f;
    const auto &u = f.corpus.utterances[1];
    const Tensor base = backbone_forward(f.backbone, u);
    CHECK(same_bits(fused_forward(f.backbone, f.adapters, 0.0, u), base));
    const AdapterParams zero = init_adapters(f.mc, rng::Key{4});
    for (double g : {0.0, 0.3, 1.0})
        CHECK(same_bits(fused_forward(f.backbone, zero, g, u), base));
    CHECK_FALSE(same_bits(fused_forward(f.backbone, f.adapters, 1.0, u), base));
}

TEST_CASE("gate one equals ungated fusion on the tape") {
    const Fixture f;
    const auto &u = f.corpus.utterances[2];
    Tape t;
    const auto bv = bind(t, f.backbone, false);
    const auto av = bind(t, f.adapters, false);
    const Tensor ungated = t.value(forward(t, make_batch(u), bv, &av));
    CHECK(max_abs_diff(fused_forward(f.backbone, f.adapters, 1.0, u), ungated) < 1e-12);
}

TEST_CASE("greedy decoding") {
    const sim::VocabSpec v = sim::build_vocab(1, 3, 2);
    const sim::Label a = 0, b = 1, blank = v.blank();
    CHECK(greedy_decode(log_one_hot({a, a, blank, b, b}, 4), v) == v.characters.substr(0, 2));
    CHECK(greedy_decode(log_one_hot({blank, blank}, 4), v).empty());
    CHECK(greedy_decode(log_one_hot({a, blank, a}, 4), v) == std::string(2, v.characters[0]));
    // Ties go to the lowest index.
    CHECK(greedy_decode(Tensor({1, 4}, 0.0), v) == v.characters.substr(0, 1));
}

TEST_CASE("decoding one-hot frame labels recovers every transcript") {
    const Fixture f;
    for (const auto &u : f.corpus.utterances)
        CHECK(greedy_decode(log_one_hot(u.frame_labels, f.mc.classes()), f.world.vocab) == u.transcript);
}

TEST_CASE("parameter maps and flat vectors round-trip") {
    const Fixture f;
    ModelBundle b;
    b.backbone = f.backbone;
    b.adapters = f.adapters;
    GatingParams g;
    g.centroid = Tensor({1, f.mc.feature_dim}, 0.25);
    g.tau = 0.6;
    g.sharpness = 0.07;
    b.gate = g;
    const ModelBundle back = bundle_from_map(f.mc, to_param_map(b));
    CHECK(params_hash(to_param_map(back)) == params_hash(to_param_map(b)));
    REQUIRE(back.gate);
    CHECK(back.gate->tau == 0.6);
    const auto w = flatten(f.backbone);
    CHECK(params_hash(to_param_map(unflatten(f.backbone, w))) == params_hash(to_param_map(f.backbone)));
    CHECK_THROWS(unflatten(f.backbone, std::span<const double>(w).first(w.size() - 1)));
}
