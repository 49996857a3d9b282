// SPDX-License-Identifier: Apache-2.0
#include "kdfip/sim.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace kdfip::sim {

namespace {

// Warp perturbations are rescaled to stay within this multiple of sqrt(D).
constexpr double kWarpBound = 1.5;
constexpr std::uint64_t kTargetIdBase = 1000;
constexpr std::uint64_t kNonTargetIdBase = 2000;

Tensor random_square(rng::Stream &s, std::size_t dim) {
    Tensor r({dim, dim});
    const double inv = 1.0 / std::sqrt(static_cast<double>(dim));
    for (auto &v : r.data())
        v = s.normal() * inv;
    return r;
}

Tensor square_product(const Tensor &a, const Tensor &b) {
    const std::size_t n = a.rows();
    Tensor c({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < n; ++k)
                acc += a.at(i, k) * b.at(k, j);
            c.at(i, j) = acc;
        }
    return c;
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

std::string_view to_string(Origin o) {
    switch (o) {
    case Origin::Generic: return "generic";
    case Origin::Personal: return "personal";
    case Origin::Synthetic: return "synthetic";
    }
    return "?";
}

std::string_view to_string(Split s) {
    switch (s) {
    case Split::Train: return "train";
    case Split::Test: return "test";
    case Split::Calib: return "calib";
    }
    return "?";
}

Origin parse_origin(std::string_view s) {
    if (s == "generic")
        return Origin::Generic;
    if (s == "personal")
        return Origin::Personal;
    if (s == "synthetic")
        return Origin::Synthetic;
    throw std::invalid_argument("unknown corpus role '" + std::string(s) + "'");
}

Split parse_split(std::string_view s) {
    if (s == "train")
        return Split::Train;
    if (s == "test")
        return Split::Test;
    if (s == "calib")
        return Split::Calib;
    throw std::invalid_argument("unknown corpus split '" + std::string(s) + "'");
}

Label VocabSpec::label_of(char c) const {
    const auto pos = characters.find(c);
    if (pos == std::string::npos)
        throw std::invalid_argument(std::string("symbol '") + c + "' is not in the vocabulary");
    return static_cast<Label>(pos);
}

void CorruptionSpec::validate() const {
    if (!(p_sub >= 0.0 && p_sub <= 1.0))
        throw std::invalid_argument("p_sub must lie in [0, 1]");
    if (!(eta >= 0.0))
        throw std::invalid_argument("eta must be >= 0");
}

VocabSpec build_vocab(std::uint64_t seed, std::size_t vocab_size, std::size_t dim) {
    if (vocab_size < 2 || vocab_size > kAlphabet.size())
        throw std::invalid_argument("vocab size must lie in [2, " +
                                    std::to_string(kAlphabet.size()) + "]");
    if (dim < 2)
        throw std::invalid_argument("feature dim must be >= 2");

    VocabSpec vocab;
    vocab.characters = std::string(kAlphabet.substr(0, vocab_size));
    vocab.prototypes = Tensor({vocab_size, dim});
    const rng::Key key = rng::Key{seed}.child("vocab");
    for (std::size_t c = 0; c < vocab_size; ++c) {
        for (std::uint64_t attempt = 0;; ++attempt) {
            rng::Stream s(key.child(c).child(attempt));
            double norm2 = 0.0;
            for (std::size_t d = 0; d < dim; ++d) {
                const double v = s.normal();
                vocab.prototypes.at(c, d) = v;
                norm2 += v * v;
            }
            const double inv = 1.0 / std::sqrt(norm2);
            for (std::size_t d = 0; d < dim; ++d)
                vocab.prototypes.at(c, d) *= inv;
            bool distinct = true;
            for (std::size_t o = 0; o < c && distinct; ++o) {
                bool same = true;
                for (std::size_t d = 0; d < dim && same; ++d)
                    same = vocab.prototypes.at(o, d) == vocab.prototypes.at(c, d);
                distinct = !same;
            }
            if (distinct)
                break;
        }
    }
    return vocab;
}

SpeakerProfile sample_speaker_profile(std::uint64_t seed, std::uint64_t speaker_id, double alpha,
                                      std::size_t dim, double bias_gain) {
    if (!(alpha >= 0.0))
        throw std::invalid_argument("speaker strength alpha must be >= 0");
    if (!(bias_gain >= 0.0))
        throw std::invalid_argument("bias_gain must be >= 0");
    SpeakerProfile p;
    p.speaker_id = speaker_id;
    p.alpha = alpha;
    p.warp = Tensor::identity(dim);
    p.bias = Tensor({1, dim});
    if (alpha == 0.0)
        return p;

    rng::Stream s(rng::Key{seed}.child("speaker").child(speaker_id));
    Tensor r = random_square(s, dim);
    double fro = 0.0;
    for (double v : r.data())
        fro += v * v;
    fro = std::sqrt(fro);
    const double bound = kWarpBound * std::sqrt(static_cast<double>(dim));
    const double shrink = fro > bound ? bound / fro : 1.0;
    for (std::size_t i = 0; i < r.numel(); ++i)
        p.warp[i] += alpha * shrink * r[i];
    for (auto &b : p.bias.data())
        b = alpha * bias_gain * s.normal();
    return p;
}

Utterance synth_utterance(const VocabSpec &vocab, const SpeakerProfile &profile,
                          std::string_view transcript, double sigma_obs, rng::Key key,
                          Origin origin, const CorruptionSpec *corruption) {
    if (transcript.empty())
        throw std::invalid_argument("transcript must be non-empty");
    const std::size_t D = vocab.dim();
    if (profile.warp.rows() != D)
        throw ShapeError("speaker warp " + shape_str(profile.warp.shape()) +
                         " does not match feature dim " + std::to_string(D));
    std::vector<Label> chars;
    chars.reserve(transcript.size());
    for (char c : transcript)
        chars.push_back(vocab.label_of(c));
    if (corruption)
        corruption->validate();

    Tensor warp = profile.warp;
    if (corruption && corruption->eta > 0.0) {
        rng::Stream js(key.child("jitter"));
        Tensor jit = random_square(js, D);
        for (std::size_t i = 0; i < jit.numel(); ++i)
            jit[i] *= corruption->eta;
        for (std::size_t d = 0; d < D; ++d)
            jit.at(d, d) += 1.0;
        warp = square_product(profile.warp, jit);
    }

    // Alignment: duration per character and blank gap after each one.
    rng::Stream durations(key.child("durations"));
    std::vector<Label> labels;
    std::vector<Label> rendered; // prototype actually drawn per frame
    Utterance u;
    rng::Stream subs(key.child("substitution"));
    const std::size_t V = vocab.size();
    for (std::size_t i = 0; i < chars.size(); ++i) {
        const Label c = chars[i];
        Label shown = c;
        if (corruption && subs.bernoulli(corruption->p_sub)) {
            auto wrong = static_cast<Label>(subs.below(V - 1));
            shown = wrong >= c ? static_cast<Label>(wrong + 1) : wrong;
            ++u.substituted_chars;
        }
        const auto len = 2 + durations.below(3);
        for (std::uint64_t k = 0; k < len; ++k) {
            labels.push_back(c);
            rendered.push_back(shown);
        }
        if (i + 1 < chars.size()) {
            const auto gap = chars[i + 1] == c ? 1 + durations.below(2) : durations.below(3);
            for (std::uint64_t k = 0; k < gap; ++k) {
                labels.push_back(vocab.blank());
                rendered.push_back(vocab.blank());
            }
        }
    }

    const std::size_t T = labels.size();
    u.features = Tensor({T, D});
    rng::Stream noise(key.child("noise"));
    for (std::size_t t = 0; t < T; ++t) {
        const Label shown = rendered[t];
        for (std::size_t d = 0; d < D; ++d) {
            double v = 0.0;
            if (shown != vocab.blank())
                for (std::size_t k = 0; k < D; ++k)
                    v += warp.at(d, k) * vocab.prototypes.at(shown, k);
            v += profile.bias[d];
            v += sigma_obs * noise.normal();
            u.features.at(t, d) = v;
        }
    }
    u.frame_labels = std::move(labels);
    u.transcript = std::string(transcript);
    u.speaker_id = profile.speaker_id;
    u.origin = origin;
    return u;
}

Utterance corrupt_synthetic(const VocabSpec &vocab, const SpeakerProfile &profile,
                            std::string_view transcript, double sigma_obs,
                            const CorruptionSpec &spec, rng::Key key) {
    spec.validate();
    return synth_utterance(vocab, profile, transcript, sigma_obs, key, Origin::Synthetic, &spec);
}

std::string collapse_labels(const std::vector<Label> &labels, const VocabSpec &vocab) {
    std::string out;
    for (std::size_t t = 0; t < labels.size(); ++t) {
        if (t > 0 && labels[t] == labels[t - 1])
            continue;
        if (labels[t] != vocab.blank())
            out.push_back(vocab.characters.at(labels[t]));
    }
    return out;
}

Tensor utterance_embedding(const Utterance &u) {
    const std::size_t T = u.features.rows(), D = u.features.cols();
    if (T == 0)
        throw std::invalid_argument("utterance_embedding: empty utterance");
    Tensor e({1, D});
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t d = 0; d < D; ++d)
            e[d] += u.features.at(t, d);
    for (auto &v : e.data())
        v /= static_cast<double>(T);
    return e;
}

void SimConfig::validate() const {
    auto need = [](bool ok, const char *what) {
        if (!ok)
            throw std::invalid_argument(what);
    };
    need(vocab_size >= 2 && vocab_size <= kAlphabet.size(), "vocab_size must lie in [2, 62]");
    need(feature_dim >= 2, "feature_dim must be >= 2");
    need(generic_speakers >= 1, "generic_speakers must be >= 1");
    need(targets >= 1, "targets must be >= 1");
    need(alpha >= 0.0, "alpha must be >= 0");
    need(bias_gain >= 0.0, "bias_gain must be >= 0");
    need(sigma_obs >= 0.0, "sigma_obs must be >= 0");
    need(p_sub >= 0.0 && p_sub <= 1.0, "p_sub must lie in [0, 1]");
    need(eta >= 0.0, "eta must be >= 0");
    need(personal_train >= 1, "personal_train must be >= 1");
    need(personal_test >= 1, "personal_test must be >= 1");
    need(generic_train >= 1, "generic_train must be >= 1");
    need(generic_test >= 1, "generic_test must be >= 1");
    need(generic_calib >= 1, "generic_calib must be >= 1");
    need(text_pool >= 1, "text_pool must be >= 1");
    need(min_len >= 1 && min_len <= max_len, "min_len must satisfy 1 <= min_len <= max_len");
}

World World::build(std::uint64_t master_seed, const SimConfig &config) {
    config.validate();
    World w;
    w.master_seed = master_seed;
    w.config = config;
    w.vocab = build_vocab(master_seed, config.vocab_size, config.feature_dim);
    for (std::size_t s = 0; s < config.generic_speakers; ++s)
        w.generic_speakers.push_back(
            sample_speaker_profile(master_seed, s, config.alpha, config.feature_dim,
                                   config.bias_gain));
    for (std::size_t t = 0; t < config.targets; ++t)
        w.targets.push_back(sample_speaker_profile(master_seed, kTargetIdBase + t, config.alpha,
                                                   config.feature_dim, config.bias_gain));
    const rng::Key text = rng::Key{master_seed}.child("text");
    for (std::size_t i = 0; i < config.text_pool; ++i) {
        rng::Stream s(text.child(i));
        const auto len = static_cast<std::size_t>(s.range(static_cast<std::int64_t>(config.min_len),
                                                          static_cast<std::int64_t>(config.max_len)));
        std::string sentence;
        for (std::size_t k = 0; k < len; ++k)
            sentence.push_back(w.vocab.characters[s.below(config.vocab_size)]);
        w.text_pool.push_back(std::move(sentence));
    }
    return w;
}

SpeakerProfile World::non_target_speaker(std::size_t index) const {
    return sample_speaker_profile(master_seed, kNonTargetIdBase + index, config.alpha,
                                  config.feature_dim, config.bias_gain);
}

Corpus gen_corpus(const World &world, const CorpusRequest &req) {
    if (req.speakers.empty())
        throw std::invalid_argument("gen_corpus(" + req.name + "): no speakers");
    if (req.role == Origin::Personal && req.count == 0)
        throw std::invalid_argument("gen_corpus(" + req.name + "): personal corpus needs >= 1 utterance");
    if (req.role == Origin::Synthetic && !req.corruption)
        throw std::invalid_argument("gen_corpus(" + req.name +
                                    "): synthetic corpus requires a CorruptionSpec");
    if (req.corruption)
        req.corruption->validate();

    Corpus corpus;
    corpus.name = req.name;
    corpus.role = req.role;
    corpus.split = req.split;

    std::string desc = "seed=" + std::to_string(world.master_seed) + ";name=" + req.name +
                       ";role=" + std::string(to_string(req.role)) +
                       ";split=" + std::string(to_string(req.split)) +
                       ";count=" + std::to_string(req.count);
    const SimConfig &c = world.config;
    desc += ";V=" + std::to_string(c.vocab_size) + ";D=" + std::to_string(c.feature_dim) +
            ";alpha=" + fmt_double(c.alpha) + ";bias=" + fmt_double(c.bias_gain) + ";sigma=" + fmt_double(c.sigma_obs) +
            ";pool=" + std::to_string(c.text_pool) + ";len=" + std::to_string(c.min_len) + "-" +
            std::to_string(c.max_len);
    for (const auto &s : req.speakers)
        desc += ";spk=" + std::to_string(s.speaker_id);
    if (req.corruption)
        desc += ";p_sub=" + fmt_double(req.corruption->p_sub) +
                ";eta=" + fmt_double(req.corruption->eta);
    corpus.generation_hash = rng::fnv1a(desc);

    const rng::Key base = rng::Key{world.master_seed}.child("corpus").child(req.name);
    const CorruptionSpec *corruption = req.corruption ? &*req.corruption : nullptr;
    corpus.utterances.resize(req.count);
    const auto n = static_cast<std::int64_t>(req.count);
#pragma omp parallel for schedule(dynamic, 16)
    for (std::int64_t ii = 0; ii < n; ++ii) {
        const auto i = static_cast<std::uint64_t>(ii);
        const rng::Key key = base.child(i);
        rng::Stream pick(key.child("pick"));
        const auto &speaker = req.speakers[pick.below(req.speakers.size())];
        const auto &text = world.text_pool[pick.below(world.text_pool.size())];
        corpus.utterances[i] = synth_utterance(world.vocab, speaker, text, c.sigma_obs,
                                               key.child("render"), req.role, corruption);
    }
    return corpus;
}

CorpusRequest generic_request(const World &world, Split split) {
    CorpusRequest r;
    r.role = Origin::Generic;
    r.split = split;
    r.name = "generic-" + std::string(to_string(split));
    r.speakers = world.generic_speakers;
    switch (split) {
    case Split::Train: r.count = world.config.generic_train; break;
    case Split::Test: r.count = world.config.generic_test; break;
    case Split::Calib: r.count = world.config.generic_calib; break;
    }
    return r;
}

CorpusRequest personal_request(const World &world, std::size_t target, Split split) {
    CorpusRequest r;
    r.role = Origin::Personal;
    r.split = split;
    r.name = "personal-t" + std::to_string(target) + "-" + std::string(to_string(split));
    r.speakers = {world.targets.at(target)};
    r.count = split == Split::Test ? world.config.personal_test : world.config.personal_train;
    return r;
}

CorpusRequest synthetic_request(const World &world, std::size_t target,
                                std::optional<CorruptionSpec> corruption, std::size_t count) {
    CorpusRequest r;
    r.role = Origin::Synthetic;
    r.split = Split::Train;
    r.name = "synthetic-t" + std::to_string(target);
    r.speakers = {world.targets.at(target)};
    r.count = count ? count : world.config.synthetic;
    r.corruption = corruption ? *corruption : world.default_corruption();
    return r;
}

} // namespace kdfip::sim
