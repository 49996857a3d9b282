// SPDX-License-Identifier: Apache-2.0
#pragma once

// Parametric stand-in for speech data: characters are unit prototypes in
// feature space, speakers apply an affine warp, and synthetic (TTS-like)
// data adds label-preserving content substitutions plus warp jitter.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "kdfip/rng.hpp"
#include "kdfip/tensor.hpp"

namespace kdfip::sim {

using Label = std::uint16_t;

enum class Origin { Generic, Personal, Synthetic };
enum class Split { Train, Test, Calib };

std::string_view to_string(Origin o);
std::string_view to_string(Split s);
Origin parse_origin(std::string_view s);
Split parse_split(std::string_view s);

struct VocabSpec {
    std::string characters; // V symbols, index = label
    Tensor prototypes;      // V x D, unit rows
    std::size_t size() const { return characters.size(); }
    std::size_t dim() const { return prototypes.cols(); }
    /// Label of the blank symbol (one past the last character).
    Label blank() const { return static_cast<Label>(characters.size()); }
    Label label_of(char c) const;
};

struct SpeakerProfile {
    std::uint64_t speaker_id = 0;
    double alpha = 0.0;
    Tensor warp; // D x D
    Tensor bias; // 1 x D
};

struct CorruptionSpec {
    double p_sub = 0.0; // per-character content substitution probability
    double eta = 0.0;   // warp jitter magnitude
    void validate() const;
};

struct Utterance {
    Tensor features; // T x D
    std::vector<Label> frame_labels;
    std::string transcript;
    std::uint64_t speaker_id = 0;
    Origin origin = Origin::Generic;
    std::uint32_t substituted_chars = 0;

    std::size_t frames() const { return frame_labels.size(); }
};

struct Corpus {
    std::string name;
    Origin role = Origin::Generic;
    Split split = Split::Train;
    std::uint64_t generation_hash = 0;
    std::vector<Utterance> utterances;

    bool empty() const { return utterances.empty(); }
    std::size_t size() const { return utterances.size(); }
};

/// Characters used for labels: a-z, A-Z, 0-9.
inline constexpr std::string_view kAlphabet =
    "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

VocabSpec build_vocab(std::uint64_t seed, std::size_t vocab_size, std::size_t dim);

/// Bias entries are alpha * bias_gain * N(0, 1).
SpeakerProfile sample_speaker_profile(std::uint64_t seed, std::uint64_t speaker_id, double alpha,
                                      std::size_t dim, double bias_gain = 1.0);

/// Renders one utterance. With `corruption`, each character is drawn from a
/// wrong prototype with probability p_sub (labels untouched) and the warp is
/// multiplied by (I + eta * jitter). Clean and corrupted renders share all
/// other random draws under the same key.
Utterance synth_utterance(const VocabSpec &vocab, const SpeakerProfile &profile,
                          std::string_view transcript, double sigma_obs, rng::Key key,
                          Origin origin = Origin::Generic,
                          const CorruptionSpec *corruption = nullptr);

Utterance corrupt_synthetic(const VocabSpec &vocab, const SpeakerProfile &profile,
                            std::string_view transcript, double sigma_obs,
                            const CorruptionSpec &spec, rng::Key key);

/// Greedy collapse of a frame label sequence: merge repeats, drop blanks.
std::string collapse_labels(const std::vector<Label> &labels, const VocabSpec &vocab);

/// Mean feature frame, 1 x D.
Tensor utterance_embedding(const Utterance &u);

/// Simulator knobs. Defaults give a Stage 1 run of a few seconds per epoch.
struct SimConfig {
    std::size_t vocab_size = 20;
    std::size_t feature_dim = 16;
    std::size_t generic_speakers = 20;
    std::size_t targets = 2;
    double alpha = 0.3;
    double bias_gain = 0.5;
    double sigma_obs = 0.15;
    double p_sub = 0.10;
    double eta = 0.10;
    std::size_t generic_train = 4000;
    std::size_t generic_test = 400;
    std::size_t generic_calib = 100;
    std::size_t personal_train = 40;
    std::size_t personal_test = 80;
    std::size_t synthetic = 2000;
    std::size_t text_pool = 2000;
    std::size_t min_len = 4;
    std::size_t max_len = 12;

    void validate() const;
};

/// Everything derived from (master seed, SimConfig) that corpora are drawn from.
struct World {
    std::uint64_t master_seed = 0;
    SimConfig config;
    VocabSpec vocab;
    std::vector<SpeakerProfile> generic_speakers;
    std::vector<SpeakerProfile> targets;
    std::vector<std::string> text_pool;

    static World build(std::uint64_t master_seed, const SimConfig &config);

    /// A speaker that is neither generic nor a target (cross-speaker studies).
    SpeakerProfile non_target_speaker(std::size_t index) const;
    CorruptionSpec default_corruption() const { return {config.p_sub, config.eta}; }
};

struct CorpusRequest {
    std::string name; // keys the per-utterance seeds
    Origin role = Origin::Generic;
    Split split = Split::Train;
    std::size_t count = 0;
    std::vector<SpeakerProfile> speakers;
    std::optional<CorruptionSpec> corruption;
};

/// Per-utterance seeds are master -> "corpus" -> name -> index, so content
/// is independent of generation order and thread count, and a larger request
/// under the same name extends a smaller one.
Corpus gen_corpus(const World &world, const CorpusRequest &request);

/// Standard corpora for a world.
CorpusRequest generic_request(const World &world, Split split);
CorpusRequest personal_request(const World &world, std::size_t target, Split split);
CorpusRequest synthetic_request(const World &world, std::size_t target,
                                std::optional<CorruptionSpec> corruption = std::nullopt,
                                std::size_t count = 0);

} // namespace kdfip::sim
