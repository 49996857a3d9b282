// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "kdfip/model.hpp"
#include "kdfip/sim.hpp"

namespace kdfip::eval {

/// Unit-cost Levenshtein distance.
std::size_t edit_distance(std::string_view ref, std::string_view hyp);

struct UtteranceScore {
    std::size_t distance = 0;
    std::size_t ref_length = 0;
};

/// Micro-averaged: sum of distances over sum of reference lengths.
double cer(const std::vector<UtteranceScore> &scores);

struct EvalResult {
    sim::Origin role = sim::Origin::Generic;
    std::size_t utterances = 0;
    double cer = 0.0;
    std::vector<UtteranceScore> scores;
    std::vector<std::pair<std::string, std::string>> samples; // (reference, hypothesis)
};

/// Decodes every utterance greedily. `gated` selects H = H_b + g(x) H_a (the
/// bundle must carry a gate); otherwise adapters, if any, are fused with g = 1.
EvalResult evaluate(const model::ModelBundle &bundle, const sim::Corpus &corpus,
                    const sim::VocabSpec &vocab, bool gated);

/// Per-utterance log-probabilities, in corpus order.
std::vector<Tensor> corpus_log_probs(const model::ModelBundle &bundle, const sim::Corpus &corpus,
                                     bool gated);

/// Frame-weighted mean KL(teacher || student) over a corpus.
double mean_kl(const model::ModelBundle &teacher, bool teacher_gated,
               const model::ModelBundle &student, bool student_gated, const sim::Corpus &corpus);

/// Frame-weighted mean CE over a corpus.
double mean_ce(const model::ModelBundle &bundle, bool gated, const sim::Corpus &corpus);

} // namespace kdfip::eval
