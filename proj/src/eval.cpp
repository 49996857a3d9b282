// SPDX-License-Identifier: Apache-2.0
#include "kdfip/eval.hpp"

#include <algorithm>
#include <cstdint>
#include <exception>
#include <stdexcept>

#include "kdfip/losses.hpp"

namespace kdfip::eval {

namespace {

constexpr std::size_t kEvalBatch = 64;
constexpr std::size_t kSamples = 3;

} // namespace

std::size_t edit_distance(std::string_view ref, std::string_view hyp) {
    std::vector<std::size_t> row(hyp.size() + 1);
    for (std::size_t j = 0; j <= hyp.size(); ++j)
        row[j] = j;
    for (std::size_t i = 1; i <= ref.size(); ++i) {
        std::size_t diag = row[0];
        row[0] = i;
        for (std::size_t j = 1; j <= hyp.size(); ++j) {
            const std::size_t up = row[j];
            const std::size_t sub = diag + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
            row[j] = std::min({up + 1, row[j - 1] + 1, sub});
            diag = up;
        }
    }
    return row[hyp.size()];
}

double cer(const std::vector<UtteranceScore> &scores) {
    if (scores.empty())
        throw std::invalid_argument("cer: empty corpus");
    std::size_t dist = 0, len = 0;
    for (const auto &s : scores) {
        dist += s.distance;
        len += s.ref_length;
    }
    if (len == 0)
        throw std::invalid_argument("cer: total reference length is zero");
    return static_cast<double>(dist) / static_cast<double>(len);
}

std::vector<Tensor> corpus_log_probs(const model::ModelBundle &bundle, const sim::Corpus &corpus,
                                     bool gated) {
    if (gated && bundle.adapters && !bundle.gate)
        throw std::invalid_argument("evaluate: gated evaluation requested without a gate");
    std::vector<Tensor> out(corpus.size());
    const auto batches = static_cast<std::int64_t>((corpus.size() + kEvalBatch - 1) / kEvalBatch);
    std::exception_ptr error;
    // Batches are independent and write disjoint slots of `out`.
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t bi = 0; bi < batches; ++bi) {
        try {
            const std::size_t begin = static_cast<std::size_t>(bi) * kEvalBatch;
            const std::size_t end = std::min(corpus.size(), begin + kEvalBatch);
            std::vector<const sim::Utterance *> utts;
            std::vector<double> gates;
            for (std::size_t i = begin; i < end; ++i) {
                utts.push_back(&corpus.utterances[i]);
                if (gated && bundle.adapters)
                    gates.push_back(model::gating_score(*bundle.gate, corpus.utterances[i]).value);
            }
            const model::Batch batch = model::make_batch(utts);
            Tape tape;
            const auto bv = model::bind(tape, bundle.backbone, false);
            std::optional<model::AdapterVars> av;
            if (bundle.adapters)
                av = model::bind(tape, *bundle.adapters, false);
            std::vector<double> rows;
            if (!gates.empty())
                rows = model::gate_rows(batch, gates);
            const Tensor &lp = tape.value(model::forward(tape, batch, bv, av ? &*av : nullptr,
                                                         rows.empty() ? nullptr : &rows));
            const std::size_t C = lp.cols();
            for (std::size_t k = 0; k < utts.size(); ++k) {
                const std::size_t r0 = batch.offsets[k], r1 = batch.offsets[k + 1];
                Tensor t({r1 - r0, C});
                std::copy(lp.data().begin() + static_cast<std::ptrdiff_t>(r0 * C),
                          lp.data().begin() + static_cast<std::ptrdiff_t>(r1 * C), t.data().begin());
                out[begin + k] = std::move(t);
            }
        } catch (...) {
#pragma omp critical(kdfip_eval_error)
            if (!error)
                error = std::current_exception();
        }
    }
    if (error)
        std::rethrow_exception(error);
    return out;
}

EvalResult evaluate(const model::ModelBundle &bundle, const sim::Corpus &corpus,
                    const sim::VocabSpec &vocab, bool gated) {
    if (corpus.empty())
        throw std::invalid_argument("evaluate: empty corpus");
    if (bundle.backbone.head_w.cols() != vocab.size() + 1)
        throw std::invalid_argument("evaluate: model has " +
                                    std::to_string(bundle.backbone.head_w.cols()) +
                                    " classes, vocabulary needs " + std::to_string(vocab.size() + 1));
    if (bundle.backbone.blocks.at(0).proj_w.rows() != 3 * vocab.dim())
        throw std::invalid_argument("evaluate: model input does not match feature dim");

    const auto lps = corpus_log_probs(bundle, corpus, gated);
    EvalResult r;
    r.role = corpus.role;
    r.utterances = corpus.size();
    r.scores.resize(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const std::string hyp = model::greedy_decode(lps[i], vocab);
        const auto &ref = corpus.utterances[i].transcript;
        r.scores[i] = {edit_distance(ref, hyp), ref.size()};
        if (r.samples.size() < kSamples)
            r.samples.emplace_back(ref, hyp);
    }
    r.cer = cer(r.scores);
    return r;
}

double mean_kl(const model::ModelBundle &teacher, bool teacher_gated,
               const model::ModelBundle &student, bool student_gated, const sim::Corpus &corpus) {
    if (corpus.empty())
        throw std::invalid_argument("mean_kl: empty corpus");
    const auto t = corpus_log_probs(teacher, corpus, teacher_gated);
    const auto s = corpus_log_probs(student, corpus, student_gated);
    double sum = 0.0;
    std::size_t frames = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
        sum += train::kl_frame_loss(t[i], s[i]) * static_cast<double>(t[i].rows());
        frames += t[i].rows();
    }
    return sum / static_cast<double>(frames);
}

double mean_ce(const model::ModelBundle &bundle, bool gated, const sim::Corpus &corpus) {
    if (corpus.empty())
        throw std::invalid_argument("mean_ce: empty corpus");
    const auto lps = corpus_log_probs(bundle, corpus, gated);
    double sum = 0.0;
    std::size_t frames = 0;
    for (std::size_t i = 0; i < lps.size(); ++i) {
        sum += train::ce_frame_loss(lps[i], corpus.utterances[i].frame_labels) *
               static_cast<double>(lps[i].rows());
        frames += lps[i].rows();
    }
    return sum / static_cast<double>(frames);
}

} // namespace kdfip::eval
