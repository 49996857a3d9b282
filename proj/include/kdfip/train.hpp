// SPDX-License-Identifier: Apache-2.0
#pragma once

// Staged adaptation. Every stage and baseline is one TrainPlan: a student,
// which of its parts move, a new-task CE pool and optionally an old-task KL
// pool scored against a frozen teacher. Each optimizer step draws one CE batch
// and (when a KL pool exists) one KL batch; the loss is CE + beta * KL.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "kdfip/model.hpp"
#include "kdfip/sim.hpp"

namespace kdfip::train {

enum class LrSchedule {
    Constant,
    Linear, // lr * (1 - step / total_steps)
};

std::string_view to_string(LrSchedule s);
LrSchedule parse_schedule(std::string_view s);

struct StageConfig {
    double beta = 0.01;
    double lr = 1.5e-3;
    LrSchedule schedule = LrSchedule::Linear;
    std::size_t epochs = 3;
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;

    void validate() const;
    double lr_at(std::size_t step, std::size_t total_steps) const;
};

enum class Method { KDFIP, FT, Adapter, PGA, FIP };

std::string_view to_string(Method m);
Method parse_method(std::string_view s);

struct MethodSpec {
    Method method = Method::KDFIP;
    bool use_personal = true;
    bool use_synthetic = false;
    bool use_generic = false;

    /// Rejects flag sets that do not match the method's objective.
    void validate() const;
    std::string data_flags() const; // e.g. "D_per+D_syn"
};

enum class Part { Backbone, Adapters };

enum class GateMode {
    Ungated, // H = H_b + H_a (or backbone alone when there are no adapters)
    Gated,   // H = H_b + g(x) * H_a
};

struct StepRecord {
    std::size_t step = 0;
    std::string stage;
    double loss_ce = 0.0;
    double loss_kl = 0.0;
    double total = 0.0;
    double lr = 0.0;
};

struct TrainReport {
    std::string stage;
    double beta = 0.0;
    std::vector<StepRecord> steps;
    /// KL of the first step (nonzero at Stage 4 when gates on personal data < 1).
    std::optional<double> initial_kl;
    double wall_seconds = 0.0;

    std::string to_csv() const;
};

struct TrainPlan {
    std::string label;
    StageConfig cfg;
    model::ModelBundle student;
    Part trainable = Part::Backbone;
    GateMode student_mode = GateMode::Ungated;
    std::vector<const sim::Corpus *> ce_data;
    std::vector<const sim::Corpus *> kl_data;
    std::optional<model::ModelBundle> teacher;
    GateMode teacher_mode = GateMode::Ungated;
    /// When false, no KL batches are drawn even if kl_data is set.
    bool use_kl = true;
};

struct TrainResult {
    model::ModelBundle model;
    TrainReport report;
};

/// Called after every optimizer step with the 0-based step index.
using StepObserver = std::function<void(std::size_t, const model::ModelBundle &)>;

TrainResult run_plan(const TrainPlan &plan, const StepObserver &observer = {});

/// Gate value per utterance of `corpus` under `gate`.
std::vector<double> corpus_gates(const model::GatingParams &gate, const sim::Corpus &corpus);

/// Stage 1: backbone from scratch, CE on generic data.
TrainResult train_stage1(const model::ModelConfig &mc, const StageConfig &cfg,
                         const sim::Corpus &generic);
/// Stage 2: zero-initialised adapters on a frozen backbone, CE on personal data.
TrainResult train_stage2(const model::ModelConfig &mc, const StageConfig &cfg,
                         const model::BackboneParams &backbone, const sim::Corpus &personal);
/// Stage 3: adapters from Stage 2, CE on synthetic + beta * KL on personal
/// against the frozen Stage 2 model.
TrainResult train_stage3(const StageConfig &cfg, const model::ModelBundle &stage2,
                         const sim::Corpus &synthetic, const sim::Corpus &personal,
                         bool use_kl = true);
/// Stage 4: backbone from Stage 1, gated student, CE on generic + beta * KL on
/// personal against the ungated Stage 3 model. `stage3` must carry a gate.
TrainResult train_stage4(const StageConfig &cfg, const model::ModelBundle &stage3,
                         const sim::Corpus &generic, const sim::Corpus &personal);

struct BaselineInputs {
    const model::ModelConfig *model_config = nullptr;
    const model::BackboneParams *backbone = nullptr;  // w_b*
    const model::AdapterParams *adapter_hat = nullptr; // adapters from the Adapter baseline (PGA)
    const model::GatingParams *gate = nullptr;          // PGA
    const sim::Corpus *personal = nullptr;
    const sim::Corpus *synthetic = nullptr;
    const sim::Corpus *generic = nullptr;
};

TrainResult train_baseline(const MethodSpec &method, const StageConfig &cfg,
                           const BaselineInputs &in);

/// Seed key used to initialise adapters (shared by Stage 2 and the Adapter baseline).
rng::Key adapter_init_key(const StageConfig &cfg);

} // namespace kdfip::train
