// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "kdfip/config.hpp"
#include "kdfip/eval.hpp"
#include "kdfip/model.hpp"
#include "kdfip/sim.hpp"
#include "kdfip/train.hpp"

namespace kdfip::exp {

using Log = std::function<void(const std::string &)>;

/// The world and standard corpora of one run.
struct Workspace {
    RunConfig config;
    std::string config_hash;
    sim::World world;
    sim::Corpus generic_train, generic_test, generic_calib;
    std::vector<sim::Corpus> personal_train, personal_test, synthetic; // one per target

    /// Generates every corpus. With `data_dir`, corpora found there are loaded
    /// instead (their config hash must match unless `force`).
    static Workspace build(const RunConfig &cfg, const std::filesystem::path *data_dir = nullptr,
                           bool force = false);

    model::ModelConfig model_config() const { return config.model_config(); }
};

/// File name used by gen-data and Workspace::build for a corpus.
std::string corpus_file_name(const sim::Corpus &c);

/// Standard corpora written by gen-data.
void write_corpora(const Workspace &ws, const std::filesystem::path &data_dir);

/// Target embeddings from D_per against the held-out generic calibration set.
model::GateCalibration calibrate_target_gate(const Workspace &ws, std::size_t target);

/// Micro-averaged CER pooled over several evaluations.
double pooled_cer(const std::vector<eval::EvalResult> &results);

struct TableRow {
    std::string method;     // Base, FT, Adapter, PGA, FIP, Adapter-FIP, KDFIP
    std::string data_flags; // N/A, D_per, D_per+D_syn
    double generic_cer = 0.0;
    double personal_cer = 0.0;
    std::size_t steps = 0; // optimizer steps of the row's own training stage, per target
};

struct ExperimentGrid {
    std::string run_id;
    std::uint64_t master_seed = 0;
    std::string config_hash;
    std::vector<TableRow> rows;

    const TableRow &row(const std::string &method, const std::string &data_flags) const;
    /// results.json; contains nothing run-dependent beyond the config.
    std::string to_json() const;
    std::string to_markdown() const;
};

/// Deterministic run identifier derived from the config hash and seed.
std::string make_run_id(const std::string &config_hash, std::uint64_t seed);

struct Table1Options {
    /// When set, every trained model is saved here (stage1.ckpt, t<k>/<row>.ckpt)
    /// together with its per-step CSV report.
    std::optional<std::filesystem::path> checkpoint_dir;
    Log log;
};

/// The ten rows: Base; FT, Adapter (= Stage 2), PGA on D_per; FT, Adapter,
/// PGA on D_per+D_syn; FIP; Adapter-FIP (Stage 3); KDFIP (Stage 4). CER is
/// pooled over all targets: generic test once per target model, personal
/// test of each target.
ExperimentGrid run_table1(const Workspace &ws, const Table1Options &opts = {});

/// Prerequisites of the ablations for one target.
struct AblationInputs {
    std::size_t target = 0;
    model::BackboneParams backbone; // Stage 1
    model::ModelBundle stage2;
    model::GatingParams gate;
};

AblationInputs prepare_ablation(const Workspace &ws, std::size_t target, const Log &log = {});

struct BetaRow {
    double beta = 0.0;
    double stage3_generic_cer = 0.0;
    double stage3_personal_cer = 0.0;
    double stage3_kl_drift = 0.0; // held-out personal KL(Stage 2 || Stage 3)
    double stage3_syn_ce = 0.0;   // CE of the Stage 3 model on D_syn
    double stage4_generic_cer = 0.0;
    double stage4_personal_cer = 0.0;
    double stage4_final_kl = 0.0; // KL term at the last Stage 4 step
};

struct DurationRow {
    double multiplier = 0.0;
    std::size_t synthetic_utterances = 0;
    double generic_cer = 0.0; // Stage 3 (or Stage 2 for multiplier 0), ungated
    double personal_cer = 0.0;
};

struct CrossSpeakerRow {
    std::string source; // target, non-target-<j>, no synthetic
    std::uint64_t speaker_id = 0;
    double personal_cer = 0.0;
};

struct AblationReport {
    std::string kind;
    std::size_t target = 0;
    std::vector<BetaRow> beta;
    std::vector<DurationRow> duration;
    std::vector<CrossSpeakerRow> cross_speaker;

    std::string to_csv() const;
};

/// kind is "beta", "duration" or "cross_speaker".
AblationReport run_ablation(const std::string &kind, const Workspace &ws,
                            const AblationInputs &inputs, const Log &log = {});

/// Stage 3 at one beta, with the drift and fit measures of the beta sweep.
struct Stage3Probe {
    model::ModelBundle model;
    double kl_drift = 0.0;
    double syn_ce = 0.0;
    std::size_t steps = 0;
};
Stage3Probe run_stage3_probe(const Workspace &ws, const AblationInputs &inputs, double beta);

} // namespace kdfip::exp
