// SPDX-License-Identifier: Apache-2.0
#include "kdfip/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include <json.hpp>

#include "kdfip/checkpoint.hpp"
#include "kdfip/corpus_io.hpp"
#include "kdfip/io.hpp"
#include "kdfip/rng.hpp"

namespace kdfip::exp {

namespace {

const std::string kPer = "D_per";
const std::string kPerSyn = "D_per+D_syn";

void say(const Log &log, const std::string &msg) {
    if (log)
        log(msg);
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
    return buf;
}

train::MethodSpec spec(train::Method m, bool synthetic, bool generic) {
    train::MethodSpec s;
    s.method = m;
    s.use_personal = true;
    s.use_synthetic = synthetic;
    s.use_generic = generic;
    return s;
}

model::ModelBundle with_gate(model::ModelBundle b, const model::GatingParams &g) {
    b.gate = g;
    return b;
}

model::ModelBundle backbone_only(const model::BackboneParams &b) {
    model::ModelBundle m;
    m.backbone = b;
    return m;
}

struct RowAccumulator {
    std::string method, flags;
    bool gated = false;
    std::vector<eval::EvalResult> generic, personal;
    std::size_t steps = 0;
};

} // namespace

std::string corpus_file_name(const sim::Corpus &c) { return c.name + ".corpus"; }

Workspace Workspace::build(const RunConfig &cfg, const std::filesystem::path *data_dir, bool force) {
    cfg.validate();
    Workspace ws;
    ws.config = cfg;
    ws.config_hash = kdfip::config_hash(cfg);
    ws.world = sim::World::build(cfg.seed, cfg.sim);

    auto get = [&](const sim::CorpusRequest &req) {
        if (data_dir) {
            const auto path = *data_dir / (req.name + ".corpus");
            if (std::filesystem::exists(path)) {
                sim::CorpusFile f = sim::load_corpus(path);
                if (f.config_hash != ws.config_hash && !force)
                    throw std::runtime_error(path.string() + ": config hash " + f.config_hash +
                                             " does not match " + ws.config_hash +
                                             " (pass --force to accept)");
                if (f.characters != ws.world.vocab.characters ||
                    f.feature_dim != ws.world.vocab.dim())
                    throw std::runtime_error(path.string() + ": vocabulary does not match the config");
                return std::move(f.corpus);
            }
        }
        return sim::gen_corpus(ws.world, req);
    };

    ws.generic_train = get(sim::generic_request(ws.world, sim::Split::Train));
    ws.generic_test = get(sim::generic_request(ws.world, sim::Split::Test));
    ws.generic_calib = get(sim::generic_request(ws.world, sim::Split::Calib));
    for (std::size_t t = 0; t < cfg.sim.targets; ++t) {
        ws.personal_train.push_back(get(sim::personal_request(ws.world, t, sim::Split::Train)));
        ws.personal_test.push_back(get(sim::personal_request(ws.world, t, sim::Split::Test)));
        ws.synthetic.push_back(get(sim::synthetic_request(ws.world, t)));
    }
    return ws;
}

void write_corpora(const Workspace &ws, const std::filesystem::path &data_dir) {
    auto put = [&](const sim::Corpus &c) {
        sim::save_corpus(data_dir / corpus_file_name(c), c, ws.world.vocab, ws.config_hash);
    };
    put(ws.generic_train);
    put(ws.generic_test);
    put(ws.generic_calib);
    for (std::size_t t = 0; t < ws.personal_train.size(); ++t) {
        put(ws.personal_train[t]);
        put(ws.personal_test[t]);
        put(ws.synthetic[t]);
    }
}

model::GateCalibration calibrate_target_gate(const Workspace &ws, std::size_t target) {
    std::vector<Tensor> tgt, non;
    for (const auto &u : ws.personal_train.at(target).utterances)
        tgt.push_back(sim::utterance_embedding(u));
    for (const auto &u : ws.generic_calib.utterances)
        non.push_back(sim::utterance_embedding(u));
    return model::calibrate_gate(tgt, non);
}

double pooled_cer(const std::vector<eval::EvalResult> &results) {
    std::vector<eval::UtteranceScore> all;
    for (const auto &r : results)
        all.insert(all.end(), r.scores.begin(), r.scores.end());
    return eval::cer(all);
}

const TableRow &ExperimentGrid::row(const std::string &method, const std::string &data_flags) const {
    for (const auto &r : rows)
        if (r.method == method && r.data_flags == data_flags)
            return r;
    throw std::out_of_range("no row " + method + " / " + data_flags);
}

std::string ExperimentGrid::to_json() const {
    nlohmann::ordered_json j;
    j["run_id"] = run_id;
    j["master_seed"] = master_seed;
    j["rows"] = nlohmann::ordered_json::array();
    for (const auto &r : rows)
        j["rows"].push_back({{"method", r.method},
                             {"data_flags", r.data_flags},
                             {"generic_cer", r.generic_cer},
                             {"personal_cer", r.personal_cer},
                             {"steps", r.steps}});
    j["config_hash"] = config_hash;
    j["cer_average"] = "micro";
    return j.dump(2) + "\n";
}

std::string ExperimentGrid::to_markdown() const {
    std::string out = "| Row | Model | Adaptation data | Generic CER (%) | Personal CER (%) | Steps |\n"
                      "|---|---|---|---|---|---|\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto &r = rows[i];
        std::string name = r.method;
        if (r.method == "Base") name += " (Stage 1)";
        else if (r.method == "Adapter" && r.data_flags == kPer) name += " (Stage 2)";
        else if (r.method == "Adapter-FIP") name += " (Stage 3)";
        else if (r.method == "KDFIP") name += " (Stage 4)";
        out += "| " + std::to_string(i + 1) + " | " + name + " | " + r.data_flags + " | " +
               pct(r.generic_cer) + " | " + pct(r.personal_cer) + " | " +
               (r.steps ? std::to_string(r.steps) : std::string("-")) + " |\n";
    }
    out += "\nCER is micro-averaged (total edit distance over total reference length), "
           "pooled over target speakers. Seed " +
           std::to_string(master_seed) + ", config " + config_hash + ".\n";
    return out;
}

std::string make_run_id(const std::string &config_hash, std::uint64_t seed) {
    return io::hex64(rng::Key{seed}.child(config_hash).value);
}

ExperimentGrid run_table1(const Workspace &ws, const Table1Options &opts) {
    const RunConfig &cfg = ws.config;
    const model::ModelConfig mc = ws.model_config();
    const auto &log = opts.log;

    auto save = [&](const std::filesystem::path &rel, const model::ModelBundle &m,
                    const std::string &stage, const train::TrainReport *report, std::size_t target,
                    const std::string &data_flags) {
        if (!opts.checkpoint_dir)
            return;
        const auto path = *opts.checkpoint_dir / rel;
        Checkpoint ckpt =
            make_checkpoint(m, stage, ws.config_hash, report ? report->steps.size() : 0, target);
        ckpt.data_flags = data_flags;
        save_checkpoint(path, ckpt);
        if (report) {
            auto csv = path;
            csv.replace_extension(".csv");
            io::atomic_write(csv, report->to_csv());
        }
    };

    say(log, "stage 1: training backbone on " + std::to_string(ws.generic_train.size()) +
                 " generic utterances");
    const auto s1 = train::train_stage1(mc, cfg.stage("stage1"), ws.generic_train);
    const model::BackboneParams &wb = s1.model.backbone;
    save("stage1.ckpt", s1.model, "1", &s1.report, 0, "D_g");

    std::vector<RowAccumulator> acc(10);
    const char *methods[] = {"Base", "FT",  "Adapter", "PGA",         "FT",
                             "Adapter", "PGA", "FIP", "Adapter-FIP", "KDFIP"};
    const std::string flags[] = {"N/A", kPer, kPer, kPer, kPerSyn,
                                 kPerSyn, kPerSyn, kPerSyn, kPerSyn, kPerSyn};
    for (std::size_t i = 0; i < 10; ++i) {
        acc[i].method = methods[i];
        acc[i].flags = flags[i];
        acc[i].gated = acc[i].method == "PGA" || acc[i].method == "KDFIP";
    }

    for (std::size_t t = 0; t < cfg.sim.targets; ++t) {
        const std::string tag = "target " + std::to_string(t) + ": ";
        const std::filesystem::path dir = "t" + std::to_string(t);
        const sim::Corpus &per = ws.personal_train[t];
        const sim::Corpus &syn = ws.synthetic[t];
        const auto gate = calibrate_target_gate(ws, t).params;

        std::vector<model::ModelBundle> models(10);
        auto record = [&](std::size_t row, model::ModelBundle m, const train::TrainReport *report) {
            if (report && t == 0)
                acc[row].steps = report->steps.size();
            models[row] = std::move(m);
        };

        train::BaselineInputs in;
        in.model_config = &mc;
        in.backbone = &wb;
        in.personal = &per;
        in.generic = &ws.generic_train;

        record(0, backbone_only(wb), nullptr);

        say(log, tag + "FT on D_per");
        auto ft = train::train_baseline(spec(train::Method::FT, false, false), cfg.stage("ft", t), in);
        save(dir / "ft-per.ckpt", ft.model, "FT", &ft.report, t, kPer);
        record(1, ft.model, &ft.report);

        say(log, tag + "stage 2 (adapter on D_per)");
        auto s2 = train::train_stage2(mc, cfg.stage("stage2", t), wb, per);
        save(dir / "stage2.ckpt", s2.model, "2", &s2.report, t, kPer);
        record(2, s2.model, &s2.report);

        say(log, tag + "PGA on D_per");
        in.adapter_hat = &*s2.model.adapters;
        in.gate = &gate;
        auto pga = train::train_baseline(spec(train::Method::PGA, false, true), cfg.stage("pga", t), in);
        save(dir / "pga-per.ckpt", pga.model, "PGA", &pga.report, t, kPer);
        record(3, pga.model, &pga.report);

        in.synthetic = &syn;
        say(log, tag + "FT on D_per+D_syn");
        auto ft2 = train::train_baseline(spec(train::Method::FT, true, false), cfg.stage("ft", t), in);
        save(dir / "ft-per-syn.ckpt", ft2.model, "FT", &ft2.report, t, kPerSyn);
        record(4, ft2.model, &ft2.report);

        say(log, tag + "Adapter on D_per+D_syn");
        auto ad = train::train_baseline(spec(train::Method::Adapter, true, false),
                                        cfg.stage("adapter", t), in);
        save(dir / "adapter-per-syn.ckpt", ad.model, "Adapter", &ad.report, t, kPerSyn);
        record(5, ad.model, &ad.report);

        say(log, tag + "PGA on D_per+D_syn");
        in.adapter_hat = &*ad.model.adapters;
        auto pga2 = train::train_baseline(spec(train::Method::PGA, true, true), cfg.stage("pga", t), in);
        save(dir / "pga-per-syn.ckpt", pga2.model, "PGA", &pga2.report, t, kPerSyn);
        record(6, pga2.model, &pga2.report);

        say(log, tag + "FIP on D_per+D_syn");
        auto fip = train::train_baseline(spec(train::Method::FIP, true, true), cfg.stage("fip", t), in);
        save(dir / "fip-per-syn.ckpt", fip.model, "FIP", &fip.report, t, kPerSyn);
        record(7, fip.model, &fip.report);

        say(log, tag + "stage 3 (adapter on D_syn, KL on D_per)");
        auto s3 = train::train_stage3(cfg.stage("stage3", t), s2.model, syn, per);
        const model::ModelBundle s3_gated = with_gate(s3.model, gate);
        save(dir / "stage3.ckpt", s3_gated, "3", &s3.report, t, kPerSyn);
        record(8, s3_gated, &s3.report);

        say(log, tag + "stage 4 (gated backbone on D_g, KL on D_per)");
        auto s4 = train::train_stage4(cfg.stage("stage4", t), s3_gated, ws.generic_train, per);
        save(dir / "stage4.ckpt", s4.model, "4", &s4.report, t, kPerSyn);
        record(9, s4.model, &s4.report);

        for (std::size_t i = 0; i < 10; ++i) {
            acc[i].generic.push_back(
                eval::evaluate(models[i], ws.generic_test, ws.world.vocab, acc[i].gated));
            acc[i].personal.push_back(
                eval::evaluate(models[i], ws.personal_test[t], ws.world.vocab, acc[i].gated));
        }
    }

    ExperimentGrid grid;
    grid.master_seed = cfg.seed;
    grid.config_hash = ws.config_hash;
    grid.run_id = make_run_id(ws.config_hash, cfg.seed);
    for (const auto &a : acc)
        grid.rows.push_back({a.method, a.flags, pooled_cer(a.generic), pooled_cer(a.personal), a.steps});
    return grid;
}

AblationInputs prepare_ablation(const Workspace &ws, std::size_t target, const Log &log) {
    const model::ModelConfig mc = ws.model_config();
    AblationInputs in;
    in.target = target;
    say(log, "stage 1");
    in.backbone = train::train_stage1(mc, ws.config.stage("stage1"), ws.generic_train).model.backbone;
    say(log, "stage 2, target " + std::to_string(target));
    in.stage2 = train::train_stage2(mc, ws.config.stage("stage2", target), in.backbone,
                                    ws.personal_train.at(target))
                    .model;
    in.gate = calibrate_target_gate(ws, target).params;
    return in;
}

Stage3Probe run_stage3_probe(const Workspace &ws, const AblationInputs &inputs, double beta) {
    const std::size_t t = inputs.target;
    train::StageConfig cfg = ws.config.stage("stage3", t);
    cfg.beta = beta;
    auto r = train::train_stage3(cfg, inputs.stage2, ws.synthetic.at(t), ws.personal_train.at(t));
    Stage3Probe p;
    p.kl_drift = eval::mean_kl(inputs.stage2, false, r.model, false, ws.personal_test.at(t));
    p.syn_ce = eval::mean_ce(r.model, false, ws.synthetic.at(t));
    p.steps = r.report.steps.size();
    p.model = std::move(r.model);
    return p;
}

AblationReport run_ablation(const std::string &kind, const Workspace &ws,
                            const AblationInputs &inputs, const Log &log) {
    if (kind != "beta" && kind != "duration" && kind != "cross_speaker")
        throw std::invalid_argument("unknown ablation kind '" + kind +
                                    "' (expected beta, duration or cross_speaker)");
    const std::size_t t = inputs.target;
    if (t >= ws.personal_train.size())
        throw std::invalid_argument("ablation target " + std::to_string(t) + " out of range");
    if (!inputs.stage2.adapters)
        throw std::invalid_argument("ablation: the Stage 2 model has no adapters");
    const auto &vocab = ws.world.vocab;
    const auto &per_test = ws.personal_test[t];
    AblationReport rep;
    rep.kind = kind;
    rep.target = t;

    auto personal = [&](const model::ModelBundle &m, bool gated) {
        return eval::evaluate(m, per_test, vocab, gated).cer;
    };
    auto generic = [&](const model::ModelBundle &m, bool gated) {
        return eval::evaluate(m, ws.generic_test, vocab, gated).cer;
    };

    if (kind == "beta") {
        for (double beta : ws.config.ablation.betas) {
            say(log, "beta " + fmt(beta) + ": stage 3");
            const Stage3Probe p = run_stage3_probe(ws, inputs, beta);
            BetaRow row;
            row.beta = beta;
            row.stage3_generic_cer = generic(p.model, false);
            row.stage3_personal_cer = personal(p.model, false);
            row.stage3_kl_drift = p.kl_drift;
            row.stage3_syn_ce = p.syn_ce;
            say(log, "beta " + fmt(beta) + ": stage 4");
            train::StageConfig c4 = ws.config.stage("stage4", t);
            c4.beta = beta;
            const auto s4 = train::train_stage4(c4, with_gate(p.model, inputs.gate),
                                                ws.generic_train, ws.personal_train[t]);
            row.stage4_generic_cer = generic(s4.model, true);
            row.stage4_personal_cer = personal(s4.model, true);
            row.stage4_final_kl = s4.report.steps.empty() ? 0.0 : s4.report.steps.back().loss_kl;
            rep.beta.push_back(row);
        }
    } else if (kind == "duration") {
        const train::StageConfig c3 = ws.config.stage("stage3", t);
        for (double m : ws.config.ablation.multipliers) {
            const auto count = static_cast<std::size_t>(
                std::llround(m * static_cast<double>(ws.config.sim.synthetic)));
            DurationRow row;
            row.multiplier = m;
            row.synthetic_utterances = count;
            if (count == 0) {
                row.generic_cer = generic(inputs.stage2, false);
                row.personal_cer = personal(inputs.stage2, false);
            } else {
                say(log, "duration x" + fmt(m) + ": " + std::to_string(count) + " synthetic utterances");
                const sim::Corpus syn = sim::gen_corpus(
                    ws.world, sim::synthetic_request(ws.world, t, std::nullopt, count));
                const auto s3 = train::train_stage3(c3, inputs.stage2, syn, ws.personal_train[t]);
                row.generic_cer = generic(s3.model, false);
                row.personal_cer = personal(s3.model, false);
            }
            rep.duration.push_back(row);
        }
    } else {
        const train::StageConfig c3 = ws.config.stage("stage3", t);
        auto run = [&](const std::string &source, const sim::SpeakerProfile &speaker) {
            say(log, "cross-speaker: " + source);
            sim::CorpusRequest req = sim::synthetic_request(ws.world, t);
            req.speakers = {speaker};
            const sim::Corpus syn = sim::gen_corpus(ws.world, req);
            const auto s3 = train::train_stage3(c3, inputs.stage2, syn, ws.personal_train[t]);
            rep.cross_speaker.push_back({source, speaker.speaker_id, personal(s3.model, false)});
        };
        run("target", ws.world.targets[t]);
        for (std::size_t j = 0; j < ws.config.ablation.non_targets; ++j)
            run("non-target-" + std::to_string(j), ws.world.non_target_speaker(j));
        rep.cross_speaker.push_back({"no synthetic", ws.world.targets[t].speaker_id,
                                     personal(inputs.stage2, false)});
    }
    return rep;
}

std::string AblationReport::to_csv() const {
    std::string out;
    if (kind == "beta") {
        out = "beta,stage3_generic_cer,stage3_personal_cer,stage3_kl_drift,stage3_syn_ce,"
              "stage4_generic_cer,stage4_personal_cer,stage4_final_kl\n";
        for (const auto &r : beta)
            out += fmt(r.beta) + "," + fmt(r.stage3_generic_cer) + "," + fmt(r.stage3_personal_cer) +
                   "," + fmt(r.stage3_kl_drift) + "," + fmt(r.stage3_syn_ce) + "," +
                   fmt(r.stage4_generic_cer) + "," + fmt(r.stage4_personal_cer) + "," +
                   fmt(r.stage4_final_kl) + "\n";
    } else if (kind == "duration") {
        out = "multiplier,synthetic_utterances,generic_cer,personal_cer\n";
        for (const auto &r : duration)
            out += fmt(r.multiplier) + "," + std::to_string(r.synthetic_utterances) + "," +
                   fmt(r.generic_cer) + "," + fmt(r.personal_cer) + "\n";
    } else {
        out = "source,speaker_id,personal_cer\n";
        for (const auto &r : cross_speaker)
            out += r.source + "," + std::to_string(r.speaker_id) + "," + fmt(r.personal_cer) + "\n";
    }
    return out;
}

} // namespace kdfip::exp
