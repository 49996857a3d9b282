// SPDX-License-Identifier: Apache-2.0
#include "kdfip/cli.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "kdfip/checkpoint.hpp"
#include "kdfip/config.hpp"
#include "kdfip/diagnostics.hpp"
#include "kdfip/eval.hpp"
#include "kdfip/experiment.hpp"
#include "kdfip/gradcheck_suite.hpp"
#include "kdfip/io.hpp"
#include "kdfip/rng.hpp"
#include "kdfip/train.hpp"

namespace kdfip {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Failure of a well-formed command; reported as one JSON line.
struct CommandError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Common {
    std::string config_path;
    std::string out;
    bool force = false;
};

struct Loaded {
    RunConfig config;
    fs::path out;
};

Loaded load(const Common &c) {
    Loaded l;
    l.config = c.config_path.empty() ? parse_config("") : load_config(c.config_path);
    l.out = c.out.empty() ? fs::path(l.config.output_dir) : fs::path(c.out);
    return l;
}

void log_line(const std::string &msg) { std::cerr << "kdfip: " << msg << "\n"; }

exp::Workspace workspace(const Loaded &l, bool force) {
    const fs::path data = l.out / "data";
    return exp::Workspace::build(l.config, &data, force);
}

/// Relative paths are tried as given first, then under --out.
fs::path resolve(const std::string &p, const fs::path &out) {
    const fs::path given(p);
    if (given.is_absolute() || fs::exists(given))
        return given;
    if (fs::exists(out / given))
        return out / given;
    return given;
}

Checkpoint load_input(const fs::path &path, const std::string &what, const exp::Workspace &ws,
                      bool force) {
    if (!fs::exists(path))
        throw CommandError(what + " checkpoint not found: " + path.string());
    Checkpoint c = load_checkpoint(path);
    if (c.config_hash != ws.config_hash && !force)
        throw CommandError(path.string() + ": config hash " + c.config_hash + " does not match " +
                           ws.config_hash + " (pass --force to accept)");
    return c;
}

void require_stage(const Checkpoint &c, const fs::path &path, const std::string &stage,
                   const std::string &what) {
    if (c.stage != stage)
        throw CommandError(path.string() + ": expected a " + what + " checkpoint, found stage '" +
                           c.stage + "'");
}

std::string target_dir(std::size_t t) { return "t" + std::to_string(t); }

void save_model(const fs::path &path, const model::ModelBundle &m, const std::string &stage,
                const train::TrainReport &report, const exp::Workspace &ws, std::size_t target,
                const std::string &flags) {
    Checkpoint c = make_checkpoint(m, stage, ws.config_hash, report.steps.size(), target);
    c.data_flags = flags;
    save_checkpoint(path, c);
    fs::path csv = path;
    csv.replace_extension(".csv");
    io::atomic_write(csv, report.to_csv());
    std::cout << "wrote " << path.string() << " (" << report.steps.size() << " steps)\n";
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Common &common) {
    const Loaded l = load(common);
    const auto ws = exp::Workspace::build(l.config);
    const fs::path dir = l.out / "data";
    exp::write_corpora(ws, dir);
    std::cout << "wrote corpora to " << dir.string() << " (config " << ws.config_hash << ")\n";
    return 0;
}

struct TrainArgs {
    std::optional<int> stage;
    std::string method;
    bool synthetic = false;
    std::size_t target = 0;
    std::string init;
    std::string adapter;
};

train::Method method_from(const std::string &name) {
    std::string lower = name;
    std::transform(lower.begin(), lower.end(), lower.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    for (train::Method m : {train::Method::FT, train::Method::Adapter, train::Method::PGA,
                            train::Method::FIP, train::Method::KDFIP}) {
        std::string n(train::to_string(m));
        std::transform(n.begin(), n.end(), n.begin(),
                       [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        if (n == lower)
            return m;
    }
    throw CommandError("unknown method '" + name + "' (expected ft, adapter, pga or fip)");
}

int cmd_train(const Common &common, const TrainArgs &a) {
    if (a.stage.has_value() == !a.method.empty())
        throw CommandError("train needs exactly one of --stage or --method");
    const Loaded l = load(common);
    if (a.target >= l.config.sim.targets)
        throw CommandError("--target " + std::to_string(a.target) + " is out of range (targets = " +
                           std::to_string(l.config.sim.targets) + ")");
    const fs::path ckdir = l.out / "checkpoints";
    const fs::path tdir = ckdir / target_dir(a.target);
    const std::size_t t = a.target;

    // Prerequisites are checked before any corpus is generated.
    auto need_init = [&](const std::string &what, const fs::path &usual) {
        if (a.init.empty())
            throw CommandError("missing " + what + " checkpoint: pass --init (usually " +
                               usual.string() + ")");
        return resolve(a.init, l.out);
    };

    if (a.stage) {
        const int s = *a.stage;
        if (s < 1 || s > 4)
            throw CommandError("--stage must be 1, 2, 3 or 4");
        if (s == 1) {
            const auto ws = workspace(l, common.force);
            log_line("stage 1 on " + std::to_string(ws.generic_train.size()) + " generic utterances");
            const auto r = train::train_stage1(ws.model_config(), l.config.stage("stage1"),
                                               ws.generic_train);
            save_model(ckdir / "stage1.ckpt", r.model, "1", r.report, ws, 0, "D_g");
            return 0;
        }
        const char *prev[] = {"", "", "Stage 1", "Stage 2", "Stage 3"};
        const fs::path usual = s == 2 ? ckdir / "stage1.ckpt"
                                      : tdir / ("stage" + std::to_string(s - 1) + ".ckpt");
        const fs::path init = need_init(prev[s], usual);
        const auto ws = workspace(l, common.force);
        const auto mc = ws.model_config();
        const Checkpoint in = load_input(init, prev[s], ws, common.force);
        require_stage(in, init, std::to_string(s - 1), prev[s]);
        const model::ModelBundle base = checkpoint_bundle(in, mc);
        if (s == 2) {
            const auto r = train::train_stage2(mc, l.config.stage("stage2", t), base.backbone,
                                               ws.personal_train[t]);
            save_model(tdir / "stage2.ckpt", r.model, "2", r.report, ws, t, "D_per");
        } else if (s == 3) {
            auto r = train::train_stage3(l.config.stage("stage3", t), base, ws.synthetic[t],
                                         ws.personal_train[t]);
            r.model.gate = exp::calibrate_target_gate(ws, t).params;
            save_model(tdir / "stage3.ckpt", r.model, "3", r.report, ws, t, "D_per+D_syn");
        } else {
            model::ModelBundle s3 = base;
            if (!s3.gate)
                s3.gate = exp::calibrate_target_gate(ws, t).params;
            const auto r = train::train_stage4(l.config.stage("stage4", t), s3, ws.generic_train,
                                               ws.personal_train[t]);
            save_model(tdir / "stage4.ckpt", r.model, "4", r.report, ws, t, "D_per+D_syn");
        }
        return 0;
    }

    const train::Method m = method_from(a.method);
    if (m == train::Method::KDFIP)
        throw CommandError("KDFIP is trained with --stage 1..4");
    train::MethodSpec spec;
    spec.method = m;
    spec.use_synthetic = a.synthetic;
    spec.use_generic = m == train::Method::PGA || m == train::Method::FIP;
    try {
        spec.validate();
    } catch (const std::invalid_argument &e) {
        throw CommandError(e.what());
    }
    if (m == train::Method::PGA && a.adapter.empty())
        throw CommandError("missing adapter checkpoint: PGA needs --adapter <Adapter or Stage 2 "
                           "checkpoint>");
    const fs::path init = need_init("Stage 1", ckdir / "stage1.ckpt");
    const auto ws = workspace(l, common.force);
    const auto mc = ws.model_config();
    const Checkpoint in = load_input(init, "Stage 1", ws, common.force);
    require_stage(in, init, "1", "Stage 1");
    const model::ModelBundle base = checkpoint_bundle(in, mc);

    train::BaselineInputs bi;
    bi.model_config = &mc;
    bi.backbone = &base.backbone;
    bi.personal = &ws.personal_train[t];
    bi.generic = &ws.generic_train;
    if (a.synthetic)
        bi.synthetic = &ws.synthetic[t];
    model::ModelBundle adapter_src;
    const model::GatingParams gate = exp::calibrate_target_gate(ws, t).params;
    if (m == train::Method::PGA) {
        const fs::path ap = resolve(a.adapter, l.out);
        const Checkpoint ac = load_input(ap, "adapter", ws, common.force);
        adapter_src = checkpoint_bundle(ac, mc);
        if (!adapter_src.adapters)
            throw CommandError(ap.string() + ": checkpoint holds no adapters");
        bi.adapter_hat = &*adapter_src.adapters;
        bi.gate = &gate;
    }

    std::string section(train::to_string(m));
    std::transform(section.begin(), section.end(), section.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    const auto r = train::train_baseline(spec, l.config.stage(section, t), bi);
    const std::string file = section + (a.synthetic ? "-per-syn" : "-per") + ".ckpt";
    save_model(tdir / file, r.model, std::string(train::to_string(m)), r.report, ws, t,
               a.synthetic ? "D_per+D_syn" : "D_per");
    return 0;
}

struct EvalArgs {
    std::vector<std::string> ckpts;
    bool gated = false;
    bool ungated = false;
};

std::string row_method(const std::string &stage) {
    if (stage == "1") return "Base";
    if (stage == "2") return "Adapter";
    if (stage == "3") return "Adapter-FIP";
    if (stage == "4") return "KDFIP";
    return stage;
}

int cmd_eval(const Common &common, const EvalArgs &a) {
    if (a.gated && a.ungated)
        throw CommandError("--gated and --ungated are exclusive");
    const Loaded l = load(common);
    std::vector<std::pair<fs::path, Checkpoint>> inputs;
    for (const auto &p : a.ckpts) {
        const fs::path path = resolve(p, l.out);
        if (!fs::exists(path))
            throw CommandError("checkpoint not found: " + path.string());
        inputs.emplace_back(path, load_checkpoint(path));
    }
    const auto ws = workspace(l, common.force);
    const auto mc = ws.model_config();

    json rows = json::array();
    for (const auto &[path, c] : inputs) {
        if (c.config_hash != ws.config_hash && !common.force)
            throw CommandError(path.string() + ": config hash " + c.config_hash +
                               " does not match " + ws.config_hash + " (pass --force to accept)");
        if (c.target >= ws.personal_test.size())
            throw CommandError(path.string() + ": target " + std::to_string(c.target) +
                               " is out of range");
        const model::ModelBundle m = checkpoint_bundle(c, mc);
        bool gated = m.gate.has_value() && m.adapters.has_value() &&
                     (c.stage == "4" || c.stage == "PGA");
        if (a.gated) {
            if (!m.gate || !m.adapters)
                throw CommandError(path.string() + ": --gated needs adapters and a gate");
            gated = true;
        }
        if (a.ungated)
            gated = false;
        const auto g = eval::evaluate(m, ws.generic_test, ws.world.vocab, gated);
        const auto p = eval::evaluate(m, ws.personal_test[c.target], ws.world.vocab, gated);
        rows.push_back({{"checkpoint", path.filename().string()},
                        {"method", row_method(c.stage)},
                        {"data_flags", c.data_flags},
                        {"target", c.target},
                        {"gated", gated},
                        {"generic_cer", g.cer},
                        {"personal_cer", p.cer},
                        {"steps", c.step}});
        char line[256];
        std::snprintf(line, sizeof line, "%-28s generic %.2f%%  personal %.2f%%%s\n",
                      path.string().c_str(), 100.0 * g.cer, 100.0 * p.cer, gated ? "  (gated)" : "");
        std::cout << line;
    }
    json out = {{"run_id", exp::make_run_id(ws.config_hash, l.config.seed)},
                {"master_seed", l.config.seed},
                {"config_hash", ws.config_hash},
                {"rows", rows}};
    io::atomic_write(l.out / "results.json", out.dump(2) + "\n");
    return 0;
}

int cmd_experiment(const Common &common) {
    const Loaded l = load(common);
    const auto ws = workspace(l, common.force);
    exp::Table1Options opts;
    opts.checkpoint_dir = l.out / "checkpoints";
    opts.log = log_line;
    const auto grid = exp::run_table1(ws, opts);
    io::atomic_write(l.out / "config.json", serialize_config(l.config));
    io::atomic_write(l.out / "results.json", grid.to_json());
    io::atomic_write(l.out / "table1.md", grid.to_markdown());
    std::cout << grid.to_markdown();
    return 0;
}

struct AblateArgs {
    std::string kind;
    std::optional<std::size_t> target;
};

int cmd_ablate(const Common &common, const AblateArgs &a) {
    if (a.kind != "beta" && a.kind != "duration" && a.kind != "cross_speaker")
        throw CommandError("unknown ablation kind '" + a.kind +
                           "' (expected beta, duration or cross_speaker)");
    const Loaded l = load(common);
    const std::size_t t = a.target.value_or(l.config.ablation.target);
    if (t >= l.config.sim.targets)
        throw CommandError("--target " + std::to_string(t) + " is out of range");
    const fs::path s1 = l.out / "checkpoints" / "stage1.ckpt";
    const fs::path s2 = l.out / "checkpoints" / target_dir(t) / "stage2.ckpt";
    if (!fs::exists(s1))
        throw CommandError("missing Stage 1 checkpoint " + s1.string() +
                           " (run experiment or train --stage 1 first)");
    if (!fs::exists(s2))
        throw CommandError("missing Stage 2 checkpoint " + s2.string() +
                           " (run experiment or train --stage 2 first)");
    const auto ws = workspace(l, common.force);
    const auto mc = ws.model_config();
    const Checkpoint c1 = load_input(s1, "Stage 1", ws, common.force);
    const Checkpoint c2 = load_input(s2, "Stage 2", ws, common.force);
    require_stage(c1, s1, "1", "Stage 1");
    require_stage(c2, s2, "2", "Stage 2");

    exp::AblationInputs in;
    in.target = t;
    in.backbone = checkpoint_bundle(c1, mc).backbone;
    in.stage2 = checkpoint_bundle(c2, mc);
    in.gate = exp::calibrate_target_gate(ws, t).params;
    const auto report = exp::run_ablation(a.kind, ws, in, log_line);
    const fs::path path = l.out / ("ablation-" + a.kind + ".csv");
    io::atomic_write(path, report.to_csv());
    std::cout << report.to_csv();
    return 0;
}

struct DiagnoseArgs {
    std::string ckpt;
    std::size_t utterance = 0;
    std::uint64_t direction_seed = 0;
    std::vector<double> scales{1e-2, 5e-3, 2.5e-3};
    double h = 1e-6;
};

int cmd_diagnose(const Common &common, const DiagnoseArgs &a) {
    const Loaded l = load(common);
    const fs::path path = resolve(a.ckpt, l.out);
    if (!fs::exists(path))
        throw CommandError("checkpoint not found: " + path.string());
    const Checkpoint c = load_checkpoint(path);
    const auto ws = workspace(l, common.force);
    if (c.config_hash != ws.config_hash && !common.force)
        throw CommandError(path.string() + ": config hash " + c.config_hash + " does not match " +
                           ws.config_hash + " (pass --force to accept)");
    const auto &test = ws.personal_test.at(std::min(c.target, ws.personal_test.size() - 1));
    if (a.utterance >= test.size())
        throw CommandError("--utterance " + std::to_string(a.utterance) + " is out of range");
    const sim::Utterance &u = test.utterances[a.utterance];

    // Backbone weights against the backbone's own log-probabilities.
    const model::BackboneParams shape = checkpoint_bundle(c, ws.model_config()).backbone;
    const std::vector<double> w = model::flatten(shape);
    const OutputFn f = [&](std::span<const double> x) {
        return model::backbone_forward(model::unflatten(shape, x), u).storage();
    };
    std::vector<double> dw(w.size());
    rng::Stream s(rng::Key{a.direction_seed}.child("diagnose"));
    double norm = 0.0;
    for (auto &x : dw) {
        x = s.normal();
        norm += x * x;
    }
    for (auto &x : dw)
        x /= std::sqrt(norm);

    const auto rep = output_perturbation_residual(f, w, dw, a.scales, a.h);
    const double metric = metric_inner_product(f, w, dw, a.h);
    json out = {{"checkpoint", path.filename().string()},
                {"parameters", w.size()},
                {"utterance", a.utterance},
                {"h", a.h},
                {"scales", rep.scales},
                {"residual_norms", rep.residual_norms},
                {"metric_values", rep.metric_values},
                {"convergence_ratios", rep.convergence_ratios},
                {"displacement_ratios", rep.displacement_ratios},
                {"unit_direction_metric", metric}};
    io::atomic_write(l.out / "diagnose.json", out.dump(2) + "\n");
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_gradcheck(double h) {
    const auto rep = run_gradcheck_suite(h);
    char line[160];
    for (const auto &c : rep.cases) {
        std::snprintf(line, sizeof line, "%-14s max rel error %.3e over %zu entries\n",
                      c.name.c_str(), c.result.max_rel_error, c.result.checked);
        std::cout << line;
    }
    std::snprintf(line, sizeof line, "max %.3e in %.1f s\n", rep.max_rel_error(), rep.seconds);
    std::cout << line;
    if (!(rep.max_rel_error() < 1e-6)) {
        const auto &w = rep.worst();
        throw CommandError("gradcheck failed: " + w.name + " " + w.result.worst_param + "[" +
                           std::to_string(w.result.worst_index) + "] relative error " +
                           std::to_string(w.result.max_rel_error));
    }
    return 0;
}

void report_error(const std::string &command, const std::string &message) {
    std::string one_line = message;
    std::replace(one_line.begin(), one_line.end(), '\n', ' ');
    std::cerr << json{{"error", one_line}, {"command", command}}.dump() << "\n";
}

} // namespace

int cli_dispatch(int argc, char **argv) {
    CLI::App app{"kdfip: staged speaker adaptation on a simulated recognizer", "kdfip"};
    app.require_subcommand(1);

    Common common;
    auto add_common = [&](CLI::App *sub) {
        sub->add_option("--config", common.config_path, "JSON run config (defaults when omitted)");
        sub->add_option("--out", common.out, "output directory (default: config output_dir)");
        sub->add_flag("--force", common.force, "accept inputs written under another config hash");
    };

    auto *gen = app.add_subcommand("gen-data", "write the standard corpora to <out>/data");
    add_common(gen);

    TrainArgs ta;
    auto *tr = app.add_subcommand("train", "run one stage or baseline");
    add_common(tr);
    tr->add_option("--stage", ta.stage, "stage 1..4");
    tr->add_option("--method", ta.method, "baseline: ft, adapter, pga or fip");
    tr->add_flag("--synthetic", ta.synthetic, "baselines: train on D_per+D_syn");
    tr->add_option("--target", ta.target, "target speaker index");
    tr->add_option("--init", ta.init, "checkpoint of the previous stage (Stage 1 for baselines)");
    tr->add_option("--adapter", ta.adapter, "PGA: checkpoint holding the adapter weights");

    EvalArgs ea;
    auto *ev = app.add_subcommand("eval", "CER of checkpoints; writes <out>/results.json");
    add_common(ev);
    ev->add_option("--ckpt", ea.ckpts, "checkpoint(s) to evaluate")->required();
    ev->add_flag("--gated", ea.gated, "force gated fusion");
    ev->add_flag("--ungated", ea.ungated, "force ungated fusion");

    auto *ex = app.add_subcommand("experiment", "all table rows; writes results.json and table1.md");
    add_common(ex);

    AblateArgs aa;
    auto *ab = app.add_subcommand("ablate", "beta, duration or cross-speaker study");
    add_common(ab);
    ab->add_option("--kind", aa.kind, "beta, duration or cross_speaker")->required();
    ab->add_option("--target", aa.target, "target speaker (default: config ablation.target)");

    DiagnoseArgs da;
    auto *dg = app.add_subcommand("diagnose", "linearization and output-metric checks");
    add_common(dg);
    dg->add_option("--ckpt", da.ckpt, "checkpoint")->required();
    dg->add_option("--utterance", da.utterance, "personal test utterance index");
    dg->add_option("--direction-seed", da.direction_seed, "seed of the random unit direction");
    dg->add_option("--scales", da.scales, "decreasing perturbation scales");
    dg->add_option("--step", da.h, "directional difference step");

    double gc_h = 1e-5;
    auto *gc = app.add_subcommand("gradcheck", "finite-difference check of every primitive and stage loss");
    gc->add_option("--step", gc_h, "central difference step");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        std::cerr << app.help();
        const bool unknown = argc > 1 && argv[1][0] != '-' && app.get_subcommands().empty();
        report_error("usage", unknown ? "unknown subcommand '" + std::string(argv[1]) + "'"
                                      : std::string(e.what()));
        return 2;
    }

    const CLI::App *sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    try {
        if (sub == gen) return cmd_gen_data(common);
        if (sub == tr) return cmd_train(common, ta);
        if (sub == ev) return cmd_eval(common, ea);
        if (sub == ex) return cmd_experiment(common);
        if (sub == ab) return cmd_ablate(common, aa);
        if (sub == dg) return cmd_diagnose(common, da);
        return cmd_gradcheck(gc_h);
    } catch (const std::exception &e) {
        report_error(name, e.what());
        return 1;
    }
}

} // namespace kdfip
