// SPDX-License-Identifier: Apache-2.0
#include "kdfip/config.hpp"

#include <set>
#include <stdexcept>

#include <json.hpp>

#include "kdfip/io.hpp"
#include "kdfip/rng.hpp"

namespace kdfip {

using nlohmann::json;

namespace {

const char *const kStageSections[] = {"stage1", "stage2", "stage3", "stage4",
                                      "ft",     "adapter", "pga",   "fip"};

[[noreturn]] void fail(const std::string &key, const std::string &what) {
    throw std::invalid_argument("config: " + key + ": " + what);
}

/// Reads fields of one JSON object and rejects whatever was not read.
class Section {
  public:
    Section(const json &j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object())
            fail(path_.empty() ? "<root>" : path_, "expected an object");
    }

    void finish() const {
        for (const auto &[k, v] : j_.items())
            if (!seen_.count(k))
                fail(key(k), "unknown key");
    }

    template <class F> void field(const std::string &k, F &&read) {
        seen_.insert(k);
        if (auto it = j_.find(k); it != j_.end())
            read(*it, key(k));
    }

    void number(const std::string &k, double &out) {
        field(k, [&](const json &v, const std::string &name) {
            if (!v.is_number())
                fail(name, "expected a number");
            out = v.get<double>();
        });
    }

    void count(const std::string &k, std::size_t &out) {
        field(k, [&](const json &v, const std::string &name) {
            if (!v.is_number_unsigned())
                fail(name, "expected a non-negative integer");
            out = v.get<std::size_t>();
        });
    }

    void u64(const std::string &k, std::uint64_t &out) {
        field(k, [&](const json &v, const std::string &name) {
            if (!v.is_number_unsigned())
                fail(name, "expected a non-negative integer");
            out = v.get<std::uint64_t>();
        });
    }

    void string(const std::string &k, std::string &out) {
        field(k, [&](const json &v, const std::string &name) {
            if (!v.is_string())
                fail(name, "expected a string");
            out = v.get<std::string>();
        });
    }

    void numbers(const std::string &k, std::vector<double> &out) {
        field(k, [&](const json &v, const std::string &name) {
            if (!v.is_array())
                fail(name, "expected an array of numbers");
            out.clear();
            for (const auto &e : v) {
                if (!e.is_number())
                    fail(name, "expected an array of numbers");
                out.push_back(e.get<double>());
            }
        });
    }

    std::string key(const std::string &k) const { return path_.empty() ? k : path_ + "." + k; }

  private:
    const json &j_;
    std::string path_;
    std::set<std::string> seen_;
};

void read_stage(const json &j, const std::string &name, train::StageConfig &s) {
    Section sec(j, name);
    sec.number("beta", s.beta);
    sec.number("lr", s.lr);
    sec.count("epochs", s.epochs);
    sec.count("batch_size", s.batch_size);
    sec.field("schedule", [&](const json &v, const std::string &key) {
        if (!v.is_string())
            fail(key, "expected a string");
        try {
            s.schedule = train::parse_schedule(v.get<std::string>());
        } catch (const std::invalid_argument &e) {
            fail(key, e.what());
        }
    });
    sec.finish();
}

void read_sim(const json &j, sim::SimConfig &s) {
    Section sec(j, "sim");
    sec.count("vocab_size", s.vocab_size);
    sec.count("feature_dim", s.feature_dim);
    sec.count("generic_speakers", s.generic_speakers);
    sec.count("targets", s.targets);
    sec.number("alpha", s.alpha);
    sec.number("bias_gain", s.bias_gain);
    sec.number("sigma_obs", s.sigma_obs);
    sec.number("p_sub", s.p_sub);
    sec.number("eta", s.eta);
    sec.count("generic_train", s.generic_train);
    sec.count("generic_test", s.generic_test);
    sec.count("generic_calib", s.generic_calib);
    sec.count("personal_train", s.personal_train);
    sec.count("personal_test", s.personal_test);
    sec.count("synthetic", s.synthetic);
    sec.count("text_pool", s.text_pool);
    sec.count("min_len", s.min_len);
    sec.count("max_len", s.max_len);
    sec.finish();
}

json stage_json(const train::StageConfig &s) {
    return {{"beta", s.beta},
            {"lr", s.lr},
            {"epochs", s.epochs},
            {"batch_size", s.batch_size},
            {"schedule", std::string(train::to_string(s.schedule))}};
}

json to_json(const RunConfig &c) {
    const auto &s = c.sim;
    json j;
    j["seed"] = c.seed;
    j["sim"] = {{"vocab_size", s.vocab_size},
                {"feature_dim", s.feature_dim},
                {"generic_speakers", s.generic_speakers},
                {"targets", s.targets},
                {"alpha", s.alpha},
                {"bias_gain", s.bias_gain},
                {"sigma_obs", s.sigma_obs},
                {"p_sub", s.p_sub},
                {"eta", s.eta},
                {"generic_train", s.generic_train},
                {"generic_test", s.generic_test},
                {"generic_calib", s.generic_calib},
                {"personal_train", s.personal_train},
                {"personal_test", s.personal_test},
                {"synthetic", s.synthetic},
                {"text_pool", s.text_pool},
                {"min_len", s.min_len},
                {"max_len", s.max_len}};
    j["model"] = {{"blocks", c.blocks}, {"hidden", c.hidden}, {"bottleneck", c.bottleneck}};
    const train::StageConfig *stages[] = {&c.stage1, &c.stage2, &c.stage3, &c.stage4,
                                          &c.ft,     &c.adapter, &c.pga,   &c.fip};
    for (std::size_t i = 0; i < 8; ++i)
        j[kStageSections[i]] = stage_json(*stages[i]);
    j["ablation"] = {{"target", c.ablation.target},
                     {"betas", c.ablation.betas},
                     {"multipliers", c.ablation.multipliers},
                     {"non_targets", c.ablation.non_targets}};
    j["output_dir"] = c.output_dir;
    return j;
}

} // namespace

train::StageConfig RunConfig::backbone_from_scratch() {
    train::StageConfig s;
    s.lr = 1e-3;
    s.epochs = 6;
    s.batch_size = 16;
    return s;
}

train::StageConfig RunConfig::adapter_stage() { return train::StageConfig{}; }

train::StageConfig RunConfig::backbone_stage() {
    train::StageConfig s;
    s.lr = 1e-4;
    return s;
}

model::ModelConfig RunConfig::model_config() const {
    model::ModelConfig m;
    m.blocks = blocks;
    m.hidden = hidden;
    m.bottleneck = bottleneck;
    m.vocab_size = sim.vocab_size;
    m.feature_dim = sim.feature_dim;
    return m;
}

train::StageConfig RunConfig::stage(const std::string &section, std::size_t target) const {
    const train::StageConfig *s = nullptr;
    if (section == "stage1") s = &stage1;
    else if (section == "stage2") s = &stage2;
    else if (section == "stage3") s = &stage3;
    else if (section == "stage4") s = &stage4;
    else if (section == "ft") s = &ft;
    else if (section == "adapter") s = &adapter;
    else if (section == "pga") s = &pga;
    else if (section == "fip") s = &fip;
    else throw std::invalid_argument("unknown config section '" + section + "'");
    train::StageConfig out = *s;
    const rng::Key train_key = rng::Key{seed}.child("train");
    out.seed = section == "stage1" ? train_key.child("stage1").value
                                   : train_key.child("target").child(target).value;
    return out;
}

void RunConfig::validate() const {
    try {
        sim.validate();
    } catch (const std::invalid_argument &e) {
        fail("sim", e.what());
    }
    try {
        model_config().validate();
    } catch (const std::invalid_argument &e) {
        fail("model", e.what());
    }
    const train::StageConfig *stages[] = {&stage1, &stage2, &stage3, &stage4,
                                          &ft,     &adapter, &pga,   &fip};
    for (std::size_t i = 0; i < 8; ++i) {
        try {
            stages[i]->validate();
        } catch (const std::invalid_argument &e) {
            fail(kStageSections[i], e.what());
        }
    }
    if (ablation.target >= sim.targets)
        fail("ablation.target", "must be < sim.targets");
    for (double b : ablation.betas)
        if (!(b >= 0.0))
            fail("ablation.betas", "beta ≥ 0 violated");
    for (double m : ablation.multipliers)
        if (!(m >= 0.0))
            fail("ablation.multipliers", "multiplier ≥ 0 violated");
    if (output_dir.empty())
        fail("output_dir", "must not be empty");
}

RunConfig parse_config(const std::string &json_text) {
    json j;
    try {
        j = json::parse(json_text.empty() ? std::string("{}") : json_text);
    } catch (const json::parse_error &e) {
        throw std::invalid_argument(std::string("config: not valid JSON: ") + e.what());
    }
    RunConfig c;
    {
        Section root(j, "");
        root.u64("seed", c.seed);
        root.field("sim", [&](const json &v, const std::string &) { read_sim(v, c.sim); });
        root.field("model", [&](const json &v, const std::string &) {
            Section m(v, "model");
            m.count("blocks", c.blocks);
            m.count("hidden", c.hidden);
            m.count("bottleneck", c.bottleneck);
            m.finish();
        });
        train::StageConfig *stages[] = {&c.stage1, &c.stage2, &c.stage3, &c.stage4,
                                        &c.ft,     &c.adapter, &c.pga,   &c.fip};
        for (std::size_t i = 0; i < 8; ++i)
            root.field(kStageSections[i], [&](const json &v, const std::string &name) {
                read_stage(v, name, *stages[i]);
            });
        root.field("ablation", [&](const json &v, const std::string &) {
            Section a(v, "ablation");
            a.count("target", c.ablation.target);
            a.numbers("betas", c.ablation.betas);
            a.numbers("multipliers", c.ablation.multipliers);
            a.count("non_targets", c.ablation.non_targets);
            a.finish();
        });
        root.string("output_dir", c.output_dir);
        root.finish();
    }
    c.validate();
    return c;
}

RunConfig load_config(const std::filesystem::path &path) { return parse_config(io::read_file(path)); }

std::string serialize_config(const RunConfig &cfg) { return to_json(cfg).dump(2) + "\n"; }

std::string config_hash(const RunConfig &cfg) {
    json j = to_json(cfg);
    j.erase("output_dir");
    return io::hex64(rng::fnv1a(j.dump()));
}

} // namespace kdfip
