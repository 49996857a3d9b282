// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "kdfip/model.hpp"
#include "kdfip/sim.hpp"
#include "kdfip/train.hpp"

namespace kdfip {

struct AblationConfig {
    std::size_t target = 0;
    std::vector<double> betas = {0.001, 0.01, 0.1, 1.0};
    std::vector<double> multipliers = {0.1, 0.25, 0.5, 1.0, 2.0};
    std::size_t non_targets = 3;
};

/// Everything a run depends on. Stage seeds are not configured: they are
/// derived from the master seed (see stage()).
struct RunConfig {
    std::uint64_t seed = 1;
    sim::SimConfig sim;
    std::size_t blocks = 2;
    std::size_t hidden = 64;
    std::size_t bottleneck = 8;

    train::StageConfig stage1 = backbone_from_scratch();
    train::StageConfig stage2 = adapter_stage();
    train::StageConfig stage3 = adapter_stage();
    train::StageConfig stage4 = backbone_stage();
    train::StageConfig ft = backbone_stage();
    train::StageConfig adapter = adapter_stage();
    train::StageConfig pga = backbone_stage();
    train::StageConfig fip = backbone_stage();

    AblationConfig ablation;
    std::string output_dir = "out";

    model::ModelConfig model_config() const;

    /// The named section ("stage1" .. "fip") with its derived seed. Stage 1 is
    /// shared by all targets; every other section is seeded per target and
    /// shares that seed, so e.g. FT and FIP see the same batches.
    train::StageConfig stage(const std::string &section, std::size_t target = 0) const;

    void validate() const;

    static train::StageConfig backbone_from_scratch();
    static train::StageConfig adapter_stage();
    static train::StageConfig backbone_stage();
};

/// Strict JSON parse: absent keys keep their defaults; unknown keys, wrong
/// types and constraint violations throw std::invalid_argument naming the key.
RunConfig parse_config(const std::string &json_text);
RunConfig load_config(const std::filesystem::path &path);

/// Pretty-printed JSON with every field present.
std::string serialize_config(const RunConfig &cfg);

/// Hex FNV-1a 64 of the canonical (sorted, compact) serialization, excluding
/// output_dir so that relocating a run does not change its artifacts.
std::string config_hash(const RunConfig &cfg);

} // namespace kdfip
