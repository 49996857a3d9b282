// SPDX-License-Identifier: Apache-2.0
#pragma once

// Checkpoint layout: the 6 bytes "KDFIP1", a little-endian uint64 manifest
// length, the JSON manifest, then every tensor as contiguous little-endian
// float64 values at the offsets the manifest records (relative to the payload
// start). See docs/formats.md.

#include <cstdint>
#include <filesystem>
#include <string>

#include "kdfip/gradcheck.hpp"
#include "kdfip/model.hpp"

namespace kdfip {

struct Checkpoint {
    std::string stage; // "1".."4", or a baseline label such as "FT"
    std::string config_hash;
    std::size_t step = 0; // optimizer steps taken to produce it
    std::size_t target = 0;
    std::string data_flags; // training data of a table row, e.g. "D_per+D_syn"; may be empty
    ParamMap tensors;
};

std::string encode_checkpoint(const Checkpoint &ckpt);
/// Validates magic, manifest and payload size.
Checkpoint decode_checkpoint(const std::string &bytes);

void save_checkpoint(const std::filesystem::path &path, const Checkpoint &ckpt);
Checkpoint load_checkpoint(const std::filesystem::path &path);

Checkpoint make_checkpoint(const model::ModelBundle &bundle, std::string stage,
                           std::string config_hash, std::size_t step, std::size_t target);
/// Rebuilds the bundle; shapes must match `mc`.
model::ModelBundle checkpoint_bundle(const Checkpoint &ckpt, const model::ModelConfig &mc);

} // namespace kdfip
