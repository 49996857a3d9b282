// SPDX-License-Identifier: Apache-2.0
#include "kdfip/checkpoint.hpp"

#include <stdexcept>

#include <json.hpp>

#include "kdfip/io.hpp"

namespace kdfip {

using nlohmann::json;

namespace {

constexpr std::string_view kMagic = "KDFIP1";

void put_u64(std::string &out, std::uint64_t v) {
    for (int b = 0; b < 8; ++b)
        out.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
}

std::uint64_t get_u64(std::string_view bytes, std::size_t at) {
    std::uint64_t v = 0;
    for (int b = 0; b < 8; ++b)
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[at + static_cast<std::size_t>(b)]))
             << (8 * b);
    return v;
}

} // namespace

std::string encode_checkpoint(const Checkpoint &ckpt) {
    json tensors = json::array();
    std::string payload;
    for (const auto &[name, t] : ckpt.tensors) {
        tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", payload.size()}});
        io::append_f64_le(payload, t.data());
    }
    const json manifest = {{"stage", ckpt.stage},
                           {"config_hash", ckpt.config_hash},
                           {"step", ckpt.step},
                           {"target", ckpt.target},
                           {"data_flags", ckpt.data_flags},
                           {"payload_bytes", payload.size()},
                           {"tensors", tensors}};
    const std::string m = manifest.dump();
    std::string out(kMagic);
    put_u64(out, m.size());
    out += m;
    out += payload;
    return out;
}

Checkpoint decode_checkpoint(const std::string &bytes) {
    if (bytes.size() < kMagic.size() || std::string_view(bytes).substr(0, kMagic.size()) != kMagic)
        throw std::runtime_error("checkpoint: bad magic (expected \"KDFIP1\")");
    const std::size_t header = kMagic.size() + 8;
    if (bytes.size() < header)
        throw std::runtime_error("checkpoint: truncated, payload size " +
                                 std::to_string(bytes.size()) + " bytes is below the header");
    const std::uint64_t mlen = get_u64(bytes, kMagic.size());
    if (mlen > bytes.size() - header)
        throw std::runtime_error("checkpoint: truncated, payload size " +
                                 std::to_string(bytes.size() - header) +
                                 " bytes is below the manifest length " + std::to_string(mlen));

    json manifest;
    try {
        manifest = json::parse(bytes.substr(header, mlen));
    } catch (const json::parse_error &e) {
        throw std::runtime_error(std::string("checkpoint: manifest is not valid JSON: ") + e.what());
    }

    Checkpoint ckpt;
    std::size_t payload_bytes = 0;
    try {
        ckpt.stage = manifest.at("stage").get<std::string>();
        ckpt.config_hash = manifest.at("config_hash").get<std::string>();
        ckpt.step = manifest.at("step").get<std::size_t>();
        ckpt.target = manifest.at("target").get<std::size_t>();
        ckpt.data_flags = manifest.value("data_flags", std::string());
        payload_bytes = manifest.at("payload_bytes").get<std::size_t>();
    } catch (const json::exception &e) {
        throw std::runtime_error(std::string("checkpoint: malformed manifest: ") + e.what());
    }

    const std::string_view payload = std::string_view(bytes).substr(header + mlen);
    if (payload.size() != payload_bytes)
        throw std::runtime_error("checkpoint: payload size " + std::to_string(payload.size()) +
                                 " bytes, manifest declares " + std::to_string(payload_bytes));

    std::size_t expected_offset = 0;
    for (const auto &entry : manifest.at("tensors")) {
        std::string name;
        Shape shape;
        std::size_t offset = 0;
        try {
            name = entry.at("name").get<std::string>();
            shape = entry.at("shape").get<Shape>();
            offset = entry.at("offset").get<std::size_t>();
        } catch (const json::exception &e) {
            throw std::runtime_error(std::string("checkpoint: malformed tensor entry: ") + e.what());
        }
        if (offset != expected_offset)
            throw std::runtime_error("checkpoint: tensor '" + name + "' offset " +
                                     std::to_string(offset) + " inconsistent with payload layout");
        const std::size_t count = shape_numel(shape);
        ckpt.tensors.emplace(name, Tensor(shape, io::read_f64_le(payload, offset, count)));
        expected_offset = offset + count * 8;
    }
    if (expected_offset != payload.size())
        throw std::runtime_error("checkpoint: payload size " + std::to_string(payload.size()) +
                                 " does not match tensors (" + std::to_string(expected_offset) + ")");
    return ckpt;
}

void save_checkpoint(const std::filesystem::path &path, const Checkpoint &ckpt) {
    io::atomic_write(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path &path) {
    try {
        return decode_checkpoint(io::read_file(path));
    } catch (const std::runtime_error &e) {
        throw std::runtime_error(path.string() + ": " + e.what());
    }
}

Checkpoint make_checkpoint(const model::ModelBundle &bundle, std::string stage,
                           std::string config_hash, std::size_t step, std::size_t target) {
    Checkpoint c;
    c.stage = std::move(stage);
    c.config_hash = std::move(config_hash);
    c.step = step;
    c.target = target;
    c.tensors = model::to_param_map(bundle);
    return c;
}

model::ModelBundle checkpoint_bundle(const Checkpoint &ckpt, const model::ModelConfig &mc) {
    return model::bundle_from_map(mc, ckpt.tensors);
}

} // namespace kdfip
