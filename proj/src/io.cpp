// SPDX-License-Identifier: Apache-2.0
#include "kdfip/io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace kdfip::io {

void atomic_write(const std::filesystem::path &path, std::string_view bytes) {
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os)
            throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!os)
            throw std::runtime_error("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void append_f64_le(std::string &out, std::span<const double> values) {
    const std::size_t start = out.size();
    out.resize(start + values.size() * 8);
    for (std::size_t i = 0; i < values.size(); ++i) {
        auto bits = std::bit_cast<std::uint64_t>(values[i]);
        for (int b = 0; b < 8; ++b)
            out[start + i * 8 + static_cast<std::size_t>(b)] =
                static_cast<char>((bits >> (8 * b)) & 0xFF);
    }
}

std::vector<double> read_f64_le(std::string_view bytes, std::size_t offset, std::size_t count) {
    if (offset > bytes.size() || count > (bytes.size() - offset) / 8)
        throw std::runtime_error("payload size: need " + std::to_string(count * 8) +
                                 " bytes at offset " + std::to_string(offset) + ", have " +
                                 std::to_string(bytes.size() > offset ? bytes.size() - offset : 0));
    std::vector<double> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b)
            bits |= static_cast<std::uint64_t>(
                        static_cast<unsigned char>(bytes[offset + i * 8 + static_cast<std::size_t>(b)]))
                    << (8 * b);
        out[i] = std::bit_cast<double>(bits);
    }
    return out;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

} // namespace kdfip::io
