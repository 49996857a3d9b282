// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace kdfip::io {

/// Writes to `path.tmp` and renames over `path`.
void atomic_write(const std::filesystem::path &path, std::string_view bytes);

std::string read_file(const std::filesystem::path &path);

void append_f64_le(std::string &out, std::span<const double> values);
/// Decodes `count` little-endian doubles starting at `offset`.
std::vector<double> read_f64_le(std::string_view bytes, std::size_t offset, std::size_t count);

/// 16 lowercase hex digits.
std::string hex64(std::uint64_t v);

} // namespace kdfip::io
