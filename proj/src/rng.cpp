// SPDX-License-Identifier: Apache-2.0
#include "kdfip/rng.hpp"

#include <cmath>
#include <numbers>

namespace kdfip::rng {

double Stream::normal() {
    const double u1 = 1.0 - uniform(); // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Stream::below(std::uint64_t n) {
    if (n == 0)
        return 0;
    // 128-bit multiply-shift; bias is below 2^-64 * n
    const auto wide = static_cast<unsigned __int128>(next_u64()) * n;
    return static_cast<std::uint64_t>(wide >> 64);
}

std::int64_t Stream::range(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo + 1)));
}

} // namespace kdfip::rng
