// SPDX-License-Identifier: Apache-2.0
#pragma once

// Counter-based random streams keyed hierarchically (master -> purpose ->
// index). Output i of a stream with key k is splitmix64(k + (i+1) * golden),
// i.e. the SplitMix64 sequence seeded at k, so any sub-stream can be
// regenerated in isolation. Constants are listed in docs/formats.md.

#include <cstdint>
#include <string_view>
#include <vector>

namespace kdfip::rng {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
inline constexpr std::uint64_t kIndexSalt = 0xD1B54A32D192ED03ULL;

/// SplitMix64 output function.
constexpr std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// 64-bit FNV-1a.
constexpr std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ULL;
    }
    return h;
}

struct Key {
    std::uint64_t value = 0;

    Key child(std::string_view label) const { return Key{mix64(value ^ mix64(fnv1a(label)))}; }
    Key child(std::uint64_t index) const { return Key{mix64(value + mix64(index ^ kIndexSalt))}; }
    friend bool operator==(Key, Key) = default;
};

class Stream {
  public:
    explicit Stream(Key key) : key_(key.value) {}

    std::uint64_t next_u64() { return mix64(key_ + (++counter_) * kGolden); }
    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    /// Standard normal via Box-Muller (cosine branch only).
    double normal();
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);
    /// Uniform integer in [lo, hi].
    std::int64_t range(std::int64_t lo, std::int64_t hi);
    bool bernoulli(double p) { return uniform() < p; }

    template <class T> void shuffle(std::vector<T> &v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

} // namespace kdfip::rng
