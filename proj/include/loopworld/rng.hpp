#pragma once

// Deterministic random numbers. Every stochastic draw in the project flows
// from a SeedTree so that a fixed master seed reproduces runs bit-exactly.
// No std::*_distribution anywhere: their output is implementation-defined.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string_view>

#include "loopworld/common.hpp"

namespace loopworld {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// xoshiro256** seeded via splitmix64.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
        has_spare_ = false;
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl_(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl_(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform01();  // (0, 1], keeps log finite
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    int bernoulli(double p) { return uniform01() < p ? 1 : 0; }

private:
    static std::uint64_t rotl_(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t s_[4];
    bool has_spare_;
    double spare_ = 0.0;
};

// Child-seed derivation. Construction (frozen, documented in docs/config.md):
// FNV-1a 64 over the byte string
//   master_seed as 8 little-endian bytes
//   label bytes (UTF-8, no terminator)
//   a single 0x00 separator
//   index as 8 little-endian bytes
// followed by two splitmix64 finalization rounds on the digest.
struct SeedTree {
    std::uint64_t master_seed = 0;
};

inline std::uint64_t derive_seed(const SeedTree& tree, std::string_view label, std::uint64_t index) {
    require(!label.empty(), "derive_seed: label must be non-empty");
    std::uint64_t h = 0xCBF29CE484222325ull;
    auto mix_byte = [&h](unsigned char b) {
        h ^= static_cast<std::uint64_t>(b);
        h *= 0x100000001B3ull;
    };
    for (int i = 0; i < 8; ++i) mix_byte(static_cast<unsigned char>((tree.master_seed >> (8 * i)) & 0xFF));
    for (char c : label) mix_byte(static_cast<unsigned char>(c));
    mix_byte(0x00);
    for (int i = 0; i < 8; ++i) mix_byte(static_cast<unsigned char>((index >> (8 * i)) & 0xFF));
    std::uint64_t state = h;
    splitmix64(state);
    std::uint64_t out = splitmix64(state);
    return out;
}

inline SeedTree subtree(const SeedTree& tree, std::string_view label, std::uint64_t index = 0) {
    return SeedTree{derive_seed(tree, label, index)};
}

}  // namespace loopworld
