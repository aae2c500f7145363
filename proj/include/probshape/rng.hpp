#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace probshape {

using Rng = std::mt19937_64;

// Deterministic child seeds. Mixing goes through splitmix64 so that nearby
// parents and indices give unrelated streams.
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t parent, std::string_view tag);
std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t index);

// Uniform double in [0, 1) from the top 53 bits of one draw.
inline double uniform01(Rng &rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

} // namespace probshape
