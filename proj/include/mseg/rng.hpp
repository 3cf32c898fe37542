#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace mseg {

using Rng = std::mt19937_64;

/// Sub-seed for a named component and draw index, so every random stream
/// in a run is a pure function of the run seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view component, std::uint64_t index = 0)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : component) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    };
    return mix(mix(mix(seed) ^ h) ^ index);
}

inline Rng make_rng(std::uint64_t seed, std::string_view component, std::uint64_t index = 0)
{
    return Rng(derive_seed(seed, component, index));
}

/// Uniform in [lo, hi) from the top 53 bits.
inline double uniform(Rng& rng, double lo, double hi)
{
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return lo + (hi - lo) * u;
}

} // namespace mseg
