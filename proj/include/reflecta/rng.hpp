#pragma once

#include <cstdint>
#include <cmath>
#include <random>
#include <string_view>

namespace reflecta {

// splitmix64 finalizer; used to decorrelate derived seeds.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept
{
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t hash_name(std::string_view name) noexcept
{
    std::uint64_t h = 0xcbf29ce484222325ULL; // FNV-1a
    for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Seed of the named sub-stream of a root seed. All randomness in the
/// library flows from one root seed through these streams, so that e.g.
/// the patch sampler does not shift when initialization draws change.
constexpr std::uint64_t substream(std::uint64_t root, std::string_view name) noexcept
{
    return mix64(root ^ mix64(hash_name(name)));
}

constexpr std::uint64_t substream(std::uint64_t root, std::string_view name, std::uint64_t index) noexcept
{
    return mix64(substream(root, name) + mix64(index + 1));
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t root, std::string_view name)
{
    return Rng{substream(root, name)};
}

// Uniform integer in [0, n). Written out instead of
// std::uniform_int_distribution so sequences match across standard libraries.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n)
{
    const std::uint64_t limit = Rng::max() - Rng::max() % n;
    std::uint64_t r;
    do {
        r = rng();
    } while (r >= limit);
    return r % n;
}

// Uniform double in [0, 1) from the top 53 bits.
inline double uniform01(Rng& rng)
{
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi)
{
    return lo + (hi - lo) * uniform01(rng);
}

// Box-Muller; portable unlike std::normal_distribution.
inline double standard_normal(Rng& rng)
{
    double u1;
    do {
        u1 = uniform01(rng);
    } while (u1 <= 0.0);
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925 * u2);
}

} // namespace reflecta
