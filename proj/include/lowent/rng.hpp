#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace lowent {

inline constexpr std::uint64_t kGoldenGamma = 0x9E3779B97F4A7C15ULL;

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) noexcept {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Explicit generator state. Every randomized operation takes one of these by
/// reference and advances it; there is no global randomness anywhere.
///
/// The stream is splitmix64: output k is mix64(state0 + (k+1) * golden), so a
/// state value doubles as a counter-based generator keyed by its seed.
struct RngState {
    std::uint64_t state = 0;

    friend bool operator==(const RngState&, const RngState&) = default;
};

inline std::uint64_t next_u64(RngState& rng) noexcept {
    rng.state += kGoldenGamma;
    return mix64(rng.state);
}

/// Uniform double in [0, 1) with 53 random bits.
inline double next_unit(RngState& rng) noexcept {
    return static_cast<double>(next_u64(rng) >> 11) * 0x1.0p-53;
}

/// Uniform integer in [0, bound) via 128-bit multiply-high (Lemire, no rejection).
inline std::uint64_t next_below(RngState& rng, std::uint64_t bound) noexcept {
    const unsigned __int128 product = static_cast<unsigned __int128>(next_u64(rng)) * bound;
    return static_cast<std::uint64_t>(product >> 64);
}

/// Named sub-stream of a command-level seed. Streams with different names are
/// statistically independent, so adding a consumer never shifts another one.
inline RngState substream(std::uint64_t seed, std::string_view name) noexcept {
    return RngState{mix64(seed ^ fnv1a64(name))};
}

/// Standard normal via Box-Muller; consumes two draws.
inline double next_normal(RngState& rng) noexcept {
    double u1 = next_unit(rng);
    const double u2 = next_unit(rng);
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace lowent
