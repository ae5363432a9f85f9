#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace tca {

// FNV-1a, 64 bit. Stable across platforms and runs.
constexpr std::uint64_t hash_string(std::string_view text) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t combine_seeds(std::uint64_t a, std::uint64_t b) noexcept {
    return mix64(a ^ mix64(b + 0x9e3779b97f4a7c15ULL));
}

/// Counter-based generator: the n-th draw is mix64(key + n * golden), so any
/// stream position can be recomputed without replaying the stream. Gaussian
/// draws use Box-Muller on our own uniforms so output does not depend on the
/// standard library's distribution implementations.
class CounterRng {
public:
    explicit CounterRng(std::uint64_t key) noexcept : key_(key) {}

    std::uint64_t next_u64() noexcept {
        return mix64(key_ + (++counter_) * 0x9e3779b97f4a7c15ULL);
    }

    // Uniform in (0, 1].
    double uniform() noexcept {
        return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    }

    double gaussian() noexcept {
        const double u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) noexcept { return next_u64() % n; }

    std::uint64_t counter() const noexcept { return counter_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace tca
