#pragma once

// Seedable, platform-stable random number generation. All sampling in the
// project goes through this header: std:: distributions are implementation
// defined and would break cross-platform reproducibility of fixtures.
// Generator family: splitmix64 for seeding / hashing, xoshiro256** for
// streams. References: Blackman & Vigna, prng.di.unimi.it.

#include <cstdint>
#include <cmath>
#include <string>
#include <string_view>

namespace ehrseq::rng {

inline constexpr std::uint64_t splitmix64_next(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// One-shot avalanche mix, used for hashing small integers into seeds.
inline constexpr std::uint64_t mix64(std::uint64_t x) {
    std::uint64_t s = x;
    return splitmix64_next(s);
}

// FNV-1a over bytes; stable content hash for ids, vocabularies, files.
inline std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

class Xoshiro256 {
public:
    Xoshiro256() : Xoshiro256(0) {}

    explicit Xoshiro256(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& word : s_) word = splitmix64_next(sm);
    }

    // Independent substream: deterministic function of (seed, stream index).
    static Xoshiro256 substream(std::uint64_t seed, std::uint64_t stream) {
        return Xoshiro256(mix64(seed ^ mix64(stream + 1)));
    }

    std::uint64_t next() {
        const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0,1), 53-bit mantissa; exact-rounded, platform stable.
    double uniform01() { return double(next() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n); Lemire multiply-shift, no rejection.
    std::uint64_t below(std::uint64_t n) {
        return std::uint64_t((static_cast<__uint128_t>(next()) * n) >> 64);
    }

    // Bernoulli(p); exact float comparison, stable across platforms.
    bool chance(double p) { return uniform01() < p; }

    // Failures-before-success count. Sampled by direct trials so the result
    // depends only on uniform01 comparisons (no libm in generation paths).
    std::uint64_t geometric(double p) {
        std::uint64_t k = 0;
        while (!chance(p)) ++k;
        return k;
    }

    // Negative binomial as a sum of r geometrics: mean r*(1-p)/p.
    std::uint64_t negative_binomial(unsigned r, double p) {
        std::uint64_t k = 0;
        for (unsigned i = 0; i < r; ++i) k += geometric(p);
        return k;
    }

    // Gaussian via Box-Muller. Used only for model init (per-platform
    // determinism is enough there).
    double normal() {
        double u1 = uniform01();
        double u2 = uniform01();
        if (u1 <= 0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

private:
    static constexpr std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }
    std::uint64_t s_[4];
};

}  // namespace ehrseq::rng
