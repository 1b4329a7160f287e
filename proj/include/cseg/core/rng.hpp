#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace cseg {

/// Deterministic counter-based random stream.
///
/// Every stochastic site in the library derives its own named substream from
/// a single run seed, so the draw sequence of one site (say, augmentation)
/// never perturbs another (say, weight init). All distributions are produced
/// from raw 64-bit splitmix output with explicit arithmetic, which keeps
/// generated bytes identical across compilers and standard libraries.
class Rng {
public:
    Rng() = default;
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        // splitmix64 (Steele, Lea, Flood 2014)
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n); n must be positive.
    std::uint64_t uniform_index(std::uint64_t n) {
        // 128-bit multiply keeps the mapping unbiased enough for data
        // shuffling and avoids a rejection loop.
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Standard normal via Box-Muller; caches the second variate.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        double u2 = uniform();
        // Guard the log argument away from exactly zero.
        u1 = u1 > 0.0 ? u1 : 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    template <typename It>
    void shuffle(It first, It last) {
        const auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            const std::uint64_t j = uniform_index(i);
            std::swap(first[i - 1], first[j]);
        }
    }

private:
    std::uint64_t state_ = 0;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

/// FNV-1a over the substream name; mixed with the run seed below.
inline std::uint64_t hash_name(std::string_view name) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const char c : name) {
        h ^= static_cast<std::uint8_t>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

/// Derive an independent named stream from a run seed. Substream names are
/// path-like, e.g. "init/enc/l0/b0/conv1/w" or "augment/e3/case12".
inline Rng substream(std::uint64_t seed, std::string_view name) {
    return Rng(seed ^ (hash_name(name) | 1ull));
}

}  // namespace cseg
