#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace kbforge {

// One splitmix64 step: advance by the golden-ratio increment, then mix.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

// Deterministic stream generator. All randomness in the toolkit flows
// through this class so that byte-identical reruns are a matter of
// seeding, never of library or platform behavior.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}

    std::uint64_t next() noexcept {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform double in [0, 1), 53 bits of entropy.
    double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n), unbiased via rejection. n must be >= 1.
    std::uint64_t below(std::uint64_t n) noexcept {
        const std::uint64_t threshold = (0 - n) % n;
        for (;;) {
            const std::uint64_t r = next();
            if (r >= threshold) {
                return r % n;
            }
        }
    }

    // Standard normal via Box-Muller (both draws consumed every call).
    double gaussian() noexcept {
        constexpr double two_pi = 6.283185307179586476925286766559;
        const double u1 = 1.0 - uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    }

    template <class T>
    void shuffle(std::vector<T>& v) noexcept {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t state_;
};

// Per-document stream derivation: the whole corruption pipeline keys off
// splitmix64(seed ^ fnv1a64(doc_id)), so a document's perturbation is
// independent of worker count and of its position in the stream.
inline SplitMix64 document_rng(std::uint64_t seed, std::string_view doc_id) noexcept {
    return SplitMix64(splitmix64(seed ^ fnv1a64(doc_id)));
}

}  // namespace kbforge
