#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace gsebo {

/// Counter-based random stream. A draw is a pure function of (seed, counter),
/// so sequences are identical on every platform and compiler; the standard
/// <random> distributions are deliberately not used for that reason.
class RngStream {
public:
    RngStream() = default;
    explicit RngStream(std::uint64_t seed, std::uint64_t counter = 0)
        : seed_(seed), counter_(counter) {}

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t counter() const noexcept { return counter_; }

    std::uint64_t next_u64() noexcept { return mix(seed_ ^ mix(counter_++ + kGolden)); }

    /// Uniform on [0, 1) with 53 bits of resolution.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, bound). Rejection keeps it unbiased.
    std::uint64_t below(std::uint64_t bound) noexcept {
        if (bound <= 1) return 0;
        const std::uint64_t limit = (~std::uint64_t{0} / bound) * bound;
        std::uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return x % bound;
    }

    /// Standard normal via Box-Muller (one value per two uniforms).
    double normal() noexcept {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Independent child stream keyed by `tag`.
    RngStream fork(std::uint64_t tag) const noexcept { return RngStream(mix(seed_ + mix(tag ^ 0xa0761d6478bd642full))); }

    friend bool operator==(const RngStream&, const RngStream&) = default;

private:
    static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ull;

    // splitmix64 finalizer
    static std::uint64_t mix(std::uint64_t z) noexcept {
        z += kGolden;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    std::uint64_t seed_ = 0;
    std::uint64_t counter_ = 0;
};

}  // namespace gsebo
