#pragma once

#include <array>
#include <cmath>
#include <cstdint>

#include "dfa/errors.hpp"

namespace dfa {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline std::uint64_t rotl64(std::uint64_t v, int k) {
    return (v << k) | (v >> (64 - k));
}

}  // namespace detail

// xoshiro256** seeded through SplitMix64. The whole generator is spelled out
// here so a given seed produces the same draw sequence on every platform;
// std:: distributions are avoided for the same reason.
class SeededRng {
public:
    SeededRng() : SeededRng(0) {}

    explicit SeededRng(std::uint64_t seed) : seed_(seed) {
        std::uint64_t sm = seed;
        for (auto& w : state_) w = detail::splitmix64(sm);
    }

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() {
        const std::uint64_t result = detail::rotl64(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = detail::rotl64(state_[3], 45);
        return result;
    }

    // Uniform double in [0, 1), 53 mantissa bits.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        if (!(lo < hi))
            throw ParameterError("uniform: lo must be < hi, got lo=" +
                                 std::to_string(lo) + " hi=" + std::to_string(hi));
        return lo + next_double() * (hi - lo);
    }

    // Box-Muller without a cached spare so generator state stays a plain
    // 4-word value that serializes cleanly.
    double normal(double mean = 0.0, double sigma = 1.0) {
        const double u1 = 1.0 - next_double();  // (0, 1]
        const double u2 = next_double();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mean + sigma * r * std::cos(6.283185307179586476925286766559 * u2);
    }

    // Derives an independent stream; does not disturb this generator.
    SeededRng fork(std::uint64_t stream) const {
        std::uint64_t h = seed_ ^ (0xD6E8FEB86659FD93ULL * (stream + 1));
        h = detail::splitmix64(h);
        return SeededRng(h ^ state_[0]);
    }

    std::array<std::uint64_t, 4> state() const { return state_; }
    void set_state(const std::array<std::uint64_t, 4>& s) { state_ = s; }

private:
    std::uint64_t seed_;
    std::array<std::uint64_t, 4> state_{};
};

}  // namespace dfa
