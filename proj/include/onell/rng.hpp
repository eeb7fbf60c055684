#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

#include "onell/error.hpp"

namespace onell {

/// SplitMix64 finalizer. Used to derive seeds; never as a stream generator.
constexpr std::uint64_t splitmix64(std::uint64_t& state) noexcept {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Mixes two 64-bit words into one seed.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) noexcept {
    std::uint64_t s = master;
    std::uint64_t a = splitmix64(s);
    std::uint64_t t = index ^ 0xD1B54A32D192ED03ULL;
    std::uint64_t b = splitmix64(t);
    std::uint64_t mix = a ^ (b * 0xFF51AFD7ED558CCDULL);
    return splitmix64(mix);
}

/**
 * Reproducible random stream identified by (master_seed, stream_index).
 *
 * The generator is xoshiro256** seeded from SplitMix64 applied to both
 * identifiers. Replaying the same pair yields the same sequence; distinct
 * pairs land in unrelated regions of the state space. Satisfies
 * UniformRandomBitGenerator, so it plugs into <random> distributions.
 *
 * A stream is single-owner: copy it to fork, never share it across threads.
 */
class RngStream {
public:
    using result_type = std::uint64_t;
    using State = std::array<std::uint64_t, 4>;

    RngStream() : RngStream(0, 0) {}

    RngStream(std::uint64_t master_seed, std::uint64_t stream_index)
        : master_seed_(master_seed), stream_index_(stream_index) {
        std::uint64_t sm = derive_seed(master_seed, stream_index);
        for (auto& word : state_) word = splitmix64(sm);
    }

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

    result_type operator()() noexcept {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, bound). Lemire's nearly-divisionless method.
    std::uint64_t below(std::uint64_t bound) {
        if (bound == 0) throw ContractViolation("RngStream::below: bound must be positive");
        __uint128_t m = static_cast<__uint128_t>((*this)()) * bound;
        auto low = static_cast<std::uint64_t>(m);
        if (low < bound) {
            const std::uint64_t threshold = (0 - bound) % bound;
            while (low < threshold) {
                m = static_cast<__uint128_t>((*this)()) * bound;
                low = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

    bool bernoulli(double p) noexcept { return uniform() < p; }

    /// Child stream for a sub-task; deterministic in (this stream's ids, tag).
    RngStream fork(std::uint64_t tag) const {
        return RngStream(derive_seed(master_seed_, stream_index_), tag);
    }

    std::uint64_t master_seed() const noexcept { return master_seed_; }
    std::uint64_t stream_index() const noexcept { return stream_index_; }

    const State& state() const noexcept { return state_; }
    void set_state(const State& s) noexcept { state_ = s; }

    friend bool operator==(const RngStream& a, const RngStream& b) noexcept {
        return a.state_ == b.state_;
    }

private:
    static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
        return (x << k) | (x >> (64 - k));
    }

    std::uint64_t master_seed_;
    std::uint64_t stream_index_;
    State state_{};
};

}  // namespace onell
