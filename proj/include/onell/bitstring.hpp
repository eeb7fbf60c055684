#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "onell/error.hpp"
#include "onell/rng.hpp"

namespace onell {

/// Fixed-length binary solution. The length is set at construction.
class BitVector {
public:
    BitVector() = default;

    explicit BitVector(std::size_t n, bool value = false) : bits_(n, value ? 1 : 0) {
        require(n >= 1, "BitVector: length must be at least 1");
    }

    /// Parses a string of '0'/'1' characters, e.g. "10110".
    static BitVector from_string(std::string_view s) {
        require(!s.empty(), "BitVector::from_string: empty string");
        BitVector v(s.size());
        for (std::size_t i = 0; i < s.size(); ++i) {
            require(s[i] == '0' || s[i] == '1', "BitVector::from_string: invalid character");
            v.bits_[i] = s[i] == '1';
        }
        return v;
    }

    static BitVector ones(std::size_t n) { return BitVector(n, true); }
    static BitVector zeros(std::size_t n) { return BitVector(n, false); }

    std::size_t size() const noexcept { return bits_.size(); }
    bool operator[](std::size_t i) const noexcept { return bits_[i] != 0; }

    void set(std::size_t i, bool value) noexcept { bits_[i] = value ? 1 : 0; }
    void flip(std::size_t i) noexcept { bits_[i] ^= 1; }

    BitVector complement() const {
        BitVector out = *this;
        for (auto& b : out.bits_) b ^= 1;
        return out;
    }

    /// Bitwise XOR with a mask of the same length.
    BitVector operator^(const BitVector& mask) const {
        require(size() == mask.size(), "BitVector xor: length mismatch");
        BitVector out = *this;
        for (std::size_t i = 0; i < size(); ++i) out.bits_[i] ^= mask.bits_[i];
        return out;
    }

    std::size_t popcount() const noexcept {
        return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
    }

    std::size_t hamming(const BitVector& other) const {
        require(size() == other.size(), "BitVector hamming: length mismatch");
        std::size_t d = 0;
        for (std::size_t i = 0; i < size(); ++i) d += bits_[i] != other.bits_[i];
        return d;
    }

    std::string to_string() const {
        std::string s(size(), '0');
        for (std::size_t i = 0; i < size(); ++i)
            if (bits_[i]) s[i] = '1';
        return s;
    }

    std::span<const std::uint8_t> raw() const noexcept { return bits_; }

    friend bool operator==(const BitVector&, const BitVector&) = default;

private:
    std::vector<std::uint8_t> bits_;
};

/// Hidden target of OneMax_z. All-ones gives the classic OneMax.
class Target {
public:
    explicit Target(std::size_t n) : z_(BitVector::ones(n)) {}
    explicit Target(BitVector z) : z_(std::move(z)) {}

    const BitVector& bits() const noexcept { return z_; }
    std::size_t size() const noexcept { return z_.size(); }
    bool operator[](std::size_t i) const noexcept { return z_[i]; }

    /// The maximizer of this target's fitness.
    const BitVector& optimum() const noexcept { return z_; }

private:
    BitVector z_;
};

/// Number of positions where x agrees with z.
inline int fitness(const BitVector& x, const Target& z) {
    require(x.size() == z.size(), "fitness: solution and target lengths differ");
    auto xs = x.raw();
    auto zs = z.bits().raw();
    int agree = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) agree += xs[i] == zs[i];
    return agree;
}

inline BitVector sample_uniform(std::size_t n, RngStream& rng) {
    require(n >= 1, "sample_uniform: n must be at least 1");
    BitVector x(n);
    std::size_t i = 0;
    while (i < n) {
        std::uint64_t word = rng();
        for (int b = 0; b < 64 && i < n; ++b, ++i) x.set(i, (word >> b) & 1U);
    }
    return x;
}

}  // namespace onell
