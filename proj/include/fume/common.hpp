#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace fume {

// Error categories map onto CLI exit codes (config=2, data=3, numeric=4).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Deterministic PRNG (PCG32). We avoid std:: distributions so that streams
// are byte-stable regardless of standard library implementation.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) {
        state_ = 0u;
        inc_ = (stream << 1u) | 1u;
        next();
        state_ += seed;
        next();
    }

    std::uint32_t next() {
        std::uint64_t old = state_;
        state_ = old * 6364136223846793005ULL + inc_;
        std::uint32_t xorshifted =
            static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
        std::uint32_t rot = static_cast<std::uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
    }

    // Uniform in [0, 1).
    double uniform() {
        return next() * (1.0 / 4294967296.0);
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Standard normal via Box-Muller (one value per call, cached pair).
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = 0.0;
        while (u1 <= 1e-300) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    std::uint32_t below(std::uint32_t bound) {
        // Lemire-style rejection-free enough for our purposes; use modulo with
        // rejection to keep the stream deterministic and unbiased.
        std::uint32_t threshold = (-bound) % bound;
        for (;;) {
            std::uint32_t r = next();
            if (r >= threshold) return r % bound;
        }
    }

private:
    std::uint64_t state_ = 0;
    std::uint64_t inc_ = 0;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

// Stable sub-seed derivation (splitmix64 of seed ^ tag).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace fume
