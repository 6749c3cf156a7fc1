#pragma once

#include <cmath>
#include <cstdint>
#include <span>

namespace rsport {

// Labels for domain-separated random substreams derived from one master seed.
// Solvers, path pools, network training and held-out evaluation each get a
// disjoint stream; the reproducibility tests assert the partition.
enum class Stream : std::uint64_t {
    DpStage = 1,
    LmctsNode = 2,
    PathPool = 3,
    NnInit = 4,
    NnTrainPath = 5,
    NnValPath = 6,
    NnShuffle = 7,
    Eval = 8,
    Calibration = 9,
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    return splitmix64(s);
}

inline std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
}

}  // namespace detail

// xoshiro256** seeded through splitmix64. Self-contained so that identical
// (config, seed) pairs replay bit-identically on any build of the project.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t s = seed;
        for (auto& word : state_) word = detail::splitmix64(s);
    }

    // Deterministic substream addressed by (stream, a, b, c).
    static Rng derive(std::uint64_t master, Stream stream, std::uint64_t a = 0,
                      std::uint64_t b = 0, std::uint64_t c = 0) {
        std::uint64_t x = detail::mix(master, static_cast<std::uint64_t>(stream));
        x = detail::mix(x, a);
        x = detail::mix(x, b);
        x = detail::mix(x, c);
        return Rng(x);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = detail::rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = detail::rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller; keeps the spare draw.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * M_PI * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    // Index drawn from a probability vector (assumed to sum to ~1).
    int categorical(std::span<const double> probs) {
        const double u = uniform();
        double acc = 0.0;
        for (std::size_t k = 0; k + 1 < probs.size(); ++k) {
            acc += probs[k];
            if (u < acc) return static_cast<int>(k);
        }
        return static_cast<int>(probs.size()) - 1;
    }

private:
    std::uint64_t state_[4] = {};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace rsport
