#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace d2dpo {

// Bit-reproducible random stream. Only the raw mt19937_64 output is used so
// results do not depend on the standard library's distribution algorithms.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n must be positive.
    std::size_t index(std::size_t n);

    // Index drawn from an unnormalized nonnegative weight vector.
    std::size_t categorical(std::span<const double> weights);

    template <class T>
    void shuffle(std::span<T> items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const std::size_t j = index(i);
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

// Independent stream for (seed, purpose, index). Used so per-sample and
// per-phase randomness never interleave.
Rng derive_stream(std::uint64_t seed, std::uint64_t purpose, std::uint64_t index = 0);

namespace stream {
inline constexpr std::uint64_t init = 1;
inline constexpr std::uint64_t pretrain = 2;
inline constexpr std::uint64_t finetune = 3;
inline constexpr std::uint64_t preferences = 4;
inline constexpr std::uint64_t eval = 5;
inline constexpr std::uint64_t sample = 6;
inline constexpr std::uint64_t verify = 7;
}  // namespace stream

}  // namespace d2dpo
