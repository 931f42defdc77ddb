#include "d2dpo/rng.hpp"

#include <stdexcept>

namespace d2dpo {

std::size_t Rng::index(std::size_t n) {
    if (n == 0) {
        throw std::invalid_argument("Rng::index: empty range");
    }
    // Rejection sampling keeps the draw unbiased for any n.
    const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
    std::uint64_t r = engine_();
    while (r >= limit) {
        r = engine_();
    }
    return static_cast<std::size_t>(r % n);
}

std::size_t Rng::categorical(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) {
        total += w;
    }
    if (!(total > 0.0)) {
        throw std::invalid_argument("Rng::categorical: weights sum to zero");
    }
    const double u = uniform() * total;
    double acc = 0.0;
    std::size_t last_positive = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (weights[i] <= 0.0) {
            continue;
        }
        last_positive = i;
        acc += weights[i];
        if (u < acc) {
            return i;
        }
    }
    return last_positive;
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

Rng derive_stream(std::uint64_t seed, std::uint64_t purpose, std::uint64_t index) {
    std::uint64_t h = splitmix64(seed);
    h = splitmix64(h ^ (purpose * 0xd6e8feb86659fd93ULL));
    h = splitmix64(h ^ index);
    return Rng(h);
}

}  // namespace d2dpo
