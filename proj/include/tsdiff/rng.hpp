#pragma once

#include "tsdiff/tensor.hpp"

#include <cstdint>
#include <random>

namespace tsdiff {

/// Seeded random source. Independent streams are derived from (seed, stream id)
/// so that parallel producers stay reproducible regardless of scheduling.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(mix(seed)) {}

    static Rng stream(std::uint64_t seed, std::uint64_t stream_id) { return Rng(mix(seed) ^ mix(~stream_id)); }

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
    /// Integer in [lo, hi] inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
    }
    double normal() { return normal_(engine_); }
    double normal(double mean, double stddev) { return mean + stddev * normal_(engine_); }
    std::int64_t poisson(double mean) {
        if (!(mean > 0.0)) return 0;
        return std::poisson_distribution<std::int64_t>(mean)(engine_);
    }

    Tensor normal_tensor(Shape shape) {
        Tensor t(std::move(shape));
        for (Scalar& v : t.values()) v = static_cast<Scalar>(normal_(engine_));
        return t;
    }

    std::mt19937_64& engine() noexcept { return engine_; }

    /// splitmix64 finalizer.
    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

} // namespace tsdiff
