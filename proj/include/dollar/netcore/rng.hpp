#pragma once

#include <cstdint>
#include <random>

#include "dollar/netcore/tensor.hpp"

namespace dollar {

/// The single seeded generator threaded through every sampling operation.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    /// Uniform integer in [lo, hi] inclusive.
    long uniform_int(long lo, long hi) { return std::uniform_int_distribution<long>(lo, hi)(engine_); }
    bool bernoulli(double p) { return uniform() < p; }

    Tensor normal(Shape shape) {
        Tensor t(std::move(shape));
        for (auto& v : t.values()) {
            v = normal();
        }
        return t;
    }

    /// Independent child stream; deterministic in the parent's state.
    Rng split() { return Rng(engine_() ^ 0x9E3779B97F4A7C15ULL); }
    std::uint64_t next_u64() { return engine_(); }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace dollar
