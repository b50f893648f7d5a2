#pragma once

#include <cstdint>
#include <random>

namespace bam {

/// Explicit random stream. Every consumer receives one by reference; nothing
/// draws from hidden global state.
class Rng
{
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    /// Uniform on [0, 1).
    double uniform() { return std::generate_canonical<double, 53>(engine_); }

    double normal() { return normal_(engine_); }

    bool bernoulli(double p) { return uniform() < p; }

    std::uint64_t next_u64() { return engine_(); }

    std::size_t below(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }

    /// Independent child stream derived from this stream's next output.
    Rng split() { return Rng(next_u64() ^ 0x9e3779b97f4a7c15ULL); }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace bam
