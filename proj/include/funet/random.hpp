#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace funet {

/// mt19937_64 with portable float conversions (the std distributions differ between standard libraries).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }
    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [lo, hi].
    std::int64_t integer(std::int64_t lo, std::int64_t hi)
    {
        const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(engine_() % span);
    }
    bool coin(double p) { return uniform() < p; }
    /// Box-Muller standard normal.
    double normal();

    template <typename It>
    void shuffle(It first, It last)
    {
        for (auto n = last - first; n > 1; --n) std::swap(first[n - 1], first[integer(0, n - 1)]);
    }

private:
    std::mt19937_64 engine_;
};

/// FNV-1a, used to derive stable per-name seeds.
std::uint64_t stable_hash(std::string_view text, std::uint64_t seed = 0);

}  // namespace funet
