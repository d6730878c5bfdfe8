#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace ftlab {

// Deterministic PRNG used everywhere instead of <random> distributions,
// whose output is implementation-defined. splitmix64 core, explicit
// Box-Muller for gaussians, Lemire-style bounded ints.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform integer in [0, bound). bound must be > 0.
    std::uint64_t next_below(std::uint64_t bound) {
        // rejection sampling on the top bits keeps the draw unbiased
        std::uint64_t threshold = (~bound + 1) % bound;
        for (;;) {
            std::uint64_t r = next_u64();
            if (r >= threshold) return r % bound;
        }
    }

    /// Uniform integer in [lo, hi] inclusive.
    std::int64_t next_int(std::int64_t lo, std::int64_t hi) {
        return lo + static_cast<std::int64_t>(next_below(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    bool next_bool(double p_true) { return next_double() < p_true; }

    /// Standard normal via Box-Muller; caches the second draw.
    double next_gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u = 1.0 - next_double();  // (0, 1], keeps log finite
        double v = next_double();
        double r = std::sqrt(-2.0 * std::log(u));
        double a = 6.283185307179586476925286766559 * v;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        if (v.size() <= 1) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            std::size_t j = static_cast<std::size_t>(next_below(i + 1));
            std::swap(v[i], v[j]);
        }
    }

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Stable mix of a base seed and an index, for per-item derived streams.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
    std::uint64_t z = base ^ (0x9e3779b97f4a7c15ULL + index * 0xd1342543de82ef95ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// FNV-1a over raw bytes, for dataset content hashes.
inline std::uint64_t fnv1a(const void* bytes, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
    const unsigned char* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace ftlab
