#pragma once

#include <cstdint>
#include <string_view>

#include "proll/tensor.hpp"

namespace proll {

// Deterministic RNG with named streams derived from one global seed.
// Toggling a consumer of one stream (e.g. conditioning dropout) does not
// shift the draws of any other stream. All distributions are generated
// from explicit integer arithmetic so results are identical across
// standard library implementations.
class Rng {
  public:
    explicit Rng(uint64_t state) : s_(state ? state : 0x9e3779b97f4a7c15ULL) {}

    uint64_t next_u64() {
        // splitmix64
        uint64_t z = (s_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0,1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n).
    uint64_t below(uint64_t n) { return next_u64() % n; }

    // Standard normal via Box-Muller (one value per call; no cached state).
    double gaussian() {
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    template <typename T>
    void fill_gaussian(TensorT<T>& t, double mean = 0.0, double stddev = 1.0) {
        for (size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(mean + stddev * gaussian());
    }

    template <typename T>
    void fill_uniform(TensorT<T>& t, double lo, double hi) {
        for (size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(uniform(lo, hi));
    }

  private:
    uint64_t s_;
};

inline uint64_t hash_str(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (char c : s) {
        h ^= static_cast<uint8_t>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Stream for (seed, name, index). Used as rng_stream(seed, "noise", step).
inline Rng rng_stream(uint64_t seed, std::string_view name, uint64_t index = 0) {
    uint64_t h = hash_str(name);
    uint64_t z = seed;
    z ^= h + 0x9e3779b97f4a7c15ULL + (z << 6) + (z >> 2);
    z ^= index + 0x9e3779b97f4a7c15ULL + (z << 6) + (z >> 2);
    return Rng(z);
}

}  // namespace proll
