#pragma once

#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <string>

namespace segadapt {

// Error taxonomy used across the library. All failures surface as one of
// these so callers (and the CLI) can map them to exit codes uniformly.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InvalidArgument : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

struct ParseError : Error {
    using Error::Error;
};

// Degenerate inputs (e.g. an empty mask fed to prompt synthesis). Callers
// typically catch this and skip the offending instance.
struct DegenerateInput : Error {
    using Error::Error;
};

struct TrainingFault : Error {
    using Error::Error;
};

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Deterministic PRNG (xoshiro256**). Self-contained so that sampled values
// are identical across standard libraries and platforms, which the
// reproducibility contract depends on.
class Rng {
  public:
    explicit Rng(uint64_t seed = 0) {
        uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
    }

    uint64_t next() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0,1).
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0,n) by rejection.
    uint64_t below(uint64_t n) {
        if (n == 0) throw InvalidArgument("Rng::below: n must be positive");
        const uint64_t threshold = (0 - n) % n;
        for (;;) {
            uint64_t r = next();
            if (r >= threshold) return r % n;
        }
    }

    // Standard normal via Box-Muller.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 1e-300) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

  private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t s_[4]{};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Mixes several seed components into one child seed; used to derive
// per-(epoch, sample, instance) streams from a single run seed.
inline uint64_t mix_seed(uint64_t a, uint64_t b = 0, uint64_t c = 0, uint64_t d = 0) {
    uint64_t state = a;
    uint64_t h = splitmix64(state);
    state ^= b + 0x9e3779b97f4a7c15ULL;
    h ^= splitmix64(state);
    state ^= c + 0xc2b2ae3d27d4eb4fULL;
    h ^= splitmix64(state);
    state ^= d + 0x165667b19e3779f9ULL;
    h ^= splitmix64(state);
    return h;
}

inline uint64_t hash_string(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// FNV-1a over raw bytes; used to fingerprint parameter tensors when
// checking that frozen weights stay frozen.
inline uint64_t fnv1a_bytes(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace segadapt
