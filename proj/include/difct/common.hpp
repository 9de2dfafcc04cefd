#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace difct {

// Error taxonomy. The CLI maps these onto exit codes:
// invalid argument -> 2, data/format -> 3, numerical -> 4.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InvalidArgumentError : Error {
    using Error::Error;
};

struct DataError : Error {
    using Error::Error;
};

struct FormatError : DataError {
    using DataError::DataError;
};

struct OutOfBoundsError : DataError {
    using DataError::DataError;
};

struct DegenerateVolumeError : DataError {
    using DataError::DataError;
};

struct DegenerateProjectionError : DataError {
    DegenerateProjectionError(const std::string& msg, int view)
        : DataError(msg), view_index(view) {}
    int view_index;
};

struct NumericalError : Error {
    using Error::Error;
};

using Vec3 = std::array<double, 3>;
using Shape3 = std::array<int64_t, 3>;

// Deterministic RNG. splitmix64-seeded xoshiro-style generator so results
// do not depend on the standard library's distribution internals.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t z = seed;
        for (auto& s : state_) {
            z += 0x9e3779b97f4a7c15ull;
            uint64_t t = z;
            t = (t ^ (t >> 30)) * 0xbf58476d1ce4e5b9ull;
            t = (t ^ (t >> 27)) * 0x94d049bb133111ebull;
            s = t ^ (t >> 31);
        }
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) { return next_u64() % n; }

    // Derive an independent stream, for per-epoch / per-volume reproducibility.
    static uint64_t mix(uint64_t a, uint64_t b) {
        uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    std::array<uint64_t, 4> state_{};
};

// FNV-1a, used for geometry fingerprints.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

// Global worker cap shared by OpenMP loops and BLAS kernels.
void set_max_threads(int n);
int max_threads();

}  // namespace difct
