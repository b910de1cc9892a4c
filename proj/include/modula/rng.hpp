#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "modula/tensor.hpp"

namespace modula {

/// Deterministic random source. All draws are derived from mt19937_64
/// through fixed arithmetic (no std:: distributions, whose sequences are
/// implementation-defined), so identical seeds give identical streams on
/// any platform.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    /// Uniform in [0, n). Modulo bias is ~n/2^64, irrelevant here.
    int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Box-Muller, one value per call. The sine branch is discarded to
    /// keep the stream position independent of call pairing.
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = uniform01();
        double u2 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
        return mean + stddev * z;
    }

    /// Fisher-Yates with our own index draws.
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = next_u64() % i;
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
};

/// Stable seed derivation for independent sub-streams, keyed by strings
/// and an integer so that e.g. expert init does not depend on creation
/// order.
inline uint64_t derive_seed(uint64_t base, std::string_view ns, std::string_view key = "", int64_t index = 0) {
    uint64_t h = fnv1a64(&base, sizeof(base));
    h = fnv1a64_str(h, "/");
    for (char c : ns) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    h = fnv1a64_str(h, "/");
    for (char c : key) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    h ^= fnv1a64(&index, sizeof(index));
    h *= 1099511628211ull;
    return h;
}

}  // namespace modula
