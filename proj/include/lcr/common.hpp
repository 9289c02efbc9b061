#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lcr {

inline constexpr const char* kToolVersion = "0.1.0";

// Contract violations: a caller passed arguments that break an operation's
// preconditions (shape mismatch, invalid config, non-scalar loss, ...).
struct ContractError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Bad external inputs: unreadable files, malformed records, format mismatches.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Numerical aborts: NaN loss, zero-norm embeddings, degenerate values.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// 64-bit FNV-1a over a byte span.
inline uint64_t fnv1a64(std::span<const uint8_t> bytes, uint64_t seed = 0xcbf29ce484222325ull) {
    uint64_t h = seed;
    for (uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t seed = 0xcbf29ce484222325ull) {
    return fnv1a64(std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(s.data()), s.size()), seed);
}

std::string to_hex(uint64_t v);
uint64_t parse_hex(const std::string& s);

/// Deterministic RNG used everywhere seeds appear. Wraps std::mt19937_64
/// (whose sequence the standard pins down) with hand-specified uniform /
/// normal / shuffle constructions, so identical seeds give identical
/// streams regardless of the standard library's distribution internals.
class Rng {
  public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n); n must be positive.
    uint64_t below(uint64_t n) {
        // rejection sampling keeps the distribution exact
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return v % n;
    }

    /// Standard normal via Box-Muller with a cached spare.
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <class T>
    void shuffle(std::vector<T>& v) {
        if (v.size() < 2) return;
        for (size_t i = v.size() - 1; i > 0; --i) {
            size_t j = static_cast<size_t>(below(i + 1));
            std::swap(v[i], v[j]);
        }
    }

  private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace lcr
