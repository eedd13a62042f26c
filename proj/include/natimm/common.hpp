#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace natimm {

// Error taxonomy. The CLI maps these onto process exit codes:
//   ConfigError -> 1, DataError -> 2, NumericError -> 3, CapacityError -> 4.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Malformed files (checkpoints, JSONL, vocab) are a species of data error.
struct FormatError : DataError {
    using DataError::DataError;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CapacityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Violated API preconditions (programming errors, not user input).
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9e3779b97f4a7c15ull;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t seed = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t seed = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), seed);
}

// Deterministic PRNG (xoshiro256**). Self-contained so that draw sequences are
// bit-stable across platforms and standard libraries, and the full state is
// trivially serializable into checkpoints.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
    }

    uint64_t next_u64() {
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

    // Uniform double in [0, 1), 53 bits of precision.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). Modulo bias is negligible for the small n used here.
    int64_t uniform_int(int64_t n) {
        if (n <= 0) throw ContractError("Rng::uniform_int: n must be positive");
        return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
    }

    // Standard normal via Box-Muller. No cached spare, so the draw sequence is a
    // pure function of the engine state (matters for checkpoint/resume).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.141592653589793238 * u2);
    }

    // Derive an independent stream for (tag, index) without disturbing this engine.
    Rng fork(std::string_view tag, uint64_t index = 0) const {
        uint64_t h = fnv1a64(tag);
        h = fnv1a64(&index, sizeof(index), h);
        for (auto w : s_) h = fnv1a64(&w, sizeof(w), h);
        return Rng(h);
    }

    std::string serialize() const {
        std::string out;
        for (int i = 0; i < 4; ++i) {
            if (i) out += ' ';
            out += std::to_string(s_[i]);
        }
        return out;
    }

    static Rng deserialize(const std::string& text) {
        Rng r(0);
        size_t pos = 0;
        for (int i = 0; i < 4; ++i) {
            size_t used = 0;
            r.s_[i] = std::stoull(text.substr(pos), &used);
            pos += used;
            while (pos < text.size() && text[pos] == ' ') ++pos;
        }
        return r;
    }

    friend bool operator==(const Rng& a, const Rng& b) {
        return a.s_[0] == b.s_[0] && a.s_[1] == b.s_[1] && a.s_[2] == b.s_[2] && a.s_[3] == b.s_[3];
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t s_[4]{};
};

// Stream derivation used by training loops: the batch at step i depends only on
// (seed, purpose, i), never on how many draws earlier steps consumed. This is
// what makes interrupt/resume bit-exact.
inline Rng derive_rng(uint64_t seed, std::string_view purpose, uint64_t index = 0) {
    uint64_t h = fnv1a64(purpose);
    h = fnv1a64(&seed, sizeof(seed), h);
    h = fnv1a64(&index, sizeof(index), h);
    return Rng(h);
}

}  // namespace natimm
