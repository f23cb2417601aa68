#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <string_view>

namespace arlab {

// Counter-based pseudo-random stream. Every stochastic operation in the
// library takes an explicit stream, and streams are derived from a root
// (seed, name) pair, so any run is reproducible from its seed alone and
// independent streams never interleave.
class RngStream {
public:
    RngStream(uint64_t seed, std::string_view name) : key_(mix(seed ^ fnv1a(name))) {}

    // Derived stream, e.g. one per batch element or per grid position.
    [[nodiscard]] RngStream child(std::string_view name) const {
        return RngStream(key_, fnv1a(name));
    }
    [[nodiscard]] RngStream child(uint64_t index) const {
        return RngStream(key_, mix(index + 0x9e3779b97f4a7c15ull));
    }

    uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ull * ++counter_); }

    // Uniform in [0, 1).
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n).
    uint64_t uniform_index(uint64_t n) { return next_u64() % n; }

    // Standard normal via Box-Muller; draws two uniforms per call.
    double normal() {
        double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    RngStream(uint64_t a, uint64_t b) : key_(mix(a ^ mix(b))) {}

    // splitmix64 finalizer
    static uint64_t mix(uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    static uint64_t fnv1a(std::string_view s) {
        uint64_t h = 0xcbf29ce484222325ull;
        for (char c : s) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        return h;
    }

    uint64_t key_;
    uint64_t counter_ = 0;
};

}  // namespace arlab
