#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace arsdm {

// splitmix64 step: advances the state by the golden-ratio increment and
// returns a strongly mixed output. Portable and identical on every platform,
// unlike std::normal_distribution whose draw sequence is stdlib-specific.
inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9E3779B97F4A7C15ull;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// Splittable mixing of two 64-bit values into a derived seed.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    uint64_t s = a ^ (0xC2B2AE3D27D4EB4Full * (b + 0x9E3779B97F4A7C15ull));
    uint64_t z = splitmix64(s);
    return z ^ splitmix64(s);
}

struct RngState {
    uint64_t seed = 0;
    uint64_t stream = 0;
};

// Counter-based generator over splitmix64. Identical (seed, stream) pairs
// yield identical draw sequences on any build.
class Rng {
public:
    Rng() : Rng(RngState{}) {}
    explicit Rng(RngState st) : Rng(st.seed, st.stream) {}
    Rng(uint64_t seed, uint64_t stream = 0)
        : state_((seed * 0x9E3779B97F4A7C15ull) ^
                 (stream * 0xC2B2AE3D27D4EB4Full + 0x165667B19E3779F9ull)) {}

    uint64_t next_u64() { return splitmix64(state_); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n). n must be positive; modulo bias is irrelevant at the
    // n values used here (all far below 2^32).
    uint64_t next_below(uint64_t n) { return next_u64() % n; }

    // Single standard normal draw via Box-Muller; always consumes two
    // uniforms so the draw sequence does not depend on call parity.
    double normal() {
        double u1 = 1.0 - uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    // Fills with standard normals consuming both Box-Muller branches.
    void fill_normal(double* out, size_t n) {
        size_t i = 0;
        while (i + 1 < n) {
            double u1 = 1.0 - uniform();
            double u2 = uniform();
            double r = std::sqrt(-2.0 * std::log(u1));
            out[i++] = r * std::cos(6.283185307179586477 * u2);
            out[i++] = r * std::sin(6.283185307179586477 * u2);
        }
        if (i < n) out[i] = normal();
    }

    void fill_normal(std::vector<double>& out) { fill_normal(out.data(), out.size()); }

private:
    uint64_t state_;
};

} // namespace arsdm
