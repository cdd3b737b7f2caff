#pragma once

#include <cmath>
#include <cstdint>

#include "anchorudf/common.hpp"

namespace audf {

// Deterministic RNG used everywhere randomness is needed. xoshiro256++ with
// splitmix64 seeding; the normal sampler is an explicit Box-Muller transform.
// std::mt19937_64 would do, but the standard leaves <random> distribution
// algorithms implementation-defined, and seeded outputs here must be stable
// bytes (checkpoints, extracted clouds, fixtures).
//
// Substreams: Rng(seed, stream) derives an independent stream, so parallel
// per-slot generation (slot index as stream id) is order-independent.
class Rng {
  public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) {
        std::uint64_t x = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
        for (auto& w : state_) w = splitmix64(x);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // Rejection-free modulo bias is negligible for desk-scale n; use
        // multiply-shift which is exact for n << 2^64.
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // Standard normal via Box-Muller. Consumes two uniforms per pair; the
    // spare is cached within this stream.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do { u1 = uniform(); } while (u1 <= 0.0);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.141592653589793238462643383279502884 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double sigma) { return sigma * normal(); }

    Vec3 normal_vec3(double sigma) { return {normal(sigma), normal(sigma), normal(sigma)}; }

    Vec3 uniform_vec3(double lo, double hi) {
        return {uniform(lo, hi), uniform(lo, hi), uniform(lo, hi)};
    }

    static std::uint64_t splitmix64(std::uint64_t& x) {
        std::uint64_t z = (x += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

  private:
    static std::uint64_t rotl(std::uint64_t v, int k) {
        return (v << k) | (v >> (64 - k));
    }

    std::uint64_t state_[4];
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace audf
