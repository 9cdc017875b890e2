#pragma once

#include <cstdint>

namespace clearseg {

// SplitMix64. Fixture generation depends on this exact sequence, so the
// algorithm is pinned here rather than delegated to std::: advance the state
// by the golden-ratio increment, then mix with the Stafford finalizer.
// A port in any language that reproduces next_u64() reproduces every fixture
// byte for byte.
struct SplitMix64 {
    uint64_t state = 0;

    explicit SplitMix64(uint64_t seed) : state(seed) {}

    uint64_t next_u64() {
        state += 0x9E3779B97F4A7C15ull;
        uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform in [0,1): top 24 bits over 2^24, exact in float.
    float next_unit() {
        return static_cast<float>(next_u64() >> 40) * (1.0f / 16777216.0f);
    }

    // Uniform in [-scale, scale).
    float next_symmetric(float scale) {
        return (2.0f * next_unit() - 1.0f) * scale;
    }

    // Uniform integer in [0, bound) via 64-bit modulo; bias is irrelevant at
    // fixture scale and the result stays portable.
    uint64_t next_below(uint64_t bound) {
        return next_u64() % bound;
    }
};

} // namespace clearseg
