#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace dive {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Order-sensitive seed derivation; used to split one base seed into
// independent sub-streams (per step, per image, per cell).
inline uint64_t seed_combine(uint64_t seed, uint64_t v) {
    return splitmix64(seed ^ (v + 0x9e3779b97f4a7c15ull + (seed << 6) + (seed >> 2)));
}

inline uint64_t seed_combine(uint64_t seed, std::string_view s) {
    uint64_t h = seed;
    for (unsigned char c : s) {
        h = seed_combine(h, uint64_t(c));
    }
    return h;
}

inline std::mt19937_64 make_rng(uint64_t seed) {
    return std::mt19937_64(seed);
}

}  // namespace dive
