#pragma once

#include <cstdint>
#include <random>

namespace petgamma {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Independent generator for the (seed, level, tag) counter triple.
inline std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t level, std::uint64_t tag = 0) {
    std::uint64_t k = splitmix64(seed);
    k = splitmix64(k ^ (level * 0xd1b54a32d192ed03ULL));
    k = splitmix64(k ^ (tag * 0x8cb92ba72f3d8dd7ULL));
    return std::mt19937_64(k);
}

}  // namespace petgamma
