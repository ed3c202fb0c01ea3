#pragma once

#include <cstdint>
#include <random>

namespace vce {

// SplitMix64 finaliser; used to derive per-item seeds from (seed, stream,
// index) so generated data does not depend on iteration order or workers.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
    return mix64(mix64(seed ^ mix64(stream)) + index);
}

using Rng = std::mt19937_64;

}  // namespace vce
