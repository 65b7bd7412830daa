#include "prue/rng.hpp"

#include <cmath>

namespace prue {

std::uint64_t fnv1a64(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

std::uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

std::uint64_t Rng::next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

double Rng::next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t n) {
    // Rejection sampling over the smallest covering power-of-two mask:
    // unbiased and implementation-pinned.
    std::uint64_t mask = n - 1;
    mask |= mask >> 1;
    mask |= mask >> 2;
    mask |= mask >> 4;
    mask |= mask >> 8;
    mask |= mask >> 16;
    mask |= mask >> 32;
    for (;;) {
        std::uint64_t x = next_u64() & mask;
        if (x < n) return x;
    }
}

double Rng::normal() {
    // Box-Muller. u1 is kept away from 0 so the log is finite.
    double u1 = next_double();
    double u2 = next_double();
    if (u1 < 1e-300) u1 = 1e-300;
    const double two_pi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
}

Rng derive(std::uint64_t seed, std::string_view stream) {
    std::uint64_t h = fnv1a64(stream);
    // Mix the seed and the stream hash through one SplitMix64 step each so
    // nearby seeds do not produce correlated streams.
    Rng mixer(seed ^ h);
    std::uint64_t s = mixer.next_u64();
    return Rng(s);
}

}  // namespace prue
