#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace prue {

// FNV-1a over raw bytes. Used for stream derivation, config hashes and
// checkpoint checksums.
std::uint64_t fnv1a64(const void* data, std::size_t len);
std::uint64_t fnv1a64(std::string_view s);

// SplitMix64 generator. All randomness in the library flows through this
// class so that runs are bit-identical across standard libraries and
// platforms; std:: distributions are deliberately not used.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64();

    // Uniform in [0, 1) with 53 random bits.
    double next_double();

    // Uniform integer in [0, n). n must be > 0.
    std::uint64_t below(std::uint64_t n);

    // Standard normal via Box-Muller (two uniforms per draw, no cached
    // spare, so the draw sequence is independent of call grouping).
    double normal();

  private:
    std::uint64_t state_;
};

// Derives an independent stream from a run seed and a stream name,
// e.g. derive(seed, "init"), derive(seed, "shuffle").
Rng derive(std::uint64_t seed, std::string_view stream);

// Fisher-Yates shuffle driven by Rng::below.
template <class T>
void shuffle(std::vector<T>& v, Rng& rng) {
    if (v.size() < 2) return;
    for (std::size_t i = v.size() - 1; i > 0; --i) {
        std::size_t j = static_cast<std::size_t>(rng.below(i + 1));
        if (i != j) std::swap(v[i], v[j]);
    }
}

}  // namespace prue
