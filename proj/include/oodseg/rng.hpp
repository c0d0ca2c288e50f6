#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace oodseg {

/// Deterministic random streams. Every consumer derives its own stream from
/// (seed, purpose tag, integer key...) so that results do not depend on the
/// order in which unrelated draws happen. All arithmetic is explicit (no
/// std::<distribution>), so sequences are identical across platforms.
class StreamRng {
  public:
    explicit StreamRng(std::uint64_t seed);

    /// Stream keyed by a seed, a purpose tag and up to three integer keys.
    static StreamRng keyed(std::uint64_t seed, std::string_view tag,
                           std::uint64_t k0 = 0, std::uint64_t k1 = 0,
                           std::uint64_t k2 = 0);

    std::uint64_t next_u64();

    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi);

    /// Uniform integer in [0, n); n > 0.
    std::int64_t uniform_int(std::int64_t n);

    /// Standard normal via Box-Muller.
    double normal();
    double normal(double mean, double stddev);

    bool bernoulli(double p);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
            std::int64_t j = uniform_int(i + 1);
            std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
        }
    }

  private:
    std::uint64_t s_[4];
};

/// 64-bit mixing hash used to key streams; also used for config hashing.
std::uint64_t mix64(std::uint64_t x);
std::uint64_t hash_combine(std::uint64_t h, std::uint64_t v);
std::uint64_t hash_string(std::string_view s);

} // namespace oodseg
