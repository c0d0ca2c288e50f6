#include "oodseg/rng.hpp"

#include <cmath>

#include "oodseg/common.hpp"

namespace oodseg {

namespace {

// splitmix64 step; also the stream-seeding expander recommended for xoshiro.
std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
}

} // namespace

std::uint64_t mix64(std::uint64_t x) {
    std::uint64_t s = x;
    return splitmix64(s);
}

std::uint64_t hash_combine(std::uint64_t h, std::uint64_t v) {
    return mix64(h ^ (v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2)));
}

std::uint64_t hash_string(std::string_view s) {
    // FNV-1a, then mixed once to spread short tags.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return mix64(h);
}

StreamRng::StreamRng(std::uint64_t seed) {
    std::uint64_t s = seed;
    for (auto& si : s_) si = splitmix64(s);
}

StreamRng StreamRng::keyed(std::uint64_t seed, std::string_view tag,
                           std::uint64_t k0, std::uint64_t k1, std::uint64_t k2) {
    std::uint64_t h = mix64(seed);
    h = hash_combine(h, hash_string(tag));
    h = hash_combine(h, k0);
    h = hash_combine(h, k1);
    h = hash_combine(h, k2);
    return StreamRng(h);
}

std::uint64_t StreamRng::next_u64() {
    // xoshiro256**
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double StreamRng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double StreamRng::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
}

std::int64_t StreamRng::uniform_int(std::int64_t n) {
    if (n <= 0) fail(Status::invalid_argument, "uniform_int: n must be positive");
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return static_cast<std::int64_t>(x % un);
}

double StreamRng::normal() {
    // Box-Muller; u1 kept away from 0 so log() stays finite.
    double u1;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(2.0 * M_PI * u2);
}

double StreamRng::normal(double mean, double stddev) {
    return mean + stddev * normal();
}

bool StreamRng::bernoulli(double p) {
    return uniform() < p;
}

} // namespace oodseg
