#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace v2flow {

// Deterministic PRNG (xoshiro256++ seeded via splitmix64). std::mt19937 plus the
// standard distributions are not bit-portable across library implementations, so
// every random draw in this project goes through this class.
class Rng {
public:
    explicit Rng(uint64_t seed) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t x = seed;
        for (auto& si : s_) si = splitmix64(x);
        has_spare_ = false;
        spare_ = 0.0;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // Gumbel(0,1) sample: -log(-log(u)), u in (0,1).
    double gumbel() {
        double u = uniform01();
        while (u <= 0.0) u = uniform01();
        return -std::log(-std::log(u));
    }

    // Uniform integer in [0, n) via rejection; n must be positive.
    uint64_t randint(uint64_t n) {
        const uint64_t threshold = (0 - n) % n;  // 2^64 mod n
        uint64_t r = next_u64();
        while (r < threshold) r = next_u64();
        return r % n;
    }

    // k distinct indices from [0, n), uniformly, in draw order (partial Fisher-Yates).
    std::vector<int> sample_without_replacement(int n, int k) {
        std::vector<int> pool(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i;
        std::vector<int> out;
        out.reserve(static_cast<size_t>(k));
        for (int i = 0; i < k; ++i) {
            const int j = i + static_cast<int>(randint(static_cast<uint64_t>(n - i)));
            std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
            out.push_back(pool[static_cast<size_t>(i)]);
        }
        return out;
    }

    // Stable stream derivation so parallel and serial consumers see identical draws.
    static uint64_t derive(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
        uint64_t x = seed;
        uint64_t h = splitmix64(x);
        x ^= a + 0x9e3779b97f4a7c15ULL;
        h ^= splitmix64(x);
        x ^= b + 0xbf58476d1ce4e5b9ULL;
        h ^= splitmix64(x);
        x ^= c + 0x94d049bb133111ebULL;
        h ^= splitmix64(x);
        return h;
    }

private:
    static uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    static uint64_t splitmix64(uint64_t& state) {
        state += 0x9e3779b97f4a7c15ULL;
        uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    uint64_t s_[4];
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace v2flow
