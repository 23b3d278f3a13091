#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include <derog/errors.hpp>

namespace derog {

// splitmix64 step; used to expand a 64-bit seed into generator state.
inline std::uint64_t splitmix64(std::uint64_t& s) {
    s += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = s;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// xoshiro256++ with splitmix64 seeding. Every random draw in the project
// flows through this class so runs are reproducible across platforms;
// std::random distributions are avoided for the same reason.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& w : s_) w = splitmix64(x);
    }

    static Rng from_state(const std::array<std::uint64_t, 4>& st) {
        Rng r(0);
        r.s_ = st;
        return r;
    }
    std::array<std::uint64_t, 4> state() const { return s_; }

    std::uint64_t next() {
        auto rotl = [](std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); };
        std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // [0,1) with 53 random bits
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // unbiased integer in [0,n)
    long below(long n) {
        if (n <= 0) throw usage_error("Rng::below: n must be positive");
        std::uint64_t bound = static_cast<std::uint64_t>(n);
        std::uint64_t threshold = (-bound) % bound;
        for (;;) {
            std::uint64_t r = next();
            if (r >= threshold) return static_cast<long>(r % bound);
        }
    }

    // Box-Muller without caching so state() captures everything
    double normal() {
        double u1 = 1.0 - uniform();  // (0,1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (long i = static_cast<long>(v.size()) - 1; i > 0; --i) {
            long j = below(i + 1);
            std::swap(v[i], v[static_cast<std::size_t>(j)]);
        }
    }

    // k distinct elements of pool, order randomized (partial Fisher-Yates)
    std::vector<long> sample_without_replacement(std::vector<long> pool, long k) {
        if (k > static_cast<long>(pool.size()))
            throw usage_error("Rng::sample_without_replacement: k exceeds pool size");
        for (long i = 0; i < k; ++i) {
            long j = i + below(static_cast<long>(pool.size()) - i);
            std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
        }
        pool.resize(static_cast<std::size_t>(k));
        return pool;
    }

  private:
    std::array<std::uint64_t, 4> s_{};
};

}  // namespace derog
