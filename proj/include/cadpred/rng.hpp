#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string_view>
#include <utility>

namespace cadpred {

inline std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_name(std::string_view s)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Derive an independent stream seed from a base seed and a path of stream ids.
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> path)
{
    std::uint64_t s = splitmix64(seed);
    for (auto p : path)
        s = splitmix64(s ^ splitmix64(p + 0x632be59bd9b4e019ULL));
    return s;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view name, std::uint64_t index = 0)
{
    return derive_seed(seed, {hash_name(name), index});
}

/// Uniform integer in [0, n) from a 64-bit source. Lemire's multiply-shift
/// with rejection.
template <class Next>
std::uint64_t lemire_index(Next&& next, std::uint64_t n)
{
    if (n <= 1)
        return 0;
    std::uint64_t x = next();
    __uint128_t m = static_cast<__uint128_t>(x) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
        const std::uint64_t t = (0 - n) % n;
        while (low < t) {
            x = next();
            m = static_cast<__uint128_t>(x) * n;
            low = static_cast<std::uint64_t>(m);
        }
    }
    return static_cast<std::uint64_t>(m >> 64);
}

/// Cheap splitmix64 counter stream for short-lived draws keyed by a seed
/// (one per tree node, say) where seeding a Mersenne Twister would dominate.
class KeyedStream {
public:
    explicit KeyedStream(std::uint64_t key) : state_(key) {}

    std::uint64_t next_u64()
    {
        state_ += 0x9e3779b97f4a7c15ULL;
        return splitmix64(state_);
    }

    std::uint64_t index(std::uint64_t n)
    {
        return lemire_index([this] { return next_u64(); }, n);
    }

private:
    std::uint64_t state_;
};

/// Seeded generator used by every randomized operation.
///
/// The engine is mt19937_64, whose output sequence is fixed by the standard.
/// The transforms below are written out by hand because the std::
/// distributions are implementation-defined and would break cross-platform
/// reproducibility.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n).
    std::uint64_t index(std::uint64_t n)
    {
        return lemire_index([this] { return engine_(); }, n);
    }

    /// Standard normal via the Marsaglia polar method.
    double normal()
    {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double f = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * f;
        has_spare_ = true;
        return u * f;
    }

    double normal(double mean, double sd) { return mean + sd * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    template <class T>
    void shuffle(std::span<T> items)
    {
        for (std::size_t i = items.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(index(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace cadpred
