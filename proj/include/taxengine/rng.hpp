#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>
#include <utility>

namespace taxengine {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept
{
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline constexpr std::uint64_t mix_keys(std::uint64_t a, std::uint64_t b) noexcept
{
    return splitmix64(a ^ splitmix64(b + 0x632BE59BD9B4E019ULL));
}

inline constexpr std::uint64_t fnv1a(std::string_view text) noexcept
{
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

/// Counter-based generator: the i-th draw of stream (seed, stream) is a pure
/// function of (seed, stream, i), so any consumer can be replayed in isolation.
class CounterRng {
public:
    explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0) noexcept
        : key_(mix_keys(seed, stream))
    {
    }

    std::uint64_t next_u64() noexcept { return splitmix64(key_ ^ splitmix64(counter_++)); }

    /// Uniform in [0, 1).
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, bound).
    std::uint64_t below(std::uint64_t bound) noexcept
    {
        // Lemire's multiply-shift; bias is < 2^-64 * bound, irrelevant here.
        return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * bound) >> 64);
    }

    /// Standard normal via Box-Muller.
    double normal() noexcept
    {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    template <class T>
    void shuffle(std::span<T> items) noexcept
    {
        for (std::size_t i = items.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// Stateless uniform draw keyed by (key, index); used for dropout masks.
inline double keyed_uniform(std::uint64_t key, std::uint64_t index) noexcept
{
    return static_cast<double>(splitmix64(key ^ splitmix64(index)) >> 11) * 0x1.0p-53;
}

} // namespace taxengine
