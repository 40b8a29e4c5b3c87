#pragma once

#include <algorithm>
#include <cstdint>
#include <cstddef>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace mp {

// Bad user-supplied values (config keys, CLI arguments, out-of-vocabulary names).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Broken internal contract (shape mismatch, violated precondition, non-finite value).
struct ContractViolation : std::logic_error {
    explicit ContractViolation(const std::string& msg) : std::logic_error(msg) {}
};

// Filesystem and serialization failures; message carries the offending path.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

#define MP_REQUIRE(cond, msg)                                                  \
    do {                                                                       \
        if (!(cond)) throw ::mp::ContractViolation(std::string(msg));          \
    } while (0)

#define MP_CONFIG_REQUIRE(cond, msg)                                           \
    do {                                                                       \
        if (!(cond)) throw ::mp::ConfigError(std::string(msg));                \
    } while (0)

inline std::size_t checked_product(const std::vector<std::size_t>& dims) {
    std::size_t n = 1;
    for (std::size_t d : dims) n *= d;
    return n;
}

// --- seeding ------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(const void* data, std::size_t bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

// Independent named stream from a master seed; used so that, say, pose jitter
// and parameter init never share a sequence.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag) {
    std::uint64_t state = master ^ fnv1a64(tag);
    splitmix64(state);
    return splitmix64(state);
}

// xoshiro256** with splitmix-expanded seed.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
    }

    std::uint64_t next() {
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

    // [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n) by rejection.
    std::uint64_t below(std::uint64_t n) {
        MP_REQUIRE(n > 0, "Rng::below requires n > 0");
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t v = next();
        while (v >= limit) v = next();
        return v % n;
    }

    double normal() {
        // Box-Muller; fine for weight init, not used for pixel-exact outputs.
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.141592653589793 * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }
    std::uint64_t s_[4];
};

// --- deterministic trig ---------------------------------------------------
// Polynomial sin/cos built from exactly-rounded primitives only, so pose math
// gives identical bits on any IEEE-754 platform regardless of libm.

namespace detail {

// Taylor series through x^14 in Horner form; |y| <= pi/4 + slack.
inline double sin_kernel(double y) {
    const double y2 = y * y;
    double p = -1.0 / 1307674368000.0;
    p = p * y2 + 1.0 / 6227020800.0;
    p = p * y2 - 1.0 / 39916800.0;
    p = p * y2 + 1.0 / 362880.0;
    p = p * y2 - 1.0 / 5040.0;
    p = p * y2 + 1.0 / 120.0;
    p = p * y2 - 1.0 / 6.0;
    return y + y * y2 * p;
}

inline double cos_kernel(double y) {
    const double y2 = y * y;
    double p = 1.0 / 87178291200.0;
    p = p * y2 - 1.0 / 479001600.0;
    p = p * y2 + 1.0 / 3628800.0;
    p = p * y2 - 1.0 / 40320.0;
    p = p * y2 + 1.0 / 720.0;
    p = p * y2 - 1.0 / 24.0;
    p = p * y2 + 1.0 / 2.0;
    return 1.0 - y2 * p;
}

// Cody-Waite reduction by pi/2; adequate for the modest angles used here.
inline void trig_reduce(double x, double& y, int& quadrant) {
    constexpr double inv_hpi = 0.636619772367581343;   // 2/pi
    constexpr double hpi_hi = 1.57079632679489656;
    constexpr double hpi_lo = 6.12323399573676604e-17;
    const double k = std::floor(x * inv_hpi + 0.5);
    y = (x - k * hpi_hi) - k * hpi_lo;
    const long long ki = static_cast<long long>(k);
    quadrant = static_cast<int>(((ki % 4) + 4) % 4);
}

}  // namespace detail

inline double det_sin(double x) {
    double y;
    int q;
    detail::trig_reduce(x, y, q);
    switch (q) {
        case 0: return detail::sin_kernel(y);
        case 1: return detail::cos_kernel(y);
        case 2: return -detail::sin_kernel(y);
        default: return -detail::cos_kernel(y);
    }
}

inline double det_cos(double x) {
    double y;
    int q;
    detail::trig_reduce(x, y, q);
    switch (q) {
        case 0: return detail::cos_kernel(y);
        case 1: return -detail::sin_kernel(y);
        case 2: return -detail::cos_kernel(y);
        default: return detail::sin_kernel(y);
    }
}

constexpr double kPi = 3.14159265358979323846;

// Runs fn(i) for i in [0, n) on `jobs` threads; results must not depend on
// scheduling, so fn writes only to its own slot.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn&& fn) {
    if (jobs <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    const std::size_t workers = std::min(jobs, n);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += workers) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace mp
