#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace dc2f {

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}
}  // namespace detail

// Deterministic RNG. mt19937_64 is bit-exact across platforms by the standard;
// the std distributions are not, so the transforms here are hand-rolled.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // uniform in [0,1) with 53 bits of entropy
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller, cosine branch only
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    // unbiased integer in [0, n)
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = eng_();
        } while (x >= limit);
        return x % n;
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // independent child stream keyed on (construction seed, tag);
    // does not disturb this stream
    Rng derive(std::uint64_t tag) const {
        return Rng(detail::splitmix64(seed_ ^ detail::splitmix64(tag)));
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 eng_;
};

}  // namespace dc2f
