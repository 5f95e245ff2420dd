#ifndef PSRLAB_RNG_HPP_
#define PSRLAB_RNG_HPP_

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace psrlab {

// splitmix64 finalizer; used to derive independent child seeds.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Seeded random stream with hand-rolled distributions so results are
// bit-reproducible across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : root_(seed), engine_(mix64(seed)) {}

    // Derives an independent stream; (seed, id) pairs give distinct streams.
    Rng derive(std::uint64_t id) const { return Rng(mix64(root_ ^ mix64(id ^ 0xa5a5a5a5a5a5a5a5ULL))); }

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi] inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(engine_() % span);
    }

    // Box-Muller, no cached spare so the draw sequence is position-independent.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    std::vector<double> normal_vec(std::size_t n) {
        std::vector<double> out(n);
        for (auto& v : out) v = normal();
        return out;
    }

    // Index draw from unnormalized non-negative weights.
    std::size_t categorical(const std::vector<double>& weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        double r = uniform() * total;
        for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
            r -= weights[i];
            if (r < 0.0) return i;
        }
        return weights.empty() ? 0 : weights.size() - 1;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t root_;
    std::mt19937_64 engine_;
};

}  // namespace psrlab

#endif  // PSRLAB_RNG_HPP_
