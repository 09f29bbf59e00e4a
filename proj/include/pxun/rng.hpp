#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace pxun {

// Deterministic random source. All distributions are implemented on top of
// mt19937_64 draws so that identical seeds give identical streams on every
// platform (std::normal_distribution makes no such guarantee).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed), seed_hash_(splitmix(seed)) {}

    std::uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; one value per call, cached partner.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // Rejection-free modulo is fine here; streams are not security-relevant.
        return eng_() % n;
    }

    // Derives an independent child stream, e.g. one per dataset index.
    Rng child(std::uint64_t key) const {
        return Rng(splitmix(seed_hash_ ^ (0x9e3779b97f4a7c15ULL * (key + 1))));
    }

private:
    static std::uint64_t splitmix(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    std::mt19937_64 eng_;
    std::uint64_t seed_hash_ = 0;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace pxun
