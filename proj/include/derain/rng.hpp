#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace derain {

// Deterministic RNG built on mt19937_64 with explicit value mappings.
// std::uniform_real_distribution and friends are implementation-defined,
// so the mappings are spelled out here to keep results reproducible
// across standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    int uniform_int(int n) {
        return static_cast<int>(uniform() * static_cast<double>(n));
    }

    bool coin() { return (gen_() & 1u) != 0; }

    // Standard normal via Box-Muller.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Derives an independent stream, e.g. one per training phase.
    Rng fork(uint64_t salt) {
        return Rng(gen_() ^ (salt * 0x9e3779b97f4a7c15ull));
    }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace derain
