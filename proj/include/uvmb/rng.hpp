#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "uvmb/tensor.hpp"

namespace uvmb {

// Deterministic RNG with hand-rolled distributions so that streams do not
// depend on the standard library implementation. splitmix64 seeding feeding
// xoshiro-style output via mt19937_64 would also work; we keep a single
// splitmix64 core which is plenty for data generation and init.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed ^ 0x9e3779b97f4a7c15ULL) {
        // decorrelate trivially related seeds
        next();
        next();
    }

    uint64_t next() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1)
    double unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }

    // Box-Muller; consumes two draws per pair, caches the second.
    double normal(double mean = 0.0, double sd = 1.0) {
        if (have_cached_) {
            have_cached_ = false;
            return mean + sd * cached_;
        }
        double u1, u2;
        do {
            u1 = unit();
        } while (u1 <= 1e-300);
        u2 = unit();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return mean + sd * r * std::cos(a);
    }

    // Inclusive bounds.
    int64_t randint(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(next() % static_cast<uint64_t>(hi - lo + 1));
    }

    bool coin(double p = 0.5) { return unit() < p; }

    template <typename T>
    void fill_uniform(Tensor<T>& t, T lo, T hi) {
        for (int64_t i = 0; i < t.numel(); ++i)
            t[i] = static_cast<T>(uniform(static_cast<double>(lo), static_cast<double>(hi)));
    }

    template <typename T>
    void fill_normal(Tensor<T>& t, T mean, T sd) {
        for (int64_t i = 0; i < t.numel(); ++i)
            t[i] = static_cast<T>(normal(static_cast<double>(mean), static_cast<double>(sd)));
    }

    template <typename I>
    void shuffle(std::vector<I>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(randint(0, static_cast<int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    uint64_t state_;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

}  // namespace uvmb
