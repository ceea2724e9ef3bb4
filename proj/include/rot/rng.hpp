#pragma once

#include <cmath>
#include <cstdint>

namespace rot {

// Deterministic splitmix64-based generator. We avoid std:: distributions on
// purpose: their output is implementation-defined and checkpoints produced on
// one toolchain would not replay on another.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed ^ 0x9e3779b97f4a7c15ull) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double next_double() {
        return double(next_u64() >> 11) * (1.0 / 9007199254740992.0);
    }

    // uniform integer in [0, n)
    uint64_t next_below(uint64_t n) { return next_u64() % n; }

    int next_int(int lo, int hi) {  // inclusive range
        return lo + int(next_below(uint64_t(hi - lo + 1)));
    }

    // standard normal via Box-Muller
    double next_normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = next_double();
        } while (u1 <= 1e-300);
        u2 = next_double();
        double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * M_PI * u2);
        have_spare_ = true;
        return r * std::cos(2.0 * M_PI * u2);
    }

    // derive an independent stream, e.g. per-example
    Rng fork(uint64_t salt) const {
        Rng r(state_ ^ (salt * 0xd1342543de82ef95ull + 0x2545f4914f6cdd1dull));
        return r;
    }

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace rot
