// SPDX-License-Identifier: Apache-2.0
#ifndef CDFORMER_RNG_HPP
#define CDFORMER_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

#include "cdformer/tensor.hpp"

namespace cdformer {

/// splitmix64 finalizer; used both as a seed mixer and for deriving
/// per-subsystem streams from the single run seed.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t hash_str64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL; // FNV-1a
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Derive a child seed from (seed, label). All subsystem randomness flows
/// from the run seed through this function, so runs are reproducible from
/// the manifest alone.
inline uint64_t derive_seed(uint64_t seed, std::string_view label) {
    return mix64(seed ^ hash_str64(label));
}

inline uint64_t derive_seed(uint64_t seed, std::string_view label, uint64_t index) {
    return mix64(derive_seed(seed, label) ^ mix64(index));
}

/// Deterministic RNG. Normal deviates use Box-Muller on top of mt19937_64
/// instead of std::normal_distribution, whose output is
/// implementation-defined.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(mix64(seed)) {}

    uint64_t next_u64() { return gen_(); }

    /// uniform in [0, 1)
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    int uniform_int(int n) { // [0, n)
        return static_cast<int>(gen_() % static_cast<uint64_t>(n));
    }

    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void fill_normal(Tensor<T>& t, double std_dev = 1.0, double mean = 0.0) {
        for (int64_t i = 0; i < t.size(); ++i)
            t[i] = static_cast<T>(mean + std_dev * normal());
    }

    template <typename T>
    void fill_uniform(Tensor<T>& t, double lo, double hi) {
        for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(uniform(lo, hi));
    }

    std::string state() const {
        std::ostringstream os;
        os << gen_ << ' ' << (have_cached_ ? 1 : 0) << ' ' << cached_;
        return os.str();
    }

    void restore(const std::string& s) {
        std::istringstream is(s);
        int flag = 0;
        is >> gen_ >> flag >> cached_;
        if (!is) throw IoError("bad rng state string");
        have_cached_ = (flag != 0);
    }

private:
    std::mt19937_64 gen_;
    bool have_cached_ = false;
    double cached_ = 0.0;
};

} // namespace cdformer

#endif
