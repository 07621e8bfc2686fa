#pragma once

#include "nervdiff/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace nervdiff {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Deterministic random stream. uniform()/normal() are pure functions of the
// engine state (no cached spare), so serializing the engine alone is enough
// to resume a stream bit-exactly.
class RngStream {
public:
    explicit RngStream(uint64_t seed = 0) : seed_(seed), gen_(splitmix64(seed)) {}

    uint64_t raw() { return gen_(); }

    // [0, 1), 53-bit resolution
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform_in(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller, cosine branch only
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    int uniform_int(int n) { return static_cast<int>(gen_() % static_cast<uint64_t>(n)); }

    bool bernoulli(double p) { return uniform() < p; }

    // Independent child stream; does not consume parent state.
    RngStream fork(uint64_t salt) const { return RngStream(splitmix64(seed_ ^ splitmix64(salt + 0x51ed2701ull))); }

    template <typename Scalar>
    Tensor<Scalar> normal_tensor(Shape shape, double std_dev = 1.0, double mean = 0.0) {
        Tensor<Scalar> t(std::move(shape));
        for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(mean + std_dev * normal());
        return t;
    }

    template <typename Scalar>
    Tensor<Scalar> uniform_tensor(Shape shape, double lo, double hi) {
        Tensor<Scalar> t(std::move(shape));
        for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(uniform_in(lo, hi));
        return t;
    }

    std::string serialize() const {
        std::ostringstream os;
        os << seed_ << ' ' << gen_;
        return os.str();
    }
    static RngStream deserialize(const std::string& s) {
        std::istringstream is(s);
        RngStream r;
        is >> r.seed_ >> r.gen_;
        return r;
    }

private:
    uint64_t seed_ = 0;
    std::mt19937_64 gen_;
};

}  // namespace nervdiff
