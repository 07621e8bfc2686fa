#pragma once

#include "nervdiff/errors.hpp"
#include "nervdiff/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace nervdiff {

enum class ScheduleKind { linear_beta, cosine };
enum class PredictionTarget { epsilon, x0 };

// Variance-preserving schedule: alpha[t]^2 + sigma[t]^2 = 1. Timesteps are
// 1-based in the public accessors, matching the diffusion indexing
// theta_t = alpha_t * theta_0 + sigma_t * eps.
struct DiffusionSchedule {
    Index num_steps = 0;
    std::vector<double> alpha;  // signal coefficient, strictly decreasing
    std::vector<double> sigma;  // noise coefficient, strictly increasing
    bool variance_preserving = true;

    double alpha_at(Index t) const {
        check_t(t);
        return alpha[static_cast<size_t>(t - 1)];
    }
    double sigma_at(Index t) const {
        check_t(t);
        return sigma[static_cast<size_t>(t - 1)];
    }
    // alpha_bar in DDPM notation
    double alpha_sq(Index t) const { return t == 0 ? 1.0 : alpha_at(t) * alpha_at(t); }

    void check_t(Index t) const {
        if (t < 1 || t > num_steps) throw std::out_of_range("timestep out of schedule range");
    }
};

inline DiffusionSchedule build_schedule(Index num_steps, ScheduleKind kind) {
    if (num_steps < 2) throw std::invalid_argument("build_schedule: num_steps must be >= 2");
    DiffusionSchedule sch;
    sch.num_steps = num_steps;
    sch.alpha.resize(static_cast<size_t>(num_steps));
    sch.sigma.resize(static_cast<size_t>(num_steps));
    if (kind == ScheduleKind::linear_beta) {
        const double beta_start = 1e-4, beta_end = 0.02;
        double abar = 1.0;
        for (Index t = 0; t < num_steps; ++t) {
            double beta = beta_start + (beta_end - beta_start) * static_cast<double>(t) /
                                           static_cast<double>(num_steps - 1);
            abar *= 1.0 - beta;
            sch.alpha[static_cast<size_t>(t)] = std::sqrt(abar);
            sch.sigma[static_cast<size_t>(t)] = std::sqrt(1.0 - abar);
        }
    } else {
        const double s = 0.008;
        const double pi_half = 1.5707963267948966;
        auto f = [&](double u) {
            double c = std::cos((u + s) / (1.0 + s) * pi_half);
            return c * c;
        };
        double f0 = f(0.0);
        double abar_prev = 1.0, abar = 1.0;
        for (Index t = 1; t <= num_steps; ++t) {
            double target = f(static_cast<double>(t) / static_cast<double>(num_steps)) / f0;
            double beta = std::min(1.0 - target / abar_prev, 0.999);
            abar = abar_prev * (1.0 - beta);
            sch.alpha[static_cast<size_t>(t - 1)] = std::sqrt(abar);
            sch.sigma[static_cast<size_t>(t - 1)] = std::sqrt(1.0 - abar);
            abar_prev = abar;
        }
    }
    return sch;
}

inline double snr(const DiffusionSchedule& sch, Index t) {
    double a = sch.alpha_at(t);
    double s = std::max(sch.sigma_at(t), 1e-12);  // overflow guard near t=0
    return (a * a) / (s * s);
}

// Min-SNR-gamma loss weight. For x0 prediction: min{SNR, gamma}; for epsilon
// prediction the weight is divided by SNR.
inline double min_snr_weight(const DiffusionSchedule& sch, Index t, double gamma,
                             PredictionTarget target) {
    if (!(gamma > 0)) throw std::invalid_argument("min_snr_weight: gamma must be positive");
    double r = snr(sch, t);
    double w = std::min(r, gamma);
    return target == PredictionTarget::x0 ? w : w / r;
}

// Diagonal Gaussian KL to N(0, I), averaged per element.
template <typename Scalar>
double kl_to_standard_normal(const Tensor<Scalar>& mean, const Tensor<Scalar>& logvar) {
    if (mean.size() != logvar.size())
        throw std::invalid_argument("kl_to_standard_normal: shape mismatch");
    if (!mean.all_finite() || !logvar.all_finite())
        throw std::invalid_argument("kl_to_standard_normal: non-finite input");
    double acc = 0.0;
    for (Index i = 0; i < mean.size(); ++i) {
        double mu = static_cast<double>(mean[i]);
        double lv = static_cast<double>(logvar[i]);
        acc += 0.5 * (mu * mu + std::exp(lv) - 1.0 - lv);
    }
    return acc / static_cast<double>(mean.size());
}

// ---------------------------------------------------------------------------
// 3-d sinusoidal positional embedding over absolute coordinates

struct Pe3dDims {
    Index d_t = 16, d_h = 16, d_w = 16;
    Index total() const { return d_t + d_h + d_w; }
};

struct PositionalEmbedding3D {
    Pe3dDims dims;
    Index h = 0, w = 0, t = 0;
    Tensor<float> values;  // [h, w, T, d_t+d_h+d_w]
};

namespace detail {

// Standard sin/cos pairs with base 10000 over an absolute coordinate.
inline void sincos_embed(double coord, Index d, float* out) {
    Index half = d / 2;
    for (Index j = 0; j < half; ++j) {
        double freq = std::pow(10000.0, -2.0 * static_cast<double>(j) / static_cast<double>(d));
        out[2 * j] = static_cast<float>(std::sin(coord * freq));
        out[2 * j + 1] = static_cast<float>(std::cos(coord * freq));
    }
}

}  // namespace detail

inline PositionalEmbedding3D build_pe3d(Pe3dDims dims, Index h, Index w,
                                        const std::vector<double>& time_offsets) {
    if (dims.d_t % 2 || dims.d_h % 2 || dims.d_w % 2)
        throw std::invalid_argument("build_pe3d: embedding dims must be even");
    if (h < 1 || w < 1 || time_offsets.empty())
        throw std::invalid_argument("build_pe3d: grid extents must be >= 1");
    const Index T = static_cast<Index>(time_offsets.size());
    PositionalEmbedding3D pe;
    pe.dims = dims;
    pe.h = h;
    pe.w = w;
    pe.t = T;
    const Index D = dims.total();
    pe.values = Tensor<float>({h, w, T, D});
    std::vector<float> te(static_cast<size_t>(dims.d_t));
    std::vector<float> he(static_cast<size_t>(dims.d_h));
    std::vector<float> we(static_cast<size_t>(dims.d_w));
    for (Index y = 0; y < h; ++y) {
        detail::sincos_embed(static_cast<double>(y), dims.d_h, he.data());
        for (Index x = 0; x < w; ++x) {
            detail::sincos_embed(static_cast<double>(x), dims.d_w, we.data());
            for (Index k = 0; k < T; ++k) {
                detail::sincos_embed(time_offsets[static_cast<size_t>(k)], dims.d_t, te.data());
                float* dst = pe.values.data() + ((y * w + x) * T + k) * D;
                std::copy_n(te.data(), dims.d_t, dst);
                std::copy_n(he.data(), dims.d_h, dst + dims.d_t);
                std::copy_n(we.data(), dims.d_w, dst + dims.d_t + dims.d_h);
            }
        }
    }
    return pe;
}

// Pure transpose to the decoder's query-major layout [T, D, h, w].
inline Tensor<float> pe3d_to_queries(const PositionalEmbedding3D& pe) {
    const Index D = pe.dims.total();
    Tensor<float> q({pe.t, D, pe.h, pe.w});
    for (Index y = 0; y < pe.h; ++y)
        for (Index x = 0; x < pe.w; ++x)
            for (Index k = 0; k < pe.t; ++k) {
                const float* src = pe.values.data() + ((y * pe.w + x) * pe.t + k) * D;
                for (Index d = 0; d < D; ++d)
                    q[((k * D + d) * pe.h + y) * pe.w + x] = src[d];
            }
    return q;
}

}  // namespace nervdiff
