#pragma once

#include "nervdiff/checkpoint.hpp"
#include "nervdiff/dit.hpp"
#include "nervdiff/encoder.hpp"
#include "nervdiff/sched_math.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace nervdiff {

// theta_t = alpha_t * theta_0 + sigma_t * eps
template <typename Scalar>
Tensor<Scalar> q_sample(const DiffusionSchedule& sch, const Tensor<Scalar>& theta0, Index t,
                        const Tensor<Scalar>& noise) {
    if (!same_shape(theta0.shape(), noise.shape()))
        throw std::invalid_argument("q_sample: shape mismatch");
    Scalar a = static_cast<Scalar>(sch.alpha_at(t));
    Scalar s = static_cast<Scalar>(sch.sigma_at(t));
    Tensor<Scalar> out(theta0.shape());
    out.array() = a * theta0.array() + s * noise.array();
    return out;
}

// DDPM posterior q(x_{t-1} | x_t, x_0) coefficients; sigma is 0 at t=1.
struct PosteriorCoef {
    double mean_x0, mean_xt, sigma;
};

inline PosteriorCoef posterior_coef(const DiffusionSchedule& sch, Index t) {
    double abar_t = sch.alpha_sq(t);
    double abar_prev = sch.alpha_sq(t - 1);
    double beta_t = 1.0 - abar_t / abar_prev;
    double denom = 1.0 - abar_t;
    PosteriorCoef c;
    c.mean_x0 = std::sqrt(abar_prev) * beta_t / denom;
    c.mean_xt = std::sqrt(1.0 - beta_t) * (1.0 - abar_prev) / denom;
    c.sigma = std::sqrt(std::max(0.0, (1.0 - abar_prev) / denom * beta_t));
    return c;
}

template <typename Scalar>
Tensor<Scalar> predict_x0_from_eps(const DiffusionSchedule& sch, const Tensor<Scalar>& x_t, Index t,
                                   const Tensor<Scalar>& eps) {
    Scalar a = static_cast<Scalar>(sch.alpha_at(t));
    Scalar s = static_cast<Scalar>(sch.sigma_at(t));
    Tensor<Scalar> out(x_t.shape());
    out.array() = (x_t.array() - s * eps.array()) / a;
    return out;
}

// Ancestral DDPM reverse chain. The denoiser maps (x_t, t) to predicted
// noise; CFG combination happens inside the caller-supplied denoiser.
template <typename Scalar>
using DenoiserFn = std::function<Tensor<Scalar>(const Tensor<Scalar>&, Index)>;

template <typename Scalar>
Tensor<Scalar> ancestral_sample(const DiffusionSchedule& sch, const DenoiserFn<Scalar>& denoiser,
                                Shape shape, RngStream& rng, double divergence_guard = 1e3) {
    Tensor<Scalar> x = rng.normal_tensor<Scalar>(shape);
    for (Index t = sch.num_steps; t >= 1; --t) {
        Tensor<Scalar> eps = denoiser(x, t);
        Tensor<Scalar> x0 = predict_x0_from_eps(sch, x, t, eps);
        PosteriorCoef c = posterior_coef(sch, t);
        if (t > 1) {
            Tensor<Scalar> z = rng.normal_tensor<Scalar>(shape);
            x.array() = static_cast<Scalar>(c.mean_x0) * x0.array() +
                        static_cast<Scalar>(c.mean_xt) * x.array() +
                        static_cast<Scalar>(c.sigma) * z.array();
        } else {
            x.array() = static_cast<Scalar>(c.mean_x0) * x0.array() +
                        static_cast<Scalar>(c.mean_xt) * x.array();
        }
        if (static_cast<double>(max_abs(x)) > divergence_guard)
            throw NumericalError("ancestral_sample: token magnitude exceeded divergence guard at t=" +
                                 std::to_string(t));
    }
    return x;
}

// ---------------------------------------------------------------------------
// latent dataset extraction (stage handoff)

template <typename Scalar>
struct LatentRecord {
    Tensor<Scalar> tokens;  // [N, token_dim], mean-mode eval latents
    int label = -1;
    std::string source_id;
};

template <typename Scalar>
std::vector<LatentRecord<Scalar>> extract_latent_dataset(const std::vector<VideoClip>& corpus,
                                                         const NervEncoder<Scalar>& encoder) {
    std::vector<LatentRecord<Scalar>> out;
    out.reserve(corpus.size());
    for (const auto& clip : corpus) {
        LatentRecord<Scalar> rec;
        rec.tokens = encoder.encode(clip, EncodeMode::eval).mean;
        rec.label = clip.class_id.value_or(-1);
        rec.source_id = clip.source_id;
        out.push_back(std::move(rec));
    }
    return out;
}

inline void save_latent_cache(const std::string& path, const std::vector<LatentRecord<float>>& records) {
    CheckpointContainer c;
    for (const auto& r : records) {
        c.add("latent/" + r.source_id, r.tokens);
        c.add("label/" + r.source_id, Tensor<float>::full({1}, static_cast<float>(r.label)));
    }
    c.save(path);
}

inline std::vector<LatentRecord<float>> load_latent_cache(const std::string& path) {
    CheckpointContainer c = CheckpointContainer::load(path);
    std::vector<LatentRecord<float>> out;
    for (const auto& name : c.names()) {
        if (name.rfind("latent/", 0) != 0) continue;
        LatentRecord<float> rec;
        rec.source_id = name.substr(7);
        rec.tokens = c.get(name);
        rec.label = static_cast<int>(c.get("label/" + rec.source_id)[0]);
        out.push_back(std::move(rec));
    }
    return out;
}

// ---------------------------------------------------------------------------
// diffusion training

struct DiTTrainHyper {
    Index sched_steps = 1000;
    ScheduleKind sched_kind = ScheduleKind::linear_beta;
    double min_snr_gamma = 5.0;
    double p_ss = 0.5;          // scheduled-sampling probability
    double cond_dropout = 0.1;  // null-condition probability (CFG training)
    double lr = 1e-3;
    long total_steps = 5000;
    double warmup_frac = 0.01;
    double weight_decay = 0.0;
    Index batch = 8;
};

template <typename Scalar>
struct DiTExample {
    Tensor<Scalar> theta0;
    DiTCondition<Scalar> cond;
};

// One item of training batch telemetry.
struct DiTStepInfo {
    double loss = 0.0;
    long null_count = 0;    // items routed through the null condition
    long second_pass = 0;   // items that executed the scheduled-sampling pass
};

template <typename Scalar>
class DiTTrainer {
public:
    DiTTrainer(DiT<Scalar>& model, ParamStore<Scalar>& store, const DiTTrainHyper& hyper, uint64_t seed)
        : model_(&model), store_(&store), hyper_(hyper), rng_(RngStream(seed).fork(0xd17)),
          opt_(Scalar(0.9), Scalar(0.999), Scalar(1e-8), static_cast<Scalar>(hyper.weight_decay)),
          sched_(build_schedule(hyper.sched_steps, hyper.sched_kind)) {}

    const DiffusionSchedule& schedule() const { return sched_; }
    long step_count() const { return step_; }
    double p_ss() const { return hyper_.p_ss; }

    // Optional noise injection for the scheduled-sampling second pass.
    struct SecondPass {
        Tensor<Scalar> posterior_noise;
    };

    using DenoiseGraphFn = std::function<Value<Scalar>(Graph<Scalar>&, Value<Scalar>, Index,
                                                       const DiTCondition<Scalar>&)>;

    // Loss for one item at a fixed draw; the public training_step samples the
    // draws. Exposed so exactness tests can pin (t, eps, second pass) and
    // substitute oracle denoisers.
    Value<Scalar> item_loss_t(Graph<Scalar>& g, const Tensor<Scalar>& theta0,
                              const DiTCondition<Scalar>& cond, Index t, const Tensor<Scalar>& eps,
                              const std::optional<SecondPass>& ss,
                              const DenoiseGraphFn& denoise_override = nullptr) const {
        auto denoise = denoise_override
                           ? denoise_override
                           : [this](Graph<Scalar>& gg, Value<Scalar> x, Index tt,
                                    const DiTCondition<Scalar>& cc) {
                                 return model_->denoise_t(gg, x, tt, cc, false);
                             };
        Tensor<Scalar> theta_t = q_sample(sched_, theta0, t, eps);
        Value<Scalar> eps_hat = denoise(g, g.leaf(theta_t), t, cond);
        Scalar w1 = static_cast<Scalar>(
            min_snr_weight(sched_, t, hyper_.min_snr_gamma, PredictionTarget::epsilon));
        Value<Scalar> loss = scale(mse(eps_hat, g.leaf(eps)), w1);
        if (ss && t > 1) {
            // model prediction (detached) drives the stochastic posterior step
            Tensor<Scalar> x0_hat = predict_x0_from_eps(sched_, theta_t, t, eps_hat.tensor());
            PosteriorCoef c = posterior_coef(sched_, t);
            Tensor<Scalar> theta_prev(theta_t.shape());
            theta_prev.array() = static_cast<Scalar>(c.mean_x0) * x0_hat.array() +
                                 static_cast<Scalar>(c.mean_xt) * theta_t.array() +
                                 static_cast<Scalar>(c.sigma) * ss->posterior_noise.array();
            // the epsilon target consistent with theta_prev under q(.|theta0)
            Scalar a_prev = static_cast<Scalar>(sched_.alpha_at(t - 1));
            Scalar s_prev = static_cast<Scalar>(sched_.sigma_at(t - 1));
            Tensor<Scalar> eps_eff(theta_prev.shape());
            eps_eff.array() = (theta_prev.array() - a_prev * theta0.array()) / s_prev;
            Value<Scalar> eps_hat2 = denoise(g, g.leaf(theta_prev), t - 1, cond);
            Scalar w2 = static_cast<Scalar>(
                min_snr_weight(sched_, t - 1, hyper_.min_snr_gamma, PredictionTarget::epsilon));
            Value<Scalar> loss2 = scale(mse(eps_hat2, g.leaf(eps_eff)), w2);
            loss = scale(add(loss, loss2), Scalar(0.5));
        }
        return loss;
    }

    // One optimizer update over a batch; timesteps, noise, condition dropout
    // and the scheduled-sampling decision are drawn per item.
    DiTStepInfo training_step(const std::vector<DiTExample<Scalar>>& batch) {
        if (batch.empty()) throw std::invalid_argument("training_step: empty batch");
        Graph<Scalar> g;
        Value<Scalar> total;
        DiTStepInfo info;
        for (size_t i = 0; i < batch.size(); ++i) {
            Index t = 1 + static_cast<Index>(rng_.uniform_int(static_cast<int>(sched_.num_steps)));
            Tensor<Scalar> eps = rng_.normal_tensor<Scalar>(batch[i].theta0.shape());
            bool drop = rng_.bernoulli(hyper_.cond_dropout);
            bool use_ss = hyper_.p_ss > 0.0 && rng_.bernoulli(hyper_.p_ss);
            std::optional<SecondPass> ss;
            if (use_ss && t > 1) {
                ss = SecondPass{rng_.normal_tensor<Scalar>(batch[i].theta0.shape())};
                info.second_pass++;
            }
            DiTCondition<Scalar> cond = drop ? DiTCondition<Scalar>::null() : batch[i].cond;
            if (drop) info.null_count++;
            Value<Scalar> item = item_loss_t(g, batch[i].theta0, cond, t, eps, ss);
            total = (i == 0) ? item : add(total, item);
        }
        Value<Scalar> loss = scale(total, Scalar(1) / static_cast<Scalar>(batch.size()));
        double lv = static_cast<double>(loss.tensor()[0]);
        if (!std::isfinite(lv))
            throw NumericalError("dit training_step: non-finite loss at step " + std::to_string(step_));
        g.backward(loss);
        opt_.step(*store_, static_cast<Scalar>(lr_at(step_, hyper_.total_steps, hyper_.lr,
                                                     hyper_.warmup_frac)));
        ++step_;
        info.loss = lv;
        return info;
    }

    // state persistence ------------------------------------------------

    void save_state(CheckpointContainer& c, const std::string& prefix = "state/dit/") const {
        c.add(prefix + "step", Tensor<float>::full({1}, static_cast<float>(step_)));
        c.add(prefix + "p_ss", Tensor<float>::full({1}, static_cast<float>(hyper_.p_ss)));
        c.add_blob(prefix + "rng", rng_.serialize());
        c.add(prefix + "adam_t", Tensor<float>::full({1}, static_cast<float>(opt_.step_count())));
    }
    void load_state(const CheckpointContainer& c, const std::string& prefix = "state/dit/") {
        step_ = static_cast<long>(c.get(prefix + "step")[0]);
        hyper_.p_ss = static_cast<double>(c.get(prefix + "p_ss")[0]);
        rng_ = RngStream::deserialize(c.get_blob(prefix + "rng"));
        opt_.set_step_count(static_cast<long>(c.get(prefix + "adam_t")[0]));
    }

private:
    DiT<Scalar>* model_;
    ParamStore<Scalar>* store_;
    DiTTrainHyper hyper_;
    RngStream rng_;
    AdamW<Scalar> opt_;
    DiffusionSchedule sched_;
    long step_ = 0;
};

}  // namespace nervdiff
