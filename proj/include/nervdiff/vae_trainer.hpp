#pragma once

#include "nervdiff/adversarial.hpp"
#include "nervdiff/checkpoint.hpp"
#include "nervdiff/encoder.hpp"
#include "nervdiff/nerv.hpp"

#include <string>
#include <vector>

namespace nervdiff {

struct VaeTrainHyper {
    double lr = 1e-3;
    long total_steps = 3000;
    double warmup_frac = 0.01;
    double weight_decay = 0.0;
    double kl_weight = 1e-3;
    double perc_weight = 0.1;
    double gan_weight = 0.05;
    long gan_warmup = 1000;  // generator sees the GAN term after this step
};

struct VaeStepInfo {
    double loss = 0.0;
    double rec_mse = 0.0;
    double kl_per_elem = 0.0;
    double perc = 0.0;
    double gan = 0.0;
    bool disc_updated = false;
    double disc_loss = 0.0;
};

// Reconstruction + perceptual + adversarial + KL objective over the
// hypernetwork autoencoder. Generator parameters (encoder, affine heads,
// shared decoder weights) live in one store; the discriminator in another,
// stepped at its cadence with a reduced learning rate.
template <typename Scalar>
class VaeTrainer {
public:
    VaeTrainer(NervEncoder<Scalar>& encoder, NervDecoder<Scalar>& decoder, Discriminator<Scalar>& disc,
               FeatureExtractor<Scalar> perceptual, ParamStore<Scalar>& gen_store,
               ParamStore<Scalar>& disc_store, const VaeTrainHyper& hyper, uint64_t seed)
        : enc_(&encoder), dec_(&decoder), disc_(&disc), perceptual_(std::move(perceptual)),
          gen_store_(&gen_store), disc_store_(&disc_store), hyper_(hyper),
          rng_(RngStream(seed).fork(0xae)),
          opt_gen_(Scalar(0.9), Scalar(0.999), Scalar(1e-8), static_cast<Scalar>(hyper.weight_decay)),
          opt_disc_(Scalar(0.9), Scalar(0.999), Scalar(1e-8), Scalar(0)) {}

    long step_count() const { return step_; }

    VaeStepInfo step(const VideoClip& clip) {
        VaeStepInfo info;
        const Index T = clip.frames();
        std::vector<double> times;
        for (Index k = 0; k < T; ++k) times.push_back(static_cast<double>(k));
        Tensor<Scalar> target = clip_to_chw(clip.pixels).template cast<Scalar>();
        Tensor<Scalar> fake_value;  // detached copy for the discriminator pass
        const bool gan_active = hyper_.gan_weight > 0.0 && step_ >= hyper_.gan_warmup;

        {
            Graph<Scalar> g;
            auto [mean, logvar] = enc_->forward_t(g, clip, EncodeMode::train);
            Value<Scalar> kl = kl_term_t(mean, logvar);
            Tensor<Scalar> eps = rng_.normal_tensor<Scalar>(mean.tensor().shape());
            Value<Scalar> z = add(mean, mul(exp_op(scale(logvar, Scalar(0.5))), g.leaf(eps)));
            Value<Scalar> frames = dec_->decode_t(g, dec_->instantiate_t(g, z), times);
            Value<Scalar> x = g.leaf(target);
            Value<Scalar> rec = mse(frames, x);
            Value<Scalar> loss = add(rec, scale(kl, static_cast<Scalar>(hyper_.kl_weight)));
            Value<Scalar> perc;
            if (hyper_.perc_weight > 0.0) {
                perc = perceptual_loss_t(g, perceptual_, frames, x);
                loss = add(loss, scale(perc, static_cast<Scalar>(hyper_.perc_weight)));
            }
            Value<Scalar> gan;
            if (gan_active) {
                gan = generator_gan_loss_t(g, *disc_, frames);
                loss = add(loss, scale(gan, static_cast<Scalar>(hyper_.gan_weight)));
            }
            info.loss = static_cast<double>(loss.tensor()[0]);
            info.rec_mse = static_cast<double>(rec.tensor()[0]);
            info.kl_per_elem = static_cast<double>(kl.tensor()[0]);
            if (perc.valid()) info.perc = static_cast<double>(perc.tensor()[0]);
            if (gan.valid()) info.gan = static_cast<double>(gan.tensor()[0]);
            if (!std::isfinite(info.loss))
                throw NumericalError("vae step: non-finite loss at step " + std::to_string(step_));
            g.backward(loss);
            opt_gen_.step(*gen_store_, static_cast<Scalar>(lr_at(step_, hyper_.total_steps, hyper_.lr,
                                                                 hyper_.warmup_frac)));
            fake_value = frames.tensor();
        }

        if (gan_active && step_ % disc_->config().cadence == 0) {
            Graph<Scalar> g;
            Value<Scalar> dl =
                discriminator_gan_loss_t(g, *disc_, g.leaf(target), g.leaf(fake_value));
            info.disc_loss = static_cast<double>(dl.tensor()[0]);
            if (!std::isfinite(info.disc_loss))
                throw NumericalError("disc step: non-finite loss at step " + std::to_string(step_));
            g.backward(dl);
            opt_disc_.step(*disc_store_,
                           static_cast<Scalar>(lr_at(step_, hyper_.total_steps, hyper_.lr,
                                                     hyper_.warmup_frac) *
                                               disc_->config().lr_ratio));
            info.disc_updated = true;
        }
        ++step_;
        return info;
    }

    // Eval-mode reconstruction: running batch-norm statistics, mean-mode latent.
    Tensor<Scalar> reconstruct_eval(const VideoClip& clip) const {
        GaussianLatent<Scalar> latent = enc_->encode(clip, EncodeMode::eval);
        std::vector<double> times;
        for (Index k = 0; k < clip.frames(); ++k) times.push_back(static_cast<double>(k));
        return dec_->decode_tokens(latent.mean, times);
    }

    double eval_psnr(const std::vector<VideoClip>& corpus) const {
        double acc = 0.0;
        for (const auto& clip : corpus) {
            Tensor<Scalar> rec = reconstruct_eval(clip);
            acc += psnr_db(rec, clip_to_chw(clip.pixels).template cast<Scalar>());
        }
        return acc / static_cast<double>(corpus.size());
    }

    double eval_kl_per_elem(const std::vector<VideoClip>& corpus) const {
        double acc = 0.0;
        for (const auto& clip : corpus) {
            GaussianLatent<Scalar> latent = enc_->encode(clip, EncodeMode::eval);
            acc += kl_to_standard_normal(latent.mean, latent.logvar);
        }
        return acc / static_cast<double>(corpus.size());
    }

    void save_state(CheckpointContainer& c, const std::string& prefix = "state/vae/") const {
        c.add(prefix + "step", Tensor<float>::full({1}, static_cast<float>(step_)));
        c.add_blob(prefix + "rng", rng_.serialize());
        c.add(prefix + "adam_t", Tensor<float>::full({1}, static_cast<float>(opt_gen_.step_count())));
        c.add(prefix + "adam_disc_t", Tensor<float>::full({1}, static_cast<float>(opt_disc_.step_count())));
    }
    void load_state(const CheckpointContainer& c, const std::string& prefix = "state/vae/") {
        step_ = static_cast<long>(c.get(prefix + "step")[0]);
        rng_ = RngStream::deserialize(c.get_blob(prefix + "rng"));
        opt_gen_.set_step_count(static_cast<long>(c.get(prefix + "adam_t")[0]));
        opt_disc_.set_step_count(static_cast<long>(c.get(prefix + "adam_disc_t")[0]));
    }

private:
    // 0.5 * mean(mu^2 + e^lv - 1 - lv) on the tape
    Value<Scalar> kl_term_t(Value<Scalar> mean, Value<Scalar> logvar) const {
        Graph<Scalar>& g = *mean.g;
        Value<Scalar> one = g.leaf(Tensor<Scalar>::full(mean.tensor().shape(), Scalar(1)));
        Value<Scalar> term = sub(add(mul(mean, mean), exp_op(logvar)), add(one, logvar));
        return scale(mean_all(term), Scalar(0.5));
    }

    NervEncoder<Scalar>* enc_;
    NervDecoder<Scalar>* dec_;
    Discriminator<Scalar>* disc_;
    FeatureExtractor<Scalar> perceptual_;
    ParamStore<Scalar>* gen_store_;
    ParamStore<Scalar>* disc_store_;
    VaeTrainHyper hyper_;
    RngStream rng_;
    AdamW<Scalar> opt_gen_;
    AdamW<Scalar> opt_disc_;
    long step_ = 0;
};

}  // namespace nervdiff
