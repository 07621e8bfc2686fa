#pragma once

#include "nervdiff/nn_ops.hpp"
#include "nervdiff/params.hpp"
#include "nervdiff/video.hpp"

#include <functional>
#include <string>
#include <vector>

namespace nervdiff {

struct DiscriminatorConfig {
    Index blocks = 3;       // paper preset: 5
    Index unit = 16;        // paper preset: 64
    Index mult = 2;         // channel multiplier per block
    Index max_ch = 256;
    Index cadence = 5;      // update every N generator steps
    double lr_ratio = 0.2;  // fraction of the autoencoder learning rate
    ClipGeometry clip{8, 32, 32};

    static DiscriminatorConfig desk() { return {}; }
    static DiscriminatorConfig paper() {
        DiscriminatorConfig c;
        c.blocks = 5;
        c.unit = 64;
        c.clip = {16, 128, 128};
        return c;
    }
};

// Spatiotemporal convolutional discriminator: 3-d conv blocks downsample the
// clip to a scalar logit.
template <typename Scalar>
class Discriminator {
public:
    Discriminator(const DiscriminatorConfig& cfg, ParamStore<Scalar>& store, RngStream& rng,
                  const std::string& prefix = "disc/")
        : cfg_(cfg), store_(&store), prefix_(prefix) {
        if (cfg.cadence < 1) throw std::invalid_argument("discriminator: cadence must be >= 1");
        Index t = cfg.clip.frames, h = cfg.clip.height, w = cfg.clip.width;
        Index in_ch = 3;
        for (Index b = 0; b < cfg.blocks; ++b) {
            Index out_ch = std::min(cfg.unit * static_cast<Index>(std::pow(double(cfg.mult), double(b))),
                                    cfg.max_ch);
            std::string name = prefix + "b" + std::to_string(b);
            store.create(name + ".w", init_kaiming_conv<Scalar>(rng, {out_ch, in_ch, 3, 3, 3}));
            store.create(name + ".b", Tensor<Scalar>::zeros({out_ch}));
            strides_.push_back({t > 1 ? 2 : 1, 2, 2});
            t = (t > 1) ? (t + 1) / 2 : 1;
            h = (h + 1) / 2;
            w = (w + 1) / 2;
            in_ch = out_ch;
        }
        flat_dim_ = in_ch * t * h * w;
        store.create(prefix + "head.w", init_normal<Scalar>(rng, {flat_dim_, 1}, 0.02));
        store.create(prefix + "head.b", Tensor<Scalar>::zeros({1}));
    }

    const DiscriminatorConfig& config() const { return cfg_; }

    // clip value laid out [T, 3, H, W]; returns a [1,1] logit
    Value<Scalar> discriminate_t(Graph<Scalar>& g, Value<Scalar> clip_tchw, bool frozen = false) const {
        if (clip_tchw.dim(0) != cfg_.clip.frames || clip_tchw.dim(2) != cfg_.clip.height ||
            clip_tchw.dim(3) != cfg_.clip.width)
            throw std::invalid_argument("discriminate: clip geometry mismatch");
        Value<Scalar> x = reshape(swap_axes01(clip_tchw),
                                  {1, 3, cfg_.clip.frames, cfg_.clip.height, cfg_.clip.width});
        for (Index b = 0; b < cfg_.blocks; ++b) {
            std::string name = "b" + std::to_string(b);
            x = conv3d(x, param(g, name + ".w", frozen), param(g, name + ".b", frozen),
                       strides_[static_cast<size_t>(b)], {1, 1, 1});
            x = leaky_relu_op(x, Scalar(0.2));
        }
        x = reshape(x, {1, flat_dim_});
        return linear(x, param(g, "head.w", frozen), param(g, "head.b", frozen));
    }

    Scalar discriminate(const Tensor<Scalar>& clip_tchw) const {
        Graph<Scalar> g;
        if (!clip_tchw.all_finite()) throw std::invalid_argument("discriminate: non-finite input");
        return discriminate_t(g, g.leaf(clip_tchw), true).tensor()[0];
    }

private:
    Value<Scalar> param(Graph<Scalar>& g, const std::string& name, bool frozen) const {
        Param<Scalar>& p = store_->at(prefix_ + name);
        return frozen ? use_frozen(g, p) : use(g, p);
    }

    DiscriminatorConfig cfg_;
    ParamStore<Scalar>* store_;
    std::string prefix_;
    std::vector<std::array<Index, 3>> strides_;
    Index flat_dim_ = 0;
};

// Non-saturating logistic losses. The generator loss sees frozen
// discriminator weights so gradients reach it only through the fake clip;
// the discriminator loss sees a detached fake.
template <typename Scalar>
Value<Scalar> generator_gan_loss_t(Graph<Scalar>& g, const Discriminator<Scalar>& disc,
                                   Value<Scalar> fake_tchw) {
    return mean_all(softplus_op(scale(disc.discriminate_t(g, fake_tchw, true), Scalar(-1))));
}

template <typename Scalar>
Value<Scalar> discriminator_gan_loss_t(Graph<Scalar>& g, const Discriminator<Scalar>& disc,
                                       Value<Scalar> real_tchw, Value<Scalar> fake_tchw_detached) {
    Value<Scalar> on_real = softplus_op(scale(disc.discriminate_t(g, real_tchw, false), Scalar(-1)));
    Value<Scalar> on_fake = softplus_op(disc.discriminate_t(g, fake_tchw_detached, false));
    return scale(add(mean_all(on_real), mean_all(on_fake)), Scalar(0.5));
}

// Convenience scalar form matching gan_losses(real, fake).
template <typename Scalar>
std::pair<double, double> gan_losses(const Discriminator<Scalar>& disc, const Tensor<Scalar>& real_tchw,
                                     const Tensor<Scalar>& fake_tchw) {
    Graph<Scalar> g;
    Value<Scalar> gen = generator_gan_loss_t(g, disc, g.leaf(fake_tchw));
    Value<Scalar> dl = discriminator_gan_loss_t(g, disc, g.leaf(real_tchw), g.leaf(fake_tchw));
    return {static_cast<double>(gen.tensor()[0]), static_cast<double>(dl.tensor()[0])};
}

// Pluggable perceptual feature interface: maps frames [T,3,H,W] to a list of
// feature tensors.
template <typename Scalar>
using FeatureExtractor = std::function<std::vector<Value<Scalar>>(Graph<Scalar>&, Value<Scalar>)>;

// Frozen random multi-scale conv stack; a stand-in for a pretrained
// perceptual network at desk scale.
template <typename Scalar>
class RandomFeatureExtractor {
public:
    explicit RandomFeatureExtractor(uint64_t seed = 7001, Index ch0 = 8, Index scales = 2) {
        RngStream rng(seed);
        Index in = 3;
        Index ch = ch0;
        for (Index s = 0; s < scales; ++s) {
            weights_.push_back(init_kaiming_conv<Scalar>(rng, {ch, in, 3, 3}));
            biases_.push_back(Tensor<Scalar>::zeros({ch}));
            in = ch;
            ch *= 2;
        }
    }

    std::vector<Value<Scalar>> operator()(Graph<Scalar>& g, Value<Scalar> frames_tchw) const {
        std::vector<Value<Scalar>> feats;
        Value<Scalar> x = frames_tchw;
        for (size_t s = 0; s < weights_.size(); ++s) {
            x = leaky_relu_op(conv2d(x, g.leaf(weights_[s]), g.leaf(biases_[s]), 2, 1), Scalar(0.2));
            feats.push_back(x);
        }
        return feats;
    }

private:
    std::vector<Tensor<Scalar>> weights_;
    std::vector<Tensor<Scalar>> biases_;
};

// Mean squared feature distance, averaged over scales (and over frames via
// the batch dimension).
template <typename Scalar>
Value<Scalar> perceptual_loss_t(Graph<Scalar>& g, const FeatureExtractor<Scalar>& extractor,
                                Value<Scalar> x_tchw, Value<Scalar> y_tchw) {
    auto fx = extractor(g, x_tchw);
    auto fy = extractor(g, y_tchw);
    Value<Scalar> acc = mse(fx[0], fy[0]);
    for (size_t s = 1; s < fx.size(); ++s) acc = add(acc, mse(fx[s], fy[s]));
    return scale(acc, Scalar(1) / static_cast<Scalar>(fx.size()));
}

template <typename Scalar>
double perceptual_loss(const FeatureExtractor<Scalar>& extractor, const Tensor<Scalar>& x_tchw,
                       const Tensor<Scalar>& y_tchw) {
    Graph<Scalar> g;
    return static_cast<double>(perceptual_loss_t(g, extractor, g.leaf(x_tchw), g.leaf(y_tchw)).tensor()[0]);
}

}  // namespace nervdiff
