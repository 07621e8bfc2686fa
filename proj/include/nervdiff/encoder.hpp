#pragma once

#include "nervdiff/nn_ops.hpp"
#include "nervdiff/params.hpp"
#include "nervdiff/video.hpp"

#include <string>
#include <utility>

namespace nervdiff {

struct EncoderConfig {
    Index depth = 4;
    Index heads = 4;
    Index hidden = 128;
    Index num_tokens = 32;  // N dedicated query tokens
    Index token_dim = 32;   // bottleneck width
    PatchShape patch{4, 4, 1};
    ClipGeometry clip{8, 32, 32};

    Index patch_count() const {
        return (clip.height / patch.h) * (clip.width / patch.w) * (clip.frames / patch.t);
    }
    Index patch_dim() const { return patch.h * patch.w * patch.t * 3; }

    static EncoderConfig desk() { return {}; }
    static EncoderConfig paper() {
        EncoderConfig c;
        c.depth = 18;
        c.heads = 14;
        c.hidden = 896;
        c.num_tokens = 128;
        c.token_dim = 128;
        c.patch = {8, 8, 1};
        c.clip = {16, 128, 128};
        return c;
    }
};

template <typename Scalar>
struct GaussianLatent {
    Tensor<Scalar> mean;    // [N, token_dim]
    Tensor<Scalar> logvar;  // clamped to [-30, 20]
};

enum class EncodeMode { train, eval };
enum class ReparamMode { sample, mean };

// ViT-style hypernetwork encoder: patch embeddings plus learned query tokens
// run through pre-LN transformer blocks; only the query outputs are kept,
// batch-normalized along the embedding dimension, then a shared trunk FC
// feeds parallel mean/logvar heads.
template <typename Scalar>
class NervEncoder {
public:
    static constexpr Scalar kLogvarMin = Scalar(-30);
    static constexpr Scalar kLogvarMax = Scalar(20);

    NervEncoder(const EncoderConfig& cfg, ParamStore<Scalar>& store, RngStream& rng,
                const std::string& prefix = "encoder/")
        : cfg_(cfg), store_(&store), prefix_(prefix) {
        if (cfg.hidden % cfg.heads) throw std::invalid_argument("encoder: hidden not divisible by heads");
        const Index H = cfg.hidden;
        auto n = [&](const std::string& s) { return prefix + s; };
        store.create(n("embed.w"), init_normal<Scalar>(rng, {cfg.patch_dim(), H}, 0.02));
        store.create(n("embed.b"), Tensor<Scalar>::zeros({H}));
        store.create(n("pos"), init_normal<Scalar>(rng, {cfg.patch_count(), H}, 0.02));
        store.create(n("queries"), init_normal<Scalar>(rng, {cfg.num_tokens, H}, 0.02));
        for (Index i = 0; i < cfg.depth; ++i) {
            std::string b = "blk" + std::to_string(i) + ".";
            store.create(n(b + "ln1.g"), Tensor<Scalar>::full({H}, Scalar(1)));
            store.create(n(b + "ln1.b"), Tensor<Scalar>::zeros({H}));
            store.create(n(b + "attn.wqkv"), init_normal<Scalar>(rng, {H, 3 * H}, 0.02));
            store.create(n(b + "attn.bqkv"), Tensor<Scalar>::zeros({3 * H}));
            store.create(n(b + "attn.wo"), init_normal<Scalar>(rng, {H, H}, 0.02));
            store.create(n(b + "attn.bo"), Tensor<Scalar>::zeros({H}));
            store.create(n(b + "ln2.g"), Tensor<Scalar>::full({H}, Scalar(1)));
            store.create(n(b + "ln2.b"), Tensor<Scalar>::zeros({H}));
            store.create(n(b + "mlp.w1"), init_normal<Scalar>(rng, {H, 4 * H}, 0.02));
            store.create(n(b + "mlp.b1"), Tensor<Scalar>::zeros({4 * H}));
            store.create(n(b + "mlp.w2"), init_normal<Scalar>(rng, {4 * H, H}, 0.02));
            store.create(n(b + "mlp.b2"), Tensor<Scalar>::zeros({H}));
        }
        store.create(n("ln_f.g"), Tensor<Scalar>::full({H}, Scalar(1)));
        store.create(n("ln_f.b"), Tensor<Scalar>::zeros({H}));
        store.create(n("bn.g"), Tensor<Scalar>::full({H}, Scalar(1)));
        store.create(n("bn.b"), Tensor<Scalar>::zeros({H}));
        store.create(n("bn.running_mean"), Tensor<Scalar>::zeros({H}), false);
        store.create(n("bn.running_var"), Tensor<Scalar>::full({H}, Scalar(1)), false);
        store.create(n("trunk.w"), init_normal<Scalar>(rng, {H, H}, 0.02));
        store.create(n("trunk.b"), Tensor<Scalar>::zeros({H}));
        store.create(n("mean.w"), init_normal<Scalar>(rng, {H, cfg.token_dim}, 0.02));
        store.create(n("mean.b"), Tensor<Scalar>::zeros({cfg.token_dim}));
        store.create(n("logvar.w"), Tensor<Scalar>::zeros({H, cfg.token_dim}));
        store.create(n("logvar.b"), Tensor<Scalar>::zeros({cfg.token_dim}));
    }

    const EncoderConfig& config() const { return cfg_; }

    // Patch content + positional embedding, [P, hidden]. The positional row
    // travels with its patch, so permuting rows permutes positions with them.
    Value<Scalar> embed_patches_t(Graph<Scalar>& g, const VideoClip& clip) const {
        if (clip.geometry() != cfg_.clip)
            throw std::invalid_argument("encode: clip geometry does not match encoder config");
        PatchSequence seq = patchify(clip, cfg_.patch);
        Value<Scalar> patches = g.leaf(seq.patches.template cast<Scalar>());
        Value<Scalar> emb = linear(patches, param(g, "embed.w"), param(g, "embed.b"));
        return add(emb, param(g, "pos"));
    }

    // Transformer over [patch embeddings; query tokens], returning the
    // bottleneck (mean, logvar) pair, each [N, token_dim].
    std::pair<Value<Scalar>, Value<Scalar>> forward_from_embeddings_t(Graph<Scalar>& g,
                                                                      Value<Scalar> patch_emb,
                                                                      EncodeMode mode) const {
        const Index P = patch_emb.dim(0);
        Value<Scalar> x = concat_rows<Scalar>({patch_emb, param(g, "queries")});
        for (Index i = 0; i < cfg_.depth; ++i) {
            std::string b = "blk" + std::to_string(i) + ".";
            Value<Scalar> h = layer_norm(x, param(g, b + "ln1.g"), param(g, b + "ln1.b"));
            h = multihead_self_attention(h, param(g, b + "attn.wqkv"), param(g, b + "attn.bqkv"),
                                         param(g, b + "attn.wo"), param(g, b + "attn.bo"), cfg_.heads);
            x = add(x, h);
            Value<Scalar> m = layer_norm(x, param(g, b + "ln2.g"), param(g, b + "ln2.b"));
            m = linear(m, param(g, b + "mlp.w1"), param(g, b + "mlp.b1"));
            m = gelu_op(m);
            m = linear(m, param(g, b + "mlp.w2"), param(g, b + "mlp.b2"));
            x = add(x, m);
        }
        x = layer_norm(x, param(g, "ln_f.g"), param(g, "ln_f.b"));
        Value<Scalar> queries_out = slice_rows(x, P, cfg_.num_tokens);

        BatchNormState<Scalar> bn{&store_->at(prefix_ + "bn.running_mean").value,
                                  &store_->at(prefix_ + "bn.running_var").value};
        Value<Scalar> normed = batch_norm_cols(queries_out, param(g, "bn.g"), param(g, "bn.b"), &bn,
                                               mode == EncodeMode::train);
        Value<Scalar> trunk = gelu_op(linear(normed, param(g, "trunk.w"), param(g, "trunk.b")));
        Value<Scalar> mean = linear(trunk, param(g, "mean.w"), param(g, "mean.b"));
        Value<Scalar> logvar =
            clamp_op(linear(trunk, param(g, "logvar.w"), param(g, "logvar.b")), kLogvarMin, kLogvarMax);
        return {mean, logvar};
    }

    std::pair<Value<Scalar>, Value<Scalar>> forward_t(Graph<Scalar>& g, const VideoClip& clip,
                                                      EncodeMode mode) const {
        return forward_from_embeddings_t(g, embed_patches_t(g, clip), mode);
    }

    GaussianLatent<Scalar> encode(const VideoClip& clip, EncodeMode mode = EncodeMode::eval) const {
        Graph<Scalar> g;
        auto [mean, logvar] = forward_t(g, clip, mode);
        return {mean.tensor(), logvar.tensor()};
    }

    static Tensor<Scalar> reparameterize(const GaussianLatent<Scalar>& latent, uint64_t noise_seed,
                                         ReparamMode mode) {
        if (mode == ReparamMode::mean) return latent.mean;
        RngStream rng(noise_seed);
        Tensor<Scalar> out(latent.mean.shape());
        for (Index i = 0; i < out.size(); ++i)
            out[i] = latent.mean[i] +
                     std::exp(Scalar(0.5) * latent.logvar[i]) * static_cast<Scalar>(rng.normal());
        return out;
    }

private:
    Value<Scalar> param(Graph<Scalar>& g, const std::string& name) const {
        return use(g, store_->at(prefix_ + name));
    }

    EncoderConfig cfg_;
    ParamStore<Scalar>* store_;
    std::string prefix_;
};

}  // namespace nervdiff
