#pragma once

#include "nervdiff/encoder.hpp"
#include "nervdiff/nn_ops.hpp"
#include "nervdiff/params.hpp"

#include <optional>
#include <string>

namespace nervdiff {

enum class CondMode { class_label, frame_tokens, unconditional };

struct DiTConfig {
    Index depth = 6;
    Index heads = 4;
    Index hidden = 128;
    Index num_tokens = 32;  // N, from the encoder
    Index token_dim = 32;
    int num_classes = 8;
    CondMode mode = CondMode::class_label;

    Index seq_len() const { return mode == CondMode::frame_tokens ? 2 * num_tokens : num_tokens; }

    static DiTConfig desk() { return {}; }
    static DiTConfig paper() {  // DiT-L
        DiTConfig c;
        c.depth = 24;
        c.heads = 16;
        c.hidden = 1024;
        c.num_tokens = 128;
        c.token_dim = 128;
        c.num_classes = 101;
        return c;
    }
};

// Condition for one denoise call. Exactly one of the members applies given
// the configured mode; is_null selects the learned null embedding (CFG).
template <typename Scalar>
struct DiTCondition {
    std::optional<int> class_id;
    const Tensor<Scalar>* frame_tokens = nullptr;  // [N, token_dim]
    bool is_null = false;

    static DiTCondition null() {
        DiTCondition c;
        c.is_null = true;
        return c;
    }
    static DiTCondition of_class(int id) {
        DiTCondition c;
        c.class_id = id;
        return c;
    }
    static DiTCondition of_frames(const Tensor<Scalar>& tokens) {
        DiTCondition c;
        c.frame_tokens = &tokens;
        return c;
    }
};

namespace detail {

// standard transformer timestep embedding
template <typename Scalar>
Tensor<Scalar> timestep_embedding(double t, Index dim) {
    Tensor<Scalar> out({1, dim});
    Index half = dim / 2;
    for (Index j = 0; j < half; ++j) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(half));
        out[j] = static_cast<Scalar>(std::cos(t * freq));
        out[half + j] = static_cast<Scalar>(std::sin(t * freq));
    }
    return out;
}

}  // namespace detail

// Token-space denoising transformer with adaptive layer-norm conditioning.
// The token sequence is the only axis; no attention runs across a time axis.
template <typename Scalar>
class DiT {
public:
    DiT(const DiTConfig& cfg, ParamStore<Scalar>& store, RngStream& rng,
        const std::string& prefix = "dit/")
        : cfg_(cfg), store_(&store), prefix_(prefix) {
        if (cfg.hidden % cfg.heads) throw std::invalid_argument("dit: hidden not divisible by heads");
        const Index H = cfg.hidden;
        auto n = [&](const std::string& s) { return prefix + s; };
        store.create(n("embed.w"), init_normal<Scalar>(rng, {cfg.token_dim, H}, 0.02));
        store.create(n("embed.b"), Tensor<Scalar>::zeros({H}));
        store.create(n("pos"), init_normal<Scalar>(rng, {cfg.seq_len(), H}, 0.02));
        store.create(n("tmlp.w1"), init_normal<Scalar>(rng, {H, H}, 0.02));
        store.create(n("tmlp.b1"), Tensor<Scalar>::zeros({H}));
        store.create(n("tmlp.w2"), init_normal<Scalar>(rng, {H, H}, 0.02));
        store.create(n("tmlp.b2"), Tensor<Scalar>::zeros({H}));
        if (cfg.mode == CondMode::class_label) {
            store.create(n("class_emb"),
                         init_normal<Scalar>(rng, {static_cast<Index>(cfg.num_classes) + 1, H}, 0.02));
        } else if (cfg.mode == CondMode::frame_tokens) {
            store.create(n("null_token"), init_normal<Scalar>(rng, {1, cfg.token_dim}, 0.02));
        }
        for (Index i = 0; i < cfg.depth; ++i) {
            std::string b = "blk" + std::to_string(i) + ".";
            store.create(n(b + "adaln.w"), Tensor<Scalar>::zeros({H, 6 * H}));  // adaLN-zero
            store.create(n(b + "adaln.b"), Tensor<Scalar>::zeros({6 * H}));
            store.create(n(b + "attn.wqkv"), init_normal<Scalar>(rng, {H, 3 * H}, 0.02));
            store.create(n(b + "attn.bqkv"), Tensor<Scalar>::zeros({3 * H}));
            store.create(n(b + "attn.wo"), init_normal<Scalar>(rng, {H, H}, 0.02));
            store.create(n(b + "attn.bo"), Tensor<Scalar>::zeros({H}));
            store.create(n(b + "mlp.w1"), init_normal<Scalar>(rng, {H, 4 * H}, 0.02));
            store.create(n(b + "mlp.b1"), Tensor<Scalar>::zeros({4 * H}));
            store.create(n(b + "mlp.w2"), init_normal<Scalar>(rng, {4 * H, H}, 0.02));
            store.create(n(b + "mlp.b2"), Tensor<Scalar>::zeros({H}));
        }
        store.create(n("final.adaln.w"), Tensor<Scalar>::zeros({H, 2 * H}));
        store.create(n("final.adaln.b"), Tensor<Scalar>::zeros({2 * H}));
        store.create(n("head.w"), Tensor<Scalar>::zeros({H, cfg.token_dim}));
        store.create(n("head.b"), Tensor<Scalar>::zeros({cfg.token_dim}));
    }

    const DiTConfig& config() const { return cfg_; }

    Value<Scalar> denoise_t(Graph<Scalar>& g, Value<Scalar> noisy_tokens, Index t,
                            const DiTCondition<Scalar>& cond, bool frozen = false) const {
        const Index H = cfg_.hidden, N = cfg_.num_tokens;
        Value<Scalar> c = condition_vector_t(g, t, cond, frozen);

        Value<Scalar> x = linear(noisy_tokens, param(g, "embed.w", frozen), param(g, "embed.b", frozen));
        if (cfg_.mode == CondMode::frame_tokens) {
            Value<Scalar> ct;
            if (cond.is_null) {
                ct = tile_rows(param(g, "null_token", frozen), N);
            } else {
                if (!cond.frame_tokens)
                    throw std::invalid_argument("denoise: frame_tokens condition required");
                Value<Scalar> raw = g.leaf(*cond.frame_tokens);
                ct = raw;
            }
            Value<Scalar> ct_emb = linear(ct, param(g, "embed.w", frozen), param(g, "embed.b", frozen));
            x = concat_rows<Scalar>({ct_emb, x});
        }
        x = add(x, param(g, "pos", frozen));

        Value<Scalar> ones = g.leaf(Tensor<Scalar>::full({1, H}, Scalar(1)));
        Value<Scalar> csil = silu_op(c);
        for (Index i = 0; i < cfg_.depth; ++i) {
            std::string b = "blk" + std::to_string(i) + ".";
            Value<Scalar> mods = linear(csil, param(g, b + "adaln.w", frozen), param(g, b + "adaln.b", frozen));
            auto seg = [&](Index k) { return slice_cols(mods, k * H, H); };
            Value<Scalar> h = layer_norm_plain(x);
            h = add_rowvec(mul_rowvec(h, add(seg(1), ones)), seg(0));
            h = multihead_self_attention(h, param(g, b + "attn.wqkv", frozen),
                                         param(g, b + "attn.bqkv", frozen), param(g, b + "attn.wo", frozen),
                                         param(g, b + "attn.bo", frozen), cfg_.heads);
            x = add(x, mul_rowvec(h, seg(2)));
            Value<Scalar> m = layer_norm_plain(x);
            m = add_rowvec(mul_rowvec(m, add(seg(4), ones)), seg(3));
            m = linear(m, param(g, b + "mlp.w1", frozen), param(g, b + "mlp.b1", frozen));
            m = gelu_op(m);
            m = linear(m, param(g, b + "mlp.w2", frozen), param(g, b + "mlp.b2", frozen));
            x = add(x, mul_rowvec(m, seg(5)));
        }
        Value<Scalar> fmods =
            linear(csil, param(g, "final.adaln.w", frozen), param(g, "final.adaln.b", frozen));
        Value<Scalar> h = layer_norm_plain(x);
        h = add_rowvec(mul_rowvec(h, add(slice_cols(fmods, H, H), ones)), slice_cols(fmods, 0, H));
        Value<Scalar> eps = linear(h, param(g, "head.w", frozen), param(g, "head.b", frozen));
        if (cfg_.mode == CondMode::frame_tokens) eps = slice_rows(eps, N, N);
        return eps;
    }

    Tensor<Scalar> denoise(const Tensor<Scalar>& noisy_tokens, Index t,
                           const DiTCondition<Scalar>& cond) const {
        Graph<Scalar> g;
        return denoise_t(g, g.leaf(noisy_tokens), t, cond, true).tensor();
    }

private:
    Value<Scalar> condition_vector_t(Graph<Scalar>& g, Index t, const DiTCondition<Scalar>& cond,
                                     bool frozen) const {
        Value<Scalar> temb = g.leaf(detail::timestep_embedding<Scalar>(static_cast<double>(t), cfg_.hidden));
        Value<Scalar> c = linear(temb, param(g, "tmlp.w1", frozen), param(g, "tmlp.b1", frozen));
        c = silu_op(c);
        c = linear(c, param(g, "tmlp.w2", frozen), param(g, "tmlp.b2", frozen));
        if (cfg_.mode == CondMode::class_label) {
            int row;
            if (cond.is_null) {
                row = cfg_.num_classes;  // dedicated learned null embedding
            } else {
                if (!cond.class_id || *cond.class_id < 0 || *cond.class_id >= cfg_.num_classes)
                    throw std::invalid_argument("denoise: invalid class id");
                row = *cond.class_id;
            }
            c = add(c, slice_rows(param(g, "class_emb", frozen), row, 1));
        }
        return c;
    }

    Value<Scalar> param(Graph<Scalar>& g, const std::string& name, bool frozen) const {
        Param<Scalar>& p = store_->at(prefix_ + name);
        return frozen ? use_frozen(g, p) : use(g, p);
    }

    DiTConfig cfg_;
    ParamStore<Scalar>* store_;
    std::string prefix_;
};

// eps_null + scale * (eps_cond - eps_null); exact passthrough at 0 and 1.
template <typename Scalar>
Tensor<Scalar> cfg_combine(const Tensor<Scalar>& eps_cond, const Tensor<Scalar>& eps_null, double scale) {
    if (!same_shape(eps_cond.shape(), eps_null.shape()))
        throw std::invalid_argument("cfg_combine: shape mismatch");
    if (scale == 1.0) return eps_cond;
    if (scale == 0.0) return eps_null;
    Tensor<Scalar> out(eps_cond.shape());
    out.array() = eps_null.array() + static_cast<Scalar>(scale) * (eps_cond.array() - eps_null.array());
    return out;
}

// Zero-pad frames k..T-1 of a clip and encode it with the frozen encoder in
// eval/mean mode; the result conditions frame prediction.
template <typename Scalar>
Tensor<Scalar> encode_frame_condition(const VideoClip& partial, Index known_frames,
                                      const NervEncoder<Scalar>& encoder) {
    const Index T = partial.frames();
    if (known_frames < 1 || known_frames >= T)
        throw std::invalid_argument("encode_frame_condition: known frame count out of range");
    VideoClip padded = partial;
    const Index frame_elems = partial.height() * partial.width() * 3;
    std::fill_n(padded.pixels.data() + known_frames * frame_elems, (T - known_frames) * frame_elems, 0.0f);
    return encoder.encode(padded, EncodeMode::eval).mean;
}

}  // namespace nervdiff
