#pragma once

#include "nervdiff/checkpoint.hpp"
#include "nervdiff/nn_ops.hpp"
#include "nervdiff/params.hpp"
#include "nervdiff/sched_math.hpp"

#include <string>
#include <vector>

namespace nervdiff {

// Token-conditioned convolutional video decoder. Weight tokens are mapped by
// per-layer affine heads into convolution kernels occupying the leading
// channel group of each layer; remaining channels are globally shared.
struct NeRVConfig {
    Index base_dim = 32;  // D
    Index num_blocks = 3;
    Index init_h = 4, init_w = 4;
    Pe3dDims pe_dims{16, 16, 16};
    Index group = 16;  // G, modulated channel group
    Index num_tokens = 32;
    Index token_dim = 32;

    Index out_height() const { return init_h << num_blocks; }
    Index out_width() const { return init_w << num_blocks; }
    Index pe_channels() const { return pe_dims.total(); }

    static NeRVConfig desk() { return {}; }
    static NeRVConfig paper(Index d) {  // d in {128, 256, 512} for S/B/L
        NeRVConfig c;
        c.base_dim = d;
        c.num_blocks = 4;
        c.init_h = c.init_w = 8;
        c.group = 64;
        c.num_tokens = 128;
        c.token_dim = 128;
        return c;
    }
};

enum class ModulationMode { channel, repeat, fmm };
enum class AffineMode { multihead, no_reuse };

struct NervLayerDesc {
    enum class Kind { conv, tconv, to_rgb };
    Kind kind;
    Index in_ch, out_ch, k, stride, pad;
    Index mod_in, mod_out;  // modulated slot extents at the leading indices
    std::string name;

    Index mod_elems() const { return mod_in * mod_out * k * k; }
    bool upsamples() const { return kind == Kind::tconv; }
};

// Block structure: [conv3, tconv4 (2x), conv3] per block, toRGB at the end.
// The last block runs at doubled width 2D; the first conv consumes the
// positional-embedding channels.
inline std::vector<NervLayerDesc> nerv_layer_table(const NeRVConfig& cfg) {
    using Kind = NervLayerDesc::Kind;
    const Index D = cfg.base_dim, G = cfg.group, B = cfg.num_blocks;
    std::vector<NervLayerDesc> table;
    for (Index b = 0; b < B; ++b) {
        const bool last = (b == B - 1);
        const Index in0 = (b == 0) ? cfg.pe_channels() : D;
        const Index width = last ? 2 * D : D;
        NervLayerDesc c1{Kind::conv, in0, width, 3, 1, 1, 0, 0, "b" + std::to_string(b) + ".conv1"};
        if (b == 0) {
            c1.mod_in = in0;  // the whole first kernel is instance specific
            c1.mod_out = std::min(D, width);
        } else if (last) {
            c1.mod_in = std::min(in0, 2 * G);
            c1.mod_out = std::min(width, G);
        } else {
            c1.mod_in = std::min(in0, G);
            c1.mod_out = std::min(width, G);
        }
        table.push_back(c1);
        table.push_back({Kind::tconv, width, width, 4, 2, 1, std::min(width, G), std::min(width, G),
                         "b" + std::to_string(b) + ".up"});
        table.push_back({Kind::conv, width, width, 3, 1, 1, std::min(width, G), std::min(width, G),
                         "b" + std::to_string(b) + ".conv2"});
    }
    const Index tail = 2 * D;
    table.push_back({Kind::to_rgb, tail, 3, 3, 1, 1, std::min(tail, D), 3, "to_rgb"});
    return table;
}

template <typename Scalar>
Value<Scalar> fmm_outer(Value<Scalar> u_col, Value<Scalar> v_row);

// Demodulated instance-specific kernels plus the shared-weight source.
template <typename Scalar>
struct NeRVInstance {
    std::vector<Tensor<Scalar>> modulation_kernels;  // [mod_out, mod_in, k, k] per layer
    NeRVConfig config;
};

template <typename Scalar>
class NervDecoder {
public:
    NervDecoder(const NeRVConfig& cfg, ParamStore<Scalar>& store, RngStream& rng,
                ModulationMode mod_mode = ModulationMode::channel,
                AffineMode affine_mode = AffineMode::multihead, const std::string& prefix = "nerv/")
        : cfg_(cfg), store_(&store), mod_mode_(mod_mode), affine_mode_(affine_mode), prefix_(prefix),
          layers_(nerv_layer_table(cfg)) {
        const Index N = cfg.num_tokens, Dt = cfg.token_dim;
        const Index L = static_cast<Index>(layers_.size());
        for (Index l = 0; l < L; ++l) {
            const auto& d = layers_[static_cast<size_t>(l)];
            Shape wshape = d.kind == NervLayerDesc::Kind::tconv
                               ? Shape{d.in_ch, d.out_ch, d.k, d.k}
                               : Shape{d.out_ch, d.in_ch, d.k, d.k};
            store.create(prefix + d.name + ".w", init_kaiming_conv<Scalar>(rng, wshape));
            store.create(prefix + d.name + ".b", Tensor<Scalar>::zeros({d.out_ch}));
            if (mod_mode == ModulationMode::channel) {
                if (affine_mode == AffineMode::multihead) {
                    if (d.mod_elems() % N != 0)
                        throw std::invalid_argument("affine head output not divisible by token count: " +
                                                    d.name);
                    Index per_tok = d.mod_elems() / N;
                    store.create(prefix + d.name + ".head.w",
                                 init_normal<Scalar>(rng, {Dt, per_tok}, 0.01));
                    store.create(prefix + d.name + ".head.b", Tensor<Scalar>::zeros({per_tok}));
                } else {
                    if (N % L != 0)
                        throw std::invalid_argument("no-reuse affine requires tokens divisible by layers");
                    Index slice = N / L;
                    store.create(prefix + d.name + ".head.w",
                                 init_normal<Scalar>(rng, {slice * Dt, d.mod_elems()}, 0.01));
                    store.create(prefix + d.name + ".head.b", Tensor<Scalar>::zeros({d.mod_elems()}));
                }
            } else if (mod_mode == ModulationMode::fmm) {
                store.create(prefix + d.name + ".head.w",
                             init_normal<Scalar>(rng, {N * Dt, d.out_ch + d.in_ch}, 0.01));
                store.create(prefix + d.name + ".head.b", Tensor<Scalar>::zeros({d.out_ch + d.in_ch}));
            }
        }
    }

    const NeRVConfig& config() const { return cfg_; }
    const std::vector<NervLayerDesc>& layers() const { return layers_; }
    ModulationMode modulation_mode() const { return mod_mode_; }

    // Differentiable modulation kernels, one per layer, [mod_out, mod_in, k, k]
    // (for repeat/fmm modes the slot covers the full kernel).
    std::vector<Value<Scalar>> modulation_kernels_t(Graph<Scalar>& g, Value<Scalar> tokens) const {
        const Index N = cfg_.num_tokens, Dt = cfg_.token_dim;
        std::vector<Value<Scalar>> mods;
        const Index L = static_cast<Index>(layers_.size());
        for (Index l = 0; l < L; ++l) {
            const auto& d = layers_[static_cast<size_t>(l)];
            Value<Scalar> raw;
            if (mod_mode_ == ModulationMode::channel) {
                Value<Scalar> w = param(g, d.name + ".head.w");
                Value<Scalar> b = param(g, d.name + ".head.b");
                Value<Scalar> m;
                if (affine_mode_ == AffineMode::multihead) {
                    m = linear(tokens, w, b);  // [N, per_tok]
                } else {
                    Index slice = N / L;
                    Value<Scalar> part = slice_rows(tokens, l * slice, slice);
                    m = linear(reshape(part, {1, slice * Dt}), w, b);
                }
                raw = reshape(m, {d.mod_out, d.mod_in, d.k, d.k});
            } else if (mod_mode_ == ModulationMode::repeat) {
                Value<Scalar> flat = reshape(tokens, {N * Dt});
                Value<Scalar> rep = reshape(repeat_to(flat, d.out_ch * d.in_ch * d.k * d.k),
                                            {d.out_ch, d.in_ch, d.k, d.k});
                Value<Scalar> base = param(g, base_name(d));
                raw = mul(to_outmajor(g, base, d), rep);
            } else {  // fmm: base * (1 + u v^T), rank-1 factors from an affine head
                Value<Scalar> w = param(g, d.name + ".head.w");
                Value<Scalar> b = param(g, d.name + ".head.b");
                Value<Scalar> uv = linear(reshape(tokens, {1, N * Dt}), w, b);
                Value<Scalar> u = reshape(slice_cols(uv, 0, d.out_ch), {d.out_ch, 1});
                Value<Scalar> v = reshape(slice_cols(uv, d.out_ch, d.in_ch), {1, d.in_ch});
                Value<Scalar> m2 = fmm_outer(u, v);  // [out, in]
                Value<Scalar> ones_kk = g.leaf(Tensor<Scalar>::full({1, d.k * d.k}, Scalar(1)));
                Value<Scalar> m4 = reshape(matmul(reshape(m2, {d.out_ch * d.in_ch, 1}), ones_kk),
                                           {d.out_ch, d.in_ch, d.k, d.k});
                Value<Scalar> one = g.leaf(Tensor<Scalar>::full({d.out_ch, d.in_ch, d.k, d.k}, Scalar(1)));
                Value<Scalar> base = param(g, base_name(d));
                raw = mul(to_outmajor(g, base, d), add(one, m4));
            }
            mods.push_back(demodulate_outch(raw, Scalar(1e-8)));
        }
        return mods;
    }

    // Full per-layer kernels in conv layout, built from modulation kernels and
    // shared weights.
    std::vector<Value<Scalar>> full_kernels_t(Graph<Scalar>& g,
                                              const std::vector<Value<Scalar>>& mods) const {
        std::vector<Value<Scalar>> out;
        for (size_t l = 0; l < layers_.size(); ++l) {
            const auto& d = layers_[l];
            Value<Scalar> mod = mods[l];
            if (mod_mode_ != ModulationMode::channel) {
                // slot covers the whole kernel; shared base was already folded in
                out.push_back(d.kind == NervLayerDesc::Kind::tconv ? swap_axes01(mod) : mod);
                continue;
            }
            Value<Scalar> base = param(g, base_name(d));
            if (d.kind == NervLayerDesc::Kind::tconv)
                out.push_back(assign_block4(base, swap_axes01(mod), 0, 0));
            else
                out.push_back(assign_block4(base, mod, 0, 0));
        }
        return out;
    }

    std::vector<Value<Scalar>> instantiate_t(Graph<Scalar>& g, Value<Scalar> tokens) const {
        return full_kernels_t(g, modulation_kernels_t(g, tokens));
    }

    // Decode at the given (possibly fractional) time coordinates: [F, 3, H, W].
    Value<Scalar> decode_t(Graph<Scalar>& g, const std::vector<Value<Scalar>>& kernels,
                           const std::vector<double>& times) const {
        if (times.empty()) throw std::invalid_argument("decode: times must be nonempty");
        auto pe = build_pe3d(cfg_.pe_dims, cfg_.init_h, cfg_.init_w, times);
        Value<Scalar> x = g.leaf(pe3d_to_queries(pe).template cast<Scalar>());
        std::vector<Value<Scalar>> block_out;
        size_t l = 0;
        for (Index b = 0; b < cfg_.num_blocks; ++b) {
            Value<Scalar> in = (b == 0) ? x : block_out.back();
            if (b >= 2) in = add(in, bilinear_up2(block_out[static_cast<size_t>(b - 2)]));
            Value<Scalar> h = gelu_op(conv2d(in, kernels[l], bias(g, l), 1, 1));
            ++l;
            h = gelu_op(conv_transpose2d(h, kernels[l], bias(g, l), 2, 1));
            ++l;
            h = gelu_op(conv2d(h, kernels[l], bias(g, l), 1, 1));
            ++l;
            block_out.push_back(h);
        }
        Value<Scalar> rgb = tanh_op(conv2d(block_out.back(), kernels[l], bias(g, l), 1, 1));
        return rgb;
    }

    // ------------------------------------------------------------------
    // plain (non-training) surface

    NeRVInstance<Scalar> instantiate(const Tensor<Scalar>& tokens) const {
        Graph<Scalar> g;
        auto mods = modulation_kernels_t(g, g.leaf(tokens));
        NeRVInstance<Scalar> inst;
        inst.config = cfg_;
        for (auto& m : mods) {
            if (!m.tensor().all_finite()) throw NumericalError("instantiate: non-finite kernel");
            inst.modulation_kernels.push_back(m.tensor());
        }
        return inst;
    }

    Tensor<Scalar> decode(const NeRVInstance<Scalar>& inst, const std::vector<double>& times) const {
        Graph<Scalar> g;
        std::vector<Value<Scalar>> mods;
        for (const auto& m : inst.modulation_kernels) {
            if (!m.all_finite()) throw NumericalError("decode: non-finite kernel");
            mods.push_back(g.leaf(m));
        }
        return decode_t(g, full_kernels_t(g, mods), times).tensor();
    }

    Tensor<Scalar> decode_tokens(const Tensor<Scalar>& tokens, const std::vector<double>& times) const {
        Graph<Scalar> g;
        return decode_t(g, instantiate_t(g, g.leaf(tokens)), times).tensor();
    }

private:
    Value<Scalar> param(Graph<Scalar>& g, const std::string& name) const {
        return use(g, store_->at(prefix_ + name));
    }
    Value<Scalar> bias(Graph<Scalar>& g, size_t l) const { return param(g, layers_[l].name + ".b"); }
    std::string base_name(const NervLayerDesc& d) const { return d.name + ".w"; }

    // stored tconv weights are [in, out, k, k]; modulation math runs out-major
    Value<Scalar> to_outmajor(Graph<Scalar>& g, Value<Scalar> w, const NervLayerDesc& d) const {
        (void)g;
        return d.kind == NervLayerDesc::Kind::tconv ? swap_axes01(w) : w;
    }

    NeRVConfig cfg_;
    ParamStore<Scalar>* store_;
    ModulationMode mod_mode_;
    AffineMode affine_mode_;
    std::string prefix_;
    std::vector<NervLayerDesc> layers_;
};

// rank-1 modulation matrix m[i,j] = u_i * v_j
template <typename Scalar>
Value<Scalar> fmm_outer(Value<Scalar> u_col, Value<Scalar> v_row) {
    return matmul(u_col, v_row);
}

// lambda * a + (1 - lambda) * b, exact at the endpoints
template <typename Scalar>
Tensor<Scalar> interpolate_weights(const Tensor<Scalar>& a, const Tensor<Scalar>& b, double lambda) {
    if (!same_shape(a.shape(), b.shape()))
        throw std::invalid_argument("interpolate_weights: shape mismatch");
    if (lambda == 1.0) return a;
    if (lambda == 0.0) return b;
    Tensor<Scalar> out(a.shape());
    out.array() = static_cast<Scalar>(lambda) * a.array() + static_cast<Scalar>(1.0 - lambda) * b.array();
    return out;
}

// Times for interpolation by an integer factor. Inclusive mode stops at
// base_T-1 (factor*(base_T-1)+1 frames); tail mode extends to base_T*factor
// frames, extrapolating past the last trained index.
inline std::vector<double> interpolation_times(Index factor, Index base_t, bool extrapolate_tail = false) {
    if (factor < 2) throw std::invalid_argument("interpolate_time: factor must be >= 2");
    std::vector<double> times;
    if (extrapolate_tail) {
        for (Index j = 0; j < base_t * factor; ++j)
            times.push_back(static_cast<double>(j) / static_cast<double>(factor));
    } else {
        for (Index k = 0; k + 1 < base_t; ++k)
            for (Index j = 0; j < factor; ++j)
                times.push_back(static_cast<double>(k) + static_cast<double>(j) / static_cast<double>(factor));
        times.push_back(static_cast<double>(base_t - 1));
    }
    return times;
}

template <typename Scalar>
Tensor<Scalar> interpolate_time(const NervDecoder<Scalar>& dec, const NeRVInstance<Scalar>& inst,
                                Index factor, Index base_t, bool extrapolate_tail = false) {
    return dec.decode(inst, interpolation_times(factor, base_t, extrapolate_tail));
}

}  // namespace nervdiff
