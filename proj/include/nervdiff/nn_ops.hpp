#pragma once

#include "nervdiff/graph.hpp"

#include <array>
#include <cmath>
#include <vector>

namespace nervdiff {

// ---------------------------------------------------------------------------
// normalization

template <typename Scalar>
Value<Scalar> layer_norm(Value<Scalar> x, Value<Scalar> gamma, Value<Scalar> beta, Scalar eps = Scalar(1e-5)) {
    Graph<Scalar>& g = *x.g;
    const Tensor<Scalar>& X = x.tensor();
    Index rows = X.dim(0), cols = X.size() / X.dim(0);
    Tensor<Scalar> y(X.shape());
    auto Xm = X.mat(rows, cols);
    auto Ym = y.mat(rows, cols);
    auto G = gamma.tensor().mat(1, cols).row(0);
    auto B = beta.tensor().mat(1, cols).row(0);
    for (Index i = 0; i < rows; ++i) {
        Scalar mu = Xm.row(i).mean();
        Scalar var = (Xm.row(i).array() - mu).square().mean();
        Scalar inv = Scalar(1) / std::sqrt(var + eps);
        Ym.row(i) = (((Xm.row(i).array() - mu) * inv) * G.array() + B.array()).matrix();
    }
    bool req = g.needs_grad(x.id) || g.needs_grad(gamma.id) || g.needs_grad(beta.id);
    int out = g.add_node(std::move(y), req);
    if (req)
        g.set_back(out, [out, ix = x.id, ig = gamma.id, ib = beta.id, rows, cols, eps](Graph<Scalar>& g) {
            const auto& dy = g.grad(out);
            auto dYm = dy.mat(rows, cols);
            auto Xm = g.val(ix).mat(rows, cols);
            auto G = g.val(ig).mat(1, cols).row(0);
            using RowArr = Eigen::Array<Scalar, 1, Eigen::Dynamic>;
            for (Index i = 0; i < rows; ++i) {
                Scalar mu = Xm.row(i).mean();
                Scalar var = (Xm.row(i).array() - mu).square().mean();
                Scalar inv = Scalar(1) / std::sqrt(var + eps);
                RowArr xhat = (Xm.row(i).array() - mu) * inv;
                RowArr dyr = dYm.row(i).array();
                if (g.needs_grad(ig)) g.grad_buf(ig).mat(1, cols).row(0).array() += dyr * xhat;
                if (g.needs_grad(ib)) g.grad_buf(ib).mat(1, cols).row(0).array() += dyr;
                if (g.needs_grad(ix)) {
                    RowArr dxhat = dyr * G.array();
                    Scalar m1 = dxhat.mean();
                    Scalar m2 = (dxhat * xhat).mean();
                    g.grad_buf(ix).mat(rows, cols).row(i).array() += inv * (dxhat - m1 - xhat * m2);
                }
            }
        });
    return {&g, out};
}

// layer norm without learnable affine (adaLN blocks supply shift/scale outside)
template <typename Scalar>
Value<Scalar> layer_norm_plain(Value<Scalar> x, Scalar eps = Scalar(1e-5)) {
    Graph<Scalar>& g = *x.g;
    const Tensor<Scalar>& X = x.tensor();
    Index rows = X.dim(0), cols = X.size() / X.dim(0);
    Tensor<Scalar> y(X.shape());
    auto Xm = X.mat(rows, cols);
    auto Ym = y.mat(rows, cols);
    for (Index i = 0; i < rows; ++i) {
        Scalar mu = Xm.row(i).mean();
        Scalar var = (Xm.row(i).array() - mu).square().mean();
        Ym.row(i) = ((Xm.row(i).array() - mu) / std::sqrt(var + eps)).matrix();
    }
    bool req = g.needs_grad(x.id);
    int out = g.add_node(std::move(y), req);
    if (req)
        g.set_back(out, [out, ix = x.id, rows, cols, eps](Graph<Scalar>& g) {
            auto dYm = g.grad(out).mat(rows, cols);
            auto Xm = g.val(ix).mat(rows, cols);
            using RowArr = Eigen::Array<Scalar, 1, Eigen::Dynamic>;
            for (Index i = 0; i < rows; ++i) {
                Scalar mu = Xm.row(i).mean();
                Scalar var = (Xm.row(i).array() - mu).square().mean();
                Scalar inv = Scalar(1) / std::sqrt(var + eps);
                RowArr xhat = (Xm.row(i).array() - mu) * inv;
                RowArr dxhat = dYm.row(i).array();
                Scalar m1 = dxhat.mean();
                Scalar m2 = (dxhat * xhat).mean();
                g.grad_buf(ix).mat(rows, cols).row(i).array() += inv * (dxhat - m1 - xhat * m2);
            }
        });
    return {&g, out};
}

template <typename Scalar>
struct BatchNormState {
    Tensor<Scalar>* running_mean = nullptr;  // [C]
    Tensor<Scalar>* running_var = nullptr;   // [C]
};

// Batch norm over the row (token) axis: statistics per embedding channel.
// Training mode uses batch statistics and updates *state; eval mode uses
// the running statistics.
template <typename Scalar>
Value<Scalar> batch_norm_cols(Value<Scalar> x, Value<Scalar> gamma, Value<Scalar> beta,
                              BatchNormState<Scalar>* state, bool train,
                              Scalar momentum = Scalar(0.1), Scalar eps = Scalar(1e-5)) {
    Graph<Scalar>& g = *x.g;
    const Tensor<Scalar>& X = x.tensor();
    Index rows = X.dim(0), cols = X.size() / X.dim(0);
    auto Xm = X.mat(rows, cols);
    using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
    RowVec mu(cols), var(cols);
    if (train) {
        mu = Xm.colwise().mean();
        var = (Xm.rowwise() - mu).array().square().colwise().mean();
        if (state && state->running_mean) {
            Scalar unbias = rows > 1 ? Scalar(rows) / Scalar(rows - 1) : Scalar(1);
            state->running_mean->mat(1, cols).row(0) =
                (Scalar(1) - momentum) * state->running_mean->mat(1, cols).row(0) + momentum * mu;
            state->running_var->mat(1, cols).row(0) =
                (Scalar(1) - momentum) * state->running_var->mat(1, cols).row(0) + momentum * (var * unbias);
        }
    } else {
        mu = state->running_mean->mat(1, cols).row(0);
        var = state->running_var->mat(1, cols).row(0);
    }
    Tensor<Scalar> y(X.shape());
    RowVec inv = (var.array() + eps).rsqrt();
    auto G = gamma.tensor().mat(1, cols).row(0);
    auto B = beta.tensor().mat(1, cols).row(0);
    y.mat(rows, cols) =
        (((Xm.rowwise() - mu).array().rowwise() * inv.array()).rowwise() * G.array()).rowwise() + B.array();
    bool req = g.needs_grad(x.id) || g.needs_grad(gamma.id) || g.needs_grad(beta.id);
    int out = g.add_node(std::move(y), req);
    if (req)
        g.set_back(out, [out, ix = x.id, ig = gamma.id, ib = beta.id, rows, cols, eps, train, mu, inv](Graph<Scalar>& g) {
            auto dYm = g.grad(out).mat(rows, cols);
            auto Xm = g.val(ix).mat(rows, cols);
            auto G = g.val(ig).mat(1, cols).row(0);
            using Arr = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
            Arr xhat = (Xm.rowwise() - mu).array().rowwise() * inv.array();
            if (g.needs_grad(ig))
                g.grad_buf(ig).mat(1, cols).row(0).array() += (dYm.array() * xhat).colwise().sum();
            if (g.needs_grad(ib)) g.grad_buf(ib).mat(1, cols).row(0).array() += dYm.array().colwise().sum();
            if (g.needs_grad(ix)) {
                Arr dxhat = dYm.array().rowwise() * G.array();
                if (train) {
                    auto m1 = dxhat.colwise().mean();
                    auto m2 = (dxhat * xhat).colwise().mean();
                    g.grad_buf(ix).mat(rows, cols).array() +=
                        ((dxhat.rowwise() - m1) - xhat.rowwise() * m2).rowwise() * inv.array();
                } else {
                    g.grad_buf(ix).mat(rows, cols).array() += dxhat.rowwise() * inv.array();
                }
            }
        });
    return {&g, out};
}

// ---------------------------------------------------------------------------
// convolution helpers

namespace detail {

// Patch gather over an image stack: img [B, C, IH, IW], patch grid [Ph, Pw]
// with stride s and padding p. cols is [C*kh*kw, B*Ph*Pw], row-major.
template <typename Scalar>
void im2col2d(const Scalar* img, Index B, Index C, Index IH, Index IW, Index kh, Index kw,
              Index s, Index p, Index Ph, Index Pw, Scalar* cols) {
    const Index ncols = B * Ph * Pw;
    for (Index c = 0; c < C; ++c)
        for (Index ky = 0; ky < kh; ++ky)
            for (Index kx = 0; kx < kw; ++kx) {
                Scalar* row = cols + ((c * kh + ky) * kw + kx) * ncols;
                for (Index b = 0; b < B; ++b) {
                    const Scalar* im = img + (b * C + c) * IH * IW;
                    for (Index py = 0; py < Ph; ++py) {
                        Index iy = py * s - p + ky;
                        Scalar* dst = row + (b * Ph + py) * Pw;
                        if (iy < 0 || iy >= IH) {
                            std::fill_n(dst, Pw, Scalar(0));
                            continue;
                        }
                        const Scalar* srow = im + iy * IW;
                        for (Index px = 0; px < Pw; ++px) {
                            Index ix = px * s - p + kx;
                            dst[px] = (ix >= 0 && ix < IW) ? srow[ix] : Scalar(0);
                        }
                    }
                }
            }
}

// Adjoint of im2col2d: scatter-add cols back into the image stack.
template <typename Scalar>
void col2im2d_add(const Scalar* cols, Index B, Index C, Index IH, Index IW, Index kh, Index kw,
                  Index s, Index p, Index Ph, Index Pw, Scalar* img) {
    const Index ncols = B * Ph * Pw;
    for (Index c = 0; c < C; ++c)
        for (Index ky = 0; ky < kh; ++ky)
            for (Index kx = 0; kx < kw; ++kx) {
                const Scalar* row = cols + ((c * kh + ky) * kw + kx) * ncols;
                for (Index b = 0; b < B; ++b) {
                    Scalar* im = img + (b * C + c) * IH * IW;
                    for (Index py = 0; py < Ph; ++py) {
                        Index iy = py * s - p + ky;
                        if (iy < 0 || iy >= IH) continue;
                        const Scalar* src = row + (b * Ph + py) * Pw;
                        Scalar* drow = im + iy * IW;
                        for (Index px = 0; px < Pw; ++px) {
                            Index ix = px * s - p + kx;
                            if (ix >= 0 && ix < IW) drow[ix] += src[px];
                        }
                    }
                }
            }
}

template <typename Scalar>
void im2col3d(const Scalar* img, Index B, Index C, Index ID, Index IH, Index IW,
              Index kd, Index kh, Index kw, Index sd, Index sh, Index sw,
              Index pd, Index ph, Index pw, Index Pd, Index Ph, Index Pw, Scalar* cols) {
    const Index ncols = B * Pd * Ph * Pw;
    for (Index c = 0; c < C; ++c)
        for (Index kz = 0; kz < kd; ++kz)
            for (Index ky = 0; ky < kh; ++ky)
                for (Index kx = 0; kx < kw; ++kx) {
                    Scalar* row = cols + (((c * kd + kz) * kh + ky) * kw + kx) * ncols;
                    for (Index b = 0; b < B; ++b) {
                        const Scalar* im = img + (b * C + c) * ID * IH * IW;
                        for (Index pz = 0; pz < Pd; ++pz) {
                            Index iz = pz * sd - pd + kz;
                            for (Index py = 0; py < Ph; ++py) {
                                Index iy = py * sh - ph + ky;
                                Scalar* dst = row + ((b * Pd + pz) * Ph + py) * Pw;
                                if (iz < 0 || iz >= ID || iy < 0 || iy >= IH) {
                                    std::fill_n(dst, Pw, Scalar(0));
                                    continue;
                                }
                                const Scalar* srow = im + (iz * IH + iy) * IW;
                                for (Index px = 0; px < Pw; ++px) {
                                    Index ix = px * sw - pw + kx;
                                    dst[px] = (ix >= 0 && ix < IW) ? srow[ix] : Scalar(0);
                                }
                            }
                        }
                    }
                }
}

template <typename Scalar>
void col2im3d_add(const Scalar* cols, Index B, Index C, Index ID, Index IH, Index IW,
                  Index kd, Index kh, Index kw, Index sd, Index sh, Index sw,
                  Index pd, Index ph, Index pw, Index Pd, Index Ph, Index Pw, Scalar* img) {
    const Index ncols = B * Pd * Ph * Pw;
    for (Index c = 0; c < C; ++c)
        for (Index kz = 0; kz < kd; ++kz)
            for (Index ky = 0; ky < kh; ++ky)
                for (Index kx = 0; kx < kw; ++kx) {
                    const Scalar* row = cols + (((c * kd + kz) * kh + ky) * kw + kx) * ncols;
                    for (Index b = 0; b < B; ++b) {
                        Scalar* im = img + (b * C + c) * ID * IH * IW;
                        for (Index pz = 0; pz < Pd; ++pz) {
                            Index iz = pz * sd - pd + kz;
                            if (iz < 0 || iz >= ID) continue;
                            for (Index py = 0; py < Ph; ++py) {
                                Index iy = py * sh - ph + ky;
                                if (iy < 0 || iy >= IH) continue;
                                const Scalar* src = row + ((b * Pd + pz) * Ph + py) * Pw;
                                Scalar* drow = im + (iz * IH + iy) * IW;
                                for (Index px = 0; px < Pw; ++px) {
                                    Index ix = px * sw - pw + kx;
                                    if (ix >= 0 && ix < IW) drow[ix] += src[px];
                                }
                            }
                        }
                    }
                }
}

}  // namespace detail

// x [B,C,H,W], w [O,C,kh,kw], b [O]; stride s, zero padding p.
template <typename Scalar>
Value<Scalar> conv2d(Value<Scalar> x, Value<Scalar> w, Value<Scalar> b, Index s, Index p) {
    Graph<Scalar>& g = *x.g;
    const Tensor<Scalar>& X = x.tensor();
    const Tensor<Scalar>& W = w.tensor();
    assert(X.rank() == 4 && W.rank() == 4 && X.dim(1) == W.dim(1));
    Index B = X.dim(0), C = X.dim(1), H = X.dim(2), Wd = X.dim(3);
    Index O = W.dim(0), kh = W.dim(2), kw = W.dim(3);
    Index Ho = (H + 2 * p - kh) / s + 1;
    Index Wo = (Wd + 2 * p - kw) / s + 1;
    assert((Ho - 1) * s + kh - 2 * p == H && (Wo - 1) * s + kw - 2 * p == Wd);
    const Index ckk = C * kh * kw;
    const Index ncols = B * Ho * Wo;

    Tensor<Scalar> cols({ckk, ncols});
    detail::im2col2d(X.data(), B, C, H, Wd, kh, kw, s, p, Ho, Wo, cols.data());
    Tensor<Scalar> ymat({O, ncols});
    ymat.mat(O, ncols).noalias() = W.mat(O, ckk) * cols.mat(ckk, ncols);

    Tensor<Scalar> y({B, O, Ho, Wo});
    const Tensor<Scalar>& bias = b.tensor();
    for (Index bb = 0; bb < B; ++bb)
        for (Index o = 0; o < O; ++o) {
            const Scalar* src = ymat.data() + o * ncols + bb * Ho * Wo;
            Scalar* dst = y.data() + (bb * O + o) * Ho * Wo;
            Scalar bo = bias[o];
            for (Index i = 0; i < Ho * Wo; ++i) dst[i] = src[i] + bo;
        }

    bool req = g.needs_grad(x.id) || g.needs_grad(w.id) || g.needs_grad(b.id);
    int out = g.add_node(std::move(y), req);
    if (req)
        g.set_back(out, [out, ix = x.id, iw = w.id, ib = b.id, B, C, H, Wd, O, kh, kw, s, p, Ho, Wo](Graph<Scalar>& g) {
            const Index ckk = C * kh * kw;
            const Index ncols = B * Ho * Wo;
            const auto& dy = g.grad(out);
            Tensor<Scalar> dymat({O, ncols});
            for (Index bb = 0; bb < B; ++bb)
                for (Index o = 0; o < O; ++o)
                    std::copy_n(dy.data() + (bb * O + o) * Ho * Wo, Ho * Wo,
                                dymat.data() + o * ncols + bb * Ho * Wo);
            if (g.needs_grad(ib))
                g.grad_buf(ib).array() += dymat.mat(O, ncols).rowwise().sum().array();
            if (g.needs_grad(iw)) {
                Tensor<Scalar> cols({ckk, ncols});
                detail::im2col2d(g.val(ix).data(), B, C, H, Wd, kh, kw, s, p, Ho, Wo, cols.data());
                g.grad_buf(iw).mat(O, ckk).noalias() += dymat.mat(O, ncols) * cols.mat(ckk, ncols).transpose();
            }
            if (g.needs_grad(ix)) {
                Tensor<Scalar> dcols({ckk, ncols});
                dcols.mat(ckk, ncols).noalias() = g.val(iw).mat(O, ckk).transpose() * dymat.mat(O, ncols);
                detail::col2im2d_add(dcols.data(), B, C, H, Wd, kh, kw, s, p, Ho, Wo, g.grad_buf(ix).data());
            }
        });
    return {&g, out};
}

// x [B,C,H,W], w [C,O,kh,kw], b [O]; output [B,O,(H-1)s-2p+kh,(W-1)s-2p+kw].
template <typename Scalar>
Value<Scalar> conv_transpose2d(Value<Scalar> x, Value<Scalar> w, Value<Scalar> b, Index s, Index p) {
    Graph<Scalar>& g = *x.g;
    const Tensor<Scalar>& X = x.tensor();
    const Tensor<Scalar>& W = w.tensor();
    assert(X.rank() == 4 && W.rank() == 4 && X.dim(1) == W.dim(0));
    Index B = X.dim(0), C = X.dim(1), H = X.dim(2), Wd = X.dim(3);
    Index O = W.dim(1), kh = W.dim(2), kw = W.dim(3);
    Index Ho = (H - 1) * s - 2 * p + kh;
    Index Wo = (Wd - 1) * s - 2 * p + kw;
    const Index okk = O * kh * kw;
    const Index npos = B * H * Wd;

    // [C, B*H*W] view of x
    Tensor<Scalar> xall({C, npos});
    for (Index bb = 0; bb < B; ++bb)
        for (Index c = 0; c < C; ++c)
            std::copy_n(X.data() + (bb * C + c) * H * Wd, H * Wd, xall.data() + c * npos + bb * H * Wd);
    Tensor<Scalar> cols({okk, npos});
    cols.mat(okk, npos).noalias() = W.mat(C, okk).transpose() * xall.mat(C, npos);

    Tensor<Scalar> y({B, O, Ho, Wo});
    detail::col2im2d_add(cols.data(), B, O, Ho, Wo, kh, kw, s, p, H, Wd, y.data());
    const Tensor<Scalar>& bias = b.tensor();
    for (Index bb = 0; bb < B; ++bb)
        for (Index o = 0; o < O; ++o) {
            Scalar* dst = y.data() + (bb * O + o) * Ho * Wo;
            Scalar bo = bias[o];
            for (Index i = 0; i < Ho * Wo; ++i) dst[i] += bo;
        }

    bool req = g.needs_grad(x.id) || g.needs_grad(w.id) || g.needs_grad(b.id);
    int out = g.add_node(std::move(y), req);
    if (req)
        g.set_back(out, [out, ix = x.id, iw = w.id, ib = b.id, B, C, H, Wd, O, kh, kw, s, p, Ho, Wo](Graph<Scalar>& g) {
            const Index okk = O * kh * kw;
            const Index npos = B * H * Wd;
            const auto& dy = g.grad(out);
            if (g.needs_grad(ib)) {
                auto& db = g.grad_buf(ib);
                for (Index bb = 0; bb < B; ++bb)
                    for (Index o = 0; o < O; ++o) {
                        const Scalar* src = dy.data() + (bb * O + o) * Ho * Wo;
                        Scalar acc = 0;
                        for (Index i = 0; i < Ho * Wo; ++i) acc += src[i];
                        db[o] += acc;
                    }
            }
            Tensor<Scalar> dcols({okk, npos});
            detail::im2col2d(dy.data(), B, O, Ho, Wo, kh, kw, s, p, H, Wd, dcols.data());
            if (g.needs_grad(iw)) {
                const auto& X = g.val(ix);
                Tensor<Scalar> xall({C, npos});
                for (Index bb = 0; bb < B; ++bb)
                    for (Index c = 0; c < C; ++c)
                        std::copy_n(X.data() + (bb * C + c) * H * Wd, H * Wd,
                                    xall.data() + c * npos + bb * H * Wd);
                g.grad_buf(iw).mat(C, okk).noalias() += xall.mat(C, npos) * dcols.mat(okk, npos).transpose();
            }
            if (g.needs_grad(ix)) {
                Tensor<Scalar> dxall({C, npos});
                dxall.mat(C, npos).noalias() = g.val(iw).mat(C, okk) * dcols.mat(okk, npos);
                auto& dx = g.grad_buf(ix);
                for (Index bb = 0; bb < B; ++bb)
                    for (Index c = 0; c < C; ++c) {
                        const Scalar* src = dxall.data() + c * npos + bb * H * Wd;
                        Scalar* dst = dx.data() + (bb * C + c) * H * Wd;
                        for (Index i = 0; i < H * Wd; ++i) dst[i] += src[i];
                    }
            }
        });
    return {&g, out};
}

// x [B,C,D,H,W], w [O,C,kd,kh,kw], b [O]
template <typename Scalar>
Value<Scalar> conv3d(Value<Scalar> x, Value<Scalar> w, Value<Scalar> b,
                     std::array<Index, 3> stride, std::array<Index, 3> pad) {
    Graph<Scalar>& g = *x.g;
    const Tensor<Scalar>& X = x.tensor();
    const Tensor<Scalar>& W = w.tensor();
    assert(X.rank() == 5 && W.rank() == 5 && X.dim(1) == W.dim(1));
    Index B = X.dim(0), C = X.dim(1), D = X.dim(2), H = X.dim(3), Wd = X.dim(4);
    Index O = W.dim(0), kd = W.dim(2), kh = W.dim(3), kw = W.dim(4);
    auto [sd, sh, sw] = stride;
    auto [pd, ph, pw] = pad;
    Index Do = (D + 2 * pd - kd) / sd + 1;
    Index Ho = (H + 2 * ph - kh) / sh + 1;
    Index Wo = (Wd + 2 * pw - kw) / sw + 1;
    const Index ckk = C * kd * kh * kw;
    const Index ncols = B * Do * Ho * Wo;

    Tensor<Scalar> cols({ckk, ncols});
    detail::im2col3d(X.data(), B, C, D, H, Wd, kd, kh, kw, sd, sh, sw, pd, ph, pw, Do, Ho, Wo, cols.data());
    Tensor<Scalar> ymat({O, ncols});
    ymat.mat(O, ncols).noalias() = W.mat(O, ckk) * cols.mat(ckk, ncols);

    Tensor<Scalar> y({B, O, Do, Ho, Wo});
    const Index vox = Do * Ho * Wo;
    const Tensor<Scalar>& bias = b.tensor();
    for (Index bb = 0; bb < B; ++bb)
        for (Index o = 0; o < O; ++o) {
            const Scalar* src = ymat.data() + o * ncols + bb * vox;
            Scalar* dst = y.data() + (bb * O + o) * vox;
            Scalar bo = bias[o];
            for (Index i = 0; i < vox; ++i) dst[i] = src[i] + bo;
        }

    bool req = g.needs_grad(x.id) || g.needs_grad(w.id) || g.needs_grad(b.id);
    int out = g.add_node(std::move(y), req);
    if (req)
        g.set_back(out, [out, ix = x.id, iw = w.id, ib = b.id, B, C, D, H, Wd, O, kd, kh, kw, sd, sh, sw,
                         pd, ph, pw, Do, Ho, Wo](Graph<Scalar>& g) {
            const Index ckk = C * kd * kh * kw;
            const Index vox = Do * Ho * Wo;
            const Index ncols = B * vox;
            const auto& dy = g.grad(out);
            Tensor<Scalar> dymat({O, ncols});
            for (Index bb = 0; bb < B; ++bb)
                for (Index o = 0; o < O; ++o)
                    std::copy_n(dy.data() + (bb * O + o) * vox, vox, dymat.data() + o * ncols + bb * vox);
            if (g.needs_grad(ib))
                g.grad_buf(ib).array() += dymat.mat(O, ncols).rowwise().sum().array();
            if (g.needs_grad(iw)) {
                Tensor<Scalar> cols({ckk, ncols});
                detail::im2col3d(g.val(ix).data(), B, C, D, H, Wd, kd, kh, kw, sd, sh, sw, pd, ph, pw, Do,
                                 Ho, Wo, cols.data());
                g.grad_buf(iw).mat(O, ckk).noalias() += dymat.mat(O, ncols) * cols.mat(ckk, ncols).transpose();
            }
            if (g.needs_grad(ix)) {
                Tensor<Scalar> dcols({ckk, ncols});
                dcols.mat(ckk, ncols).noalias() = g.val(iw).mat(O, ckk).transpose() * dymat.mat(O, ncols);
                detail::col2im3d_add(dcols.data(), B, C, D, H, Wd, kd, kh, kw, sd, sh, sw, pd, ph, pw, Do,
                                     Ho, Wo, g.grad_buf(ix).data());
            }
        });
    return {&g, out};
}

namespace detail {

// 2x bilinear taps (align_corners=false, edge clamp): index and weight pairs.
struct UpTap {
    Index i0, i1;
    double w0, w1;
};
inline std::vector<UpTap> up2_taps(Index n) {
    std::vector<UpTap> taps(static_cast<size_t>(2 * n));
    for (Index i = 0; i < 2 * n; ++i) {
        double src = (static_cast<double>(i) + 0.5) / 2.0 - 0.5;
        Index lo = static_cast<Index>(std::floor(src));
        double w1 = src - static_cast<double>(lo);
        Index i0 = std::clamp<Index>(lo, 0, n - 1);
        Index i1 = std::clamp<Index>(lo + 1, 0, n - 1);
        taps[static_cast<size_t>(i)] = {i0, i1, 1.0 - w1, w1};
    }
    return taps;
}

}  // namespace detail

// x [B,C,H,W] -> [B,C,2H,2W]
template <typename Scalar>
Value<Scalar> bilinear_up2(Value<Scalar> x) {
    Graph<Scalar>& g = *x.g;
    const Tensor<Scalar>& X = x.tensor();
    assert(X.rank() == 4);
    Index B = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
    auto ty = detail::up2_taps(H);
    auto tx = detail::up2_taps(W);
    Tensor<Scalar> y({B, C, 2 * H, 2 * W});
    for (Index bc = 0; bc < B * C; ++bc) {
        const Scalar* src = X.data() + bc * H * W;
        Scalar* dst = y.data() + bc * 4 * H * W;
        for (Index i = 0; i < 2 * H; ++i) {
            const auto& t0 = ty[static_cast<size_t>(i)];
            for (Index j = 0; j < 2 * W; ++j) {
                const auto& t1 = tx[static_cast<size_t>(j)];
                double v = t0.w0 * (t1.w0 * src[t0.i0 * W + t1.i0] + t1.w1 * src[t0.i0 * W + t1.i1]) +
                           t0.w1 * (t1.w0 * src[t0.i1 * W + t1.i0] + t1.w1 * src[t0.i1 * W + t1.i1]);
                dst[i * 2 * W + j] = static_cast<Scalar>(v);
            }
        }
    }
    bool req = g.needs_grad(x.id);
    int out = g.add_node(std::move(y), req);
    if (req)
        g.set_back(out, [out, ix = x.id, B, C, H, W, ty, tx](Graph<Scalar>& g) {
            const auto& dy = g.grad(out);
            auto& dx = g.grad_buf(ix);
            for (Index bc = 0; bc < B * C; ++bc) {
                Scalar* dsrc = dx.data() + bc * H * W;
                const Scalar* ddst = dy.data() + bc * 4 * H * W;
                for (Index i = 0; i < 2 * H; ++i) {
                    const auto& t0 = ty[static_cast<size_t>(i)];
                    for (Index j = 0; j < 2 * W; ++j) {
                        const auto& t1 = tx[static_cast<size_t>(j)];
                        Scalar d = ddst[i * 2 * W + j];
                        dsrc[t0.i0 * W + t1.i0] += static_cast<Scalar>(t0.w0 * t1.w0) * d;
                        dsrc[t0.i0 * W + t1.i1] += static_cast<Scalar>(t0.w0 * t1.w1) * d;
                        dsrc[t0.i1 * W + t1.i0] += static_cast<Scalar>(t0.w1 * t1.w0) * d;
                        dsrc[t0.i1 * W + t1.i1] += static_cast<Scalar>(t0.w1 * t1.w1) * d;
                    }
                }
            }
        });
    return {&g, out};
}

// Normalize each output-channel slice (dim 0) to unit L2 norm: w_o / (||w_o|| + eps).
template <typename Scalar>
Value<Scalar> demodulate_outch(Value<Scalar> w, Scalar eps = Scalar(1e-8)) {
    Graph<Scalar>& g = *w.g;
    const Tensor<Scalar>& W = w.tensor();
    Index O = W.dim(0), L = W.size() / O;
    Tensor<Scalar> y(W.shape());
    auto Wm = W.mat(O, L);
    auto Ym = y.mat(O, L);
    for (Index o = 0; o < O; ++o) {
        Scalar n = Wm.row(o).norm();
        Ym.row(o) = Wm.row(o) / (n + eps);
    }
    bool req = g.needs_grad(w.id);
    int out = g.add_node(std::move(y), req);
    if (req)
        g.set_back(out, [out, iw = w.id, O, L, eps](Graph<Scalar>& g) {
            auto dYm = g.grad(out).mat(O, L);
            auto Wm = g.val(iw).mat(O, L);
            auto dWm = g.grad_buf(iw).mat(O, L);
            for (Index o = 0; o < O; ++o) {
                Scalar n = Wm.row(o).norm();
                Scalar d = n + eps;
                Scalar dot = Wm.row(o).dot(dYm.row(o));
                if (n > Scalar(1e-30))
                    dWm.row(o) += dYm.row(o) / d - Wm.row(o) * (dot / (n * d * d));
                else
                    dWm.row(o) += dYm.row(o) / d;
            }
        });
    return {&g, out};
}

// y = base with base[o0:o0+bo, i0:i0+bi, :, :] replaced by block.
template <typename Scalar>
Value<Scalar> assign_block4(Value<Scalar> base, Value<Scalar> block, Index o0, Index i0) {
    Graph<Scalar>& g = *base.g;
    const Tensor<Scalar>& Bt = base.tensor();
    const Tensor<Scalar>& K = block.tensor();
    assert(Bt.rank() == 4 && K.rank() == 4 && Bt.dim(2) == K.dim(2) && Bt.dim(3) == K.dim(3));
    Index O = Bt.dim(0), I = Bt.dim(1), kh = Bt.dim(2), kw = Bt.dim(3);
    Index bo = K.dim(0), bi = K.dim(1);
    assert(o0 + bo <= O && i0 + bi <= I);
    Tensor<Scalar> y = Bt;
    const Index kk = kh * kw;
    for (Index oo = 0; oo < bo; ++oo)
        for (Index ii = 0; ii < bi; ++ii)
            std::copy_n(K.data() + (oo * bi + ii) * kk, kk, y.data() + ((o0 + oo) * I + i0 + ii) * kk);
    bool req = g.needs_grad(base.id) || g.needs_grad(block.id);
    int out = g.add_node(std::move(y), req);
    if (req)
        g.set_back(out, [out, ibase = base.id, iblk = block.id, O, I, kk, bo, bi, o0, i0](Graph<Scalar>& g) {
            const auto& dy = g.grad(out);
            if (g.needs_grad(ibase)) {
                auto& db = g.grad_buf(ibase);
                for (Index o = 0; o < O; ++o)
                    for (Index i = 0; i < I; ++i) {
                        bool in_block = o >= o0 && o < o0 + bo && i >= i0 && i < i0 + bi;
                        if (in_block) continue;
                        const Scalar* src = dy.data() + (o * I + i) * kk;
                        Scalar* dst = db.data() + (o * I + i) * kk;
                        for (Index k = 0; k < kk; ++k) dst[k] += src[k];
                    }
            }
            if (g.needs_grad(iblk)) {
                auto& dk = g.grad_buf(iblk);
                for (Index oo = 0; oo < bo; ++oo)
                    for (Index ii = 0; ii < bi; ++ii) {
                        const Scalar* src = dy.data() + ((o0 + oo) * I + i0 + ii) * kk;
                        Scalar* dst = dk.data() + (oo * bi + ii) * kk;
                        for (Index k = 0; k < kk; ++k) dst[k] += src[k];
                    }
            }
        });
    return {&g, out};
}

// ---------------------------------------------------------------------------
// attention

template <typename Scalar>
Value<Scalar> multihead_self_attention(Value<Scalar> x, Value<Scalar> wqkv, Value<Scalar> bqkv,
                                       Value<Scalar> wo, Value<Scalar> bo, Index heads) {
    Index hidden = x.dim(1);
    Index dh = hidden / heads;
    Value<Scalar> qkv = linear(x, wqkv, bqkv);  // [S, 3*hidden]
    std::vector<Value<Scalar>> outs;
    outs.reserve(static_cast<size_t>(heads));
    Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
    for (Index h = 0; h < heads; ++h) {
        Value<Scalar> q = slice_cols(qkv, h * dh, dh);
        Value<Scalar> k = slice_cols(qkv, hidden + h * dh, dh);
        Value<Scalar> v = slice_cols(qkv, 2 * hidden + h * dh, dh);
        Value<Scalar> att = softmax_rows(scale(matmul(q, k, false, true), inv_sqrt));
        outs.push_back(matmul(att, v));
    }
    return linear(concat_cols(outs), wo, bo);
}

}  // namespace nervdiff
