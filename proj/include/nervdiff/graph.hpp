#pragma once

#include "nervdiff/tensor.hpp"

#include <cassert>
#include <cmath>
#include <functional>
#include <utility>
#include <vector>

namespace nervdiff {

// Reverse-mode tape over Tensor<Scalar>. Nodes are created in topological
// order; backward() walks them in reverse. Ops are free functions that
// register a closure reading values/grads by node id.
template <typename Scalar>
class Graph;

template <typename Scalar>
struct Value {
    Graph<Scalar>* g = nullptr;
    int id = -1;

    bool valid() const { return g != nullptr && id >= 0; }
    const Tensor<Scalar>& tensor() const;
    const Shape& shape() const;
    Index size() const { return tensor().size(); }
    Index dim(Index i) const { return tensor().dim(i); }
};

template <typename Scalar>
class Graph {
public:
    using BackFn = std::function<void(Graph&)>;

    Value<Scalar> leaf(Tensor<Scalar> v, bool requires_grad = false) {
        nodes_.push_back(Node{std::move(v), Tensor<Scalar>(), requires_grad, nullptr});
        return Value<Scalar>{this, static_cast<int>(nodes_.size() - 1)};
    }

    // Differentiable input whose gradient is flushed into *sink after backward().
    Value<Scalar> input(const Tensor<Scalar>& v, Tensor<Scalar>* sink) {
        Value<Scalar> out = leaf(v, true);
        if (sink) bindings_.emplace_back(out.id, sink);
        return out;
    }

    int add_node(Tensor<Scalar> value, bool requires_grad) {
        nodes_.push_back(Node{std::move(value), Tensor<Scalar>(), requires_grad, nullptr});
        return static_cast<int>(nodes_.size() - 1);
    }
    void set_back(int id, BackFn fn) { nodes_[static_cast<size_t>(id)].back = std::move(fn); }

    const Tensor<Scalar>& val(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    bool needs_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
    bool has_grad(int id) const { return !nodes_[static_cast<size_t>(id)].grad.empty(); }

    // Gradient buffer, allocated as zeros on first touch.
    Tensor<Scalar>& grad_buf(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.empty()) n.grad = Tensor<Scalar>::zeros(n.value.shape());
        return n.grad;
    }
    const Tensor<Scalar>& grad(int id) const { return nodes_[static_cast<size_t>(id)].grad; }
    const Tensor<Scalar>& grad(Value<Scalar> v) const { return grad(v.id); }

    void backward(Value<Scalar> loss) {
        assert(loss.g == this && nodes_[static_cast<size_t>(loss.id)].value.size() == 1);
        grad_buf(loss.id)[0] = Scalar(1);
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.back && !n.grad.empty()) n.back(*this);
        }
        for (auto& [id, sink] : bindings_) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (!n.grad.empty()) sink->array() += n.grad.array();
        }
    }

    void clear() {
        nodes_.clear();
        bindings_.clear();
    }
    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor<Scalar> value;
        Tensor<Scalar> grad;
        bool requires_grad = false;
        BackFn back;
    };
    std::vector<Node> nodes_;
    std::vector<std::pair<int, Tensor<Scalar>*>> bindings_;
};

template <typename Scalar>
const Tensor<Scalar>& Value<Scalar>::tensor() const {
    return g->val(id);
}
template <typename Scalar>
const Shape& Value<Scalar>::shape() const {
    return g->val(id).shape();
}

// ---------------------------------------------------------------------------
// elementwise ops

template <typename Scalar>
Value<Scalar> add(Value<Scalar> a, Value<Scalar> b) {
    Graph<Scalar>& g = *a.g;
    assert(a.tensor().size() == b.tensor().size());
    Tensor<Scalar> y(a.shape());
    y.array() = a.tensor().array() + b.tensor().array();
    bool req = g.needs_grad(a.id) || g.needs_grad(b.id);
    int out = g.add_node(std::move(y), req);
    if (req)
        g.set_back(out, [out, ia = a.id, ib = b.id](Graph<Scalar>& g) {
            const auto& dy = g.grad(out);
            if (g.needs_grad(ia)) g.grad_buf(ia).array() += dy.array();
            if (g.needs_grad(ib)) g.grad_buf(ib).array() += dy.array();
        });
    return {&g, out};
}

template <typename Scalar>
Value<Scalar> sub(Value<Scalar> a, Value<Scalar> b) {
    Graph<Scalar>& g = *a.g;
    assert(a.tensor().size() == b.tensor().size());
    Tensor<Scalar> y(a.shape());
    y.array() = a.tensor().array() - b.tensor().array();
    bool req = g.needs_grad(a.id) || g.needs_grad(b.id);
    int out = g.add_node(std::move(y), req);
    if (req)
        g.set_back(out, [out, ia = a.id, ib = b.id](Graph<Scalar>& g) {
            const auto& dy = g.grad(out);
            if (g.needs_grad(ia)) g.grad_buf(ia).array() += dy.array();
            if (g.needs_grad(ib)) g.grad_buf(ib).array() -= dy.array();
        });
    return {&g, out};
}

template <typename Scalar>
Value<Scalar> mul(Value<Scalar> a, Value<Scalar> b) {
    Graph<Scalar>& g = *a.g;
    assert(a.tensor().size() == b.tensor().size());
    Tensor<Scalar> y(a.shape());
    y.array() = a.tensor().array() * b.tensor().array();
    bool req = g.needs_grad(a.id) || g.needs_grad(b.id);
    int out = g.add_node(std::move(y), req);
    if (req)
        g.set_back(out, [out, ia = a.id, ib = b.id](Graph<Scalar>& g) {
            const auto& dy = g.grad(out);
            if (g.needs_grad(ia)) g.grad_buf(ia).array() += dy.array() * g.val(ib).array();
            if (g.needs_grad(ib)) g.grad_buf(ib).array() += dy.array() * g.val(ia).array();
        });
    return {&g, out};
}

template <typename Scalar>
Value<Scalar> scale(Value<Scalar> a, Scalar c) {
    Graph<Scalar>& g = *a.g;
    Tensor<Scalar> y(a.shape());
    y.array() = a.tensor().array() * c;
    bool req = g.needs_grad(a.id);
    int out = g.add_node(std::move(y), req);
    if (req)
        g.set_back(out, [out, ia = a.id, c](Graph<Scalar>& g) {
            g.grad_buf(ia).array() += g.grad(out).array() * c;
        });
    return {&g, out};
}

template <typename Scalar, typename Fwd, typename Dfn>
Value<Scalar> unary_op(Value<Scalar> a, Fwd fwd, Dfn dfn) {
    Graph<Scalar>& g = *a.g;
    Tensor<Scalar> y(a.shape());
    const auto& x = a.tensor();
    for (Index i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
    bool req = g.needs_grad(a.id);
    int out = g.add_node(std::move(y), req);
    if (req)
        g.set_back(out, [out, ia = a.id, dfn](Graph<Scalar>& g) {
            const auto& dy = g.grad(out);
            const auto& x = g.val(ia);
            const auto& y = g.val(out);
            auto& dx = g.grad_buf(ia);
            for (Index i = 0; i < x.size(); ++i) dx[i] += dy[i] * dfn(x[i], y[i]);
        });
    return {&g, out};
}

template <typename Scalar>
Value<Scalar> exp_op(Value<Scalar> a) {
    return unary_op(
        a, [](Scalar x) { return std::exp(x); }, [](Scalar, Scalar y) { return y; });
}

template <typename Scalar>
Value<Scalar> tanh_op(Value<Scalar> a) {
    return unary_op(
        a, [](Scalar x) { return std::tanh(x); }, [](Scalar, Scalar y) { return Scalar(1) - y * y; });
}

template <typename Scalar>
Value<Scalar> sigmoid_op(Value<Scalar> a) {
    return unary_op(
        a, [](Scalar x) { return Scalar(1) / (Scalar(1) + std::exp(-x)); },
        [](Scalar, Scalar y) { return y * (Scalar(1) - y); });
}

template <typename Scalar>
Value<Scalar> softplus_op(Value<Scalar> a) {
    return unary_op(
        a,
        [](Scalar x) {
            if (x > Scalar(30)) return x;
            if (x < Scalar(-30)) return std::exp(x);
            return std::log1p(std::exp(x));
        },
        [](Scalar x, Scalar) { return Scalar(1) / (Scalar(1) + std::exp(-x)); });
}

template <typename Scalar>
Value<Scalar> gelu_op(Value<Scalar> a) {
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    return unary_op(
        a,
        [=](Scalar x) { return Scalar(0.5) * x * (Scalar(1) + Scalar(std::erf(double(x) * kInvSqrt2))); },
        [=](Scalar x, Scalar) {
            double cdf = 0.5 * (1.0 + std::erf(double(x) * kInvSqrt2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * double(x) * double(x));
            return Scalar(cdf + double(x) * pdf);
        });
}

template <typename Scalar>
Value<Scalar> silu_op(Value<Scalar> a) {
    return unary_op(
        a,
        [](Scalar x) { return x / (Scalar(1) + std::exp(-x)); },
        [](Scalar x, Scalar) {
            Scalar s = Scalar(1) / (Scalar(1) + std::exp(-x));
            return s * (Scalar(1) + x * (Scalar(1) - s));
        });
}

template <typename Scalar>
Value<Scalar> leaky_relu_op(Value<Scalar> a, Scalar slope) {
    return unary_op(
        a, [slope](Scalar x) { return x > Scalar(0) ? x : slope * x; },
        [slope](Scalar x, Scalar) { return x > Scalar(0) ? Scalar(1) : slope; });
}

template <typename Scalar>
Value<Scalar> clamp_op(Value<Scalar> a, Scalar lo, Scalar hi) {
    return unary_op(
        a, [lo, hi](Scalar x) { return x < lo ? lo : (x > hi ? hi : x); },
        [lo, hi](Scalar x, Scalar) { return (x >= lo && x <= hi) ? Scalar(1) : Scalar(0); });
}

template <typename Scalar>
Value<Scalar> stop_gradient(Value<Scalar> a) {
    return a.g->leaf(a.tensor(), false);
}

// ---------------------------------------------------------------------------
// reductions

template <typename Scalar>
Value<Scalar> sum_all(Value<Scalar> a) {
    Graph<Scalar>& g = *a.g;
    Tensor<Scalar> y = Tensor<Scalar>::scalar(a.tensor().array().sum());
    bool req = g.needs_grad(a.id);
    int out = g.add_node(std::move(y), req);
    if (req)
        g.set_back(out, [out, ia = a.id](Graph<Scalar>& g) {
            g.grad_buf(ia).array() += g.grad(out)[0];
        });
    return {&g, out};
}

template <typename Scalar>
Value<Scalar> mean_all(Value<Scalar> a) {
    Graph<Scalar>& g = *a.g;
    Index n = a.tensor().size();
    Tensor<Scalar> y = Tensor<Scalar>::scalar(a.tensor().array().sum() / Scalar(n));
    bool req = g.needs_grad(a.id);
    int out = g.add_node(std::move(y), req);
    if (req)
        g.set_back(out, [out, ia = a.id, n](Graph<Scalar>& g) {
            g.grad_buf(ia).array() += g.grad(out)[0] / Scalar(n);
        });
    return {&g, out};
}

// mean((a-b)^2)
template <typename Scalar>
Value<Scalar> mse(Value<Scalar> a, Value<Scalar> b) {
    Value<Scalar> d = sub(a, b);
    return mean_all(mul(d, d));
}

// ---------------------------------------------------------------------------
// shape ops

template <typename Scalar>
Value<Scalar> reshape(Value<Scalar> a, Shape shape) {
    Graph<Scalar>& g = *a.g;
    Tensor<Scalar> y = a.tensor().reshaped(shape);
    bool req = g.needs_grad(a.id);
    int out = g.add_node(std::move(y), req);
    if (req)
        g.set_back(out, [out, ia = a.id](Graph<Scalar>& g) {
            g.grad_buf(ia).array() += g.grad(out).array();
        });
    return {&g, out};
}

// [d0, d1, rest] -> [d1, d0, rest]
template <typename Scalar>
Value<Scalar> swap_axes01(Value<Scalar> a) {
    Graph<Scalar>& g = *a.g;
    const Tensor<Scalar>& x = a.tensor();
    assert(x.rank() >= 2);
    Index d0 = x.dim(0), d1 = x.dim(1), rest = x.size() / (d0 * d1);
    Shape yshape = x.shape();
    std::swap(yshape[0], yshape[1]);
    Tensor<Scalar> y(yshape);
    for (Index i = 0; i < d0; ++i)
        for (Index j = 0; j < d1; ++j)
            std::copy_n(x.data() + (i * d1 + j) * rest, rest, y.data() + (j * d0 + i) * rest);
    bool req = g.needs_grad(a.id);
    int out = g.add_node(std::move(y), req);
    if (req)
        g.set_back(out, [out, ia = a.id, d0, d1, rest](Graph<Scalar>& g) {
            const auto& dy = g.grad(out);
            auto& dx = g.grad_buf(ia);
            for (Index j = 0; j < d1; ++j)
                for (Index i = 0; i < d0; ++i) {
                    const Scalar* src = dy.data() + (j * d0 + i) * rest;
                    Scalar* dst = dx.data() + (i * d1 + j) * rest;
                    for (Index k = 0; k < rest; ++k) dst[k] += src[k];
                }
        });
    return {&g, out};
}

template <typename Scalar>
Value<Scalar> slice_rows(Value<Scalar> a, Index r0, Index n) {
    Graph<Scalar>& g = *a.g;
    const Tensor<Scalar>& x = a.tensor();
    Index rows = x.dim(0), cols = x.size() / rows;
    assert(r0 >= 0 && r0 + n <= rows);
    Shape yshape = x.shape();
    yshape[0] = n;
    Tensor<Scalar> y(yshape);
    std::copy_n(x.data() + r0 * cols, n * cols, y.data());
    bool req = g.needs_grad(a.id);
    int out = g.add_node(std::move(y), req);
    if (req)
        g.set_back(out, [out, ia = a.id, r0, n, cols](Graph<Scalar>& g) {
            const auto& dy = g.grad(out);
            auto& dx = g.grad_buf(ia);
            for (Index i = 0; i < n * cols; ++i) dx[r0 * cols + i] += dy[i];
        });
    return {&g, out};
}

template <typename Scalar>
Value<Scalar> concat_rows(const std::vector<Value<Scalar>>& parts) {
    assert(!parts.empty());
    Graph<Scalar>& g = *parts[0].g;
    Index cols = parts[0].tensor().size() / parts[0].tensor().dim(0);
    Index rows = 0;
    bool req = false;
    for (const auto& p : parts) {
        assert(p.tensor().size() / p.tensor().dim(0) == cols);
        rows += p.tensor().dim(0);
        req = req || g.needs_grad(p.id);
    }
    Shape yshape = parts[0].tensor().shape();
    yshape[0] = rows;
    Tensor<Scalar> y(yshape);
    Index off = 0;
    std::vector<std::pair<int, Index>> spans;  // (id, row count)
    for (const auto& p : parts) {
        Index pn = p.tensor().size();
        std::copy_n(p.tensor().data(), pn, y.data() + off);
        spans.emplace_back(p.id, pn);
        off += pn;
    }
    int out = g.add_node(std::move(y), req);
    if (req)
        g.set_back(out, [out, spans](Graph<Scalar>& g) {
            const auto& dy = g.grad(out);
            Index off = 0;
            for (auto& [id, pn] : spans) {
                if (g.needs_grad(id)) {
                    auto& dx = g.grad_buf(id);
                    for (Index i = 0; i < pn; ++i) dx[i] += dy[off + i];
                }
                off += pn;
            }
        });
    return {&g, out};
}

template <typename Scalar>
Value<Scalar> slice_cols(Value<Scalar> a, Index c0, Index n) {
    Graph<Scalar>& g = *a.g;
    const Tensor<Scalar>& x = a.tensor();
    assert(x.rank() == 2);
    Index rows = x.dim(0), cols = x.dim(1);
    assert(c0 >= 0 && c0 + n <= cols);
    Tensor<Scalar> y({rows, n});
    y.mat(rows, n) = x.mat(rows, cols).middleCols(c0, n);
    bool req = g.needs_grad(a.id);
    int out = g.add_node(std::move(y), req);
    if (req)
        g.set_back(out, [out, ia = a.id, c0, n, rows, cols](Graph<Scalar>& g) {
            g.grad_buf(ia).mat(rows, cols).middleCols(c0, n) += g.grad(out).mat(rows, n);
        });
    return {&g, out};
}

template <typename Scalar>
Value<Scalar> concat_cols(const std::vector<Value<Scalar>>& parts) {
    assert(!parts.empty());
    Graph<Scalar>& g = *parts[0].g;
    Index rows = parts[0].tensor().dim(0);
    Index cols = 0;
    bool req = false;
    for (const auto& p : parts) {
        assert(p.tensor().rank() == 2 && p.tensor().dim(0) == rows);
        cols += p.tensor().dim(1);
        req = req || g.needs_grad(p.id);
    }
    Tensor<Scalar> y({rows, cols});
    Index off = 0;
    std::vector<std::pair<int, Index>> spans;
    for (const auto& p : parts) {
        Index pc = p.tensor().dim(1);
        y.mat(rows, cols).middleCols(off, pc) = p.tensor().mat(rows, pc);
        spans.emplace_back(p.id, pc);
        off += pc;
    }
    int out = g.add_node(std::move(y), req);
    if (req)
        g.set_back(out, [out, spans, rows, cols](Graph<Scalar>& g) {
            const auto& dy = g.grad(out);
            Index off = 0;
            for (auto& [id, pc] : spans) {
                if (g.needs_grad(id)) g.grad_buf(id).mat(rows, pc) += dy.mat(rows, cols).middleCols(off, pc);
                off += pc;
            }
        });
    return {&g, out};
}

// flatten and cyclically repeat to m elements: y[i] = a[i % n]
template <typename Scalar>
Value<Scalar> repeat_to(Value<Scalar> a, Index m) {
    Graph<Scalar>& g = *a.g;
    const Tensor<Scalar>& x = a.tensor();
    Index n = x.size();
    Tensor<Scalar> y({m});
    for (Index i = 0; i < m; ++i) y[i] = x[i % n];
    bool req = g.needs_grad(a.id);
    int out = g.add_node(std::move(y), req);
    if (req)
        g.set_back(out, [out, ia = a.id, n, m](Graph<Scalar>& g) {
            const auto& dy = g.grad(out);
            auto& dx = g.grad_buf(ia);
            for (Index i = 0; i < m; ++i) dx[i % n] += dy[i];
        });
    return {&g, out};
}

// [1, C] -> [n, C]
template <typename Scalar>
Value<Scalar> tile_rows(Value<Scalar> a, Index n) {
    Graph<Scalar>& g = *a.g;
    const Tensor<Scalar>& x = a.tensor();
    Index cols = x.size();
    Tensor<Scalar> y({n, cols});
    for (Index i = 0; i < n; ++i) std::copy_n(x.data(), cols, y.data() + i * cols);
    bool req = g.needs_grad(a.id);
    int out = g.add_node(std::move(y), req);
    if (req)
        g.set_back(out, [out, ia = a.id, n, cols](Graph<Scalar>& g) {
            const auto& dy = g.grad(out);
            auto& dx = g.grad_buf(ia);
            dx.array() += dy.mat(n, cols).colwise().sum().transpose().array();
        });
    return {&g, out};
}

// ---------------------------------------------------------------------------
// matmul and broadcasts (2-d)

template <typename Scalar>
Value<Scalar> matmul(Value<Scalar> a, Value<Scalar> b, bool trans_a = false, bool trans_b = false) {
    Graph<Scalar>& g = *a.g;
    const Tensor<Scalar>& A = a.tensor();
    const Tensor<Scalar>& B = b.tensor();
    assert(A.rank() == 2 && B.rank() == 2);
    Index m = trans_a ? A.dim(1) : A.dim(0);
    Index k = trans_a ? A.dim(0) : A.dim(1);
    Index k2 = trans_b ? B.dim(1) : B.dim(0);
    Index n = trans_b ? B.dim(0) : B.dim(1);
    assert(k == k2);
    (void)k2;
    Tensor<Scalar> y({m, n});
    auto Am = A.mat2();
    auto Bm = B.mat2();
    auto Ym = y.mat(m, n);
    if (!trans_a && !trans_b)
        Ym.noalias() = Am * Bm;
    else if (!trans_a && trans_b)
        Ym.noalias() = Am * Bm.transpose();
    else if (trans_a && !trans_b)
        Ym.noalias() = Am.transpose() * Bm;
    else
        Ym.noalias() = Am.transpose() * Bm.transpose();
    bool req = g.needs_grad(a.id) || g.needs_grad(b.id);
    int out = g.add_node(std::move(y), req);
    if (req)
        g.set_back(out, [out, ia = a.id, ib = b.id, trans_a, trans_b, m, n](Graph<Scalar>& g) {
            auto dY = g.grad(out).mat(m, n);
            const auto& A = g.val(ia);
            const auto& B = g.val(ib);
            auto Am = A.mat2();
            auto Bm = B.mat2();
            if (g.needs_grad(ia)) {
                auto dA = g.grad_buf(ia).mat2();
                if (!trans_a && !trans_b)
                    dA.noalias() += dY * Bm.transpose();
                else if (!trans_a && trans_b)
                    dA.noalias() += dY * Bm;
                else if (trans_a && !trans_b)
                    dA.noalias() += Bm * dY.transpose();
                else
                    dA.noalias() += Bm.transpose() * dY.transpose();
            }
            if (g.needs_grad(ib)) {
                auto dB = g.grad_buf(ib).mat2();
                if (!trans_a && !trans_b)
                    dB.noalias() += Am.transpose() * dY;
                else if (!trans_a && trans_b)
                    dB.noalias() += dY.transpose() * Am;
                else if (trans_a && !trans_b)
                    dB.noalias() += Am * dY;
                else
                    dB.noalias() += dY.transpose() * Am.transpose();
            }
        });
    return {&g, out};
}

template <typename Scalar>
Value<Scalar> add_rowvec(Value<Scalar> x, Value<Scalar> v) {
    Graph<Scalar>& g = *x.g;
    const Tensor<Scalar>& X = x.tensor();
    Index rows = X.dim(0), cols = X.size() / X.dim(0);
    assert(v.tensor().size() == cols);
    Tensor<Scalar> y(X.shape());
    y.mat(rows, cols) = X.mat(rows, cols).rowwise() + v.tensor().mat(1, cols).row(0);
    bool req = g.needs_grad(x.id) || g.needs_grad(v.id);
    int out = g.add_node(std::move(y), req);
    if (req)
        g.set_back(out, [out, ix = x.id, iv = v.id, rows, cols](Graph<Scalar>& g) {
            const auto& dy = g.grad(out);
            if (g.needs_grad(ix)) g.grad_buf(ix).array() += dy.array();
            if (g.needs_grad(iv))
                g.grad_buf(iv).mat(1, cols).row(0) += dy.mat(rows, cols).colwise().sum();
        });
    return {&g, out};
}

template <typename Scalar>
Value<Scalar> mul_rowvec(Value<Scalar> x, Value<Scalar> v) {
    Graph<Scalar>& g = *x.g;
    const Tensor<Scalar>& X = x.tensor();
    Index rows = X.dim(0), cols = X.size() / X.dim(0);
    assert(v.tensor().size() == cols);
    Tensor<Scalar> y(X.shape());
    y.mat(rows, cols) = X.mat(rows, cols).array().rowwise() * v.tensor().mat(1, cols).row(0).array();
    bool req = g.needs_grad(x.id) || g.needs_grad(v.id);
    int out = g.add_node(std::move(y), req);
    if (req)
        g.set_back(out, [out, ix = x.id, iv = v.id, rows, cols](Graph<Scalar>& g) {
            const auto& dy = g.grad(out);
            const auto& X = g.val(ix);
            const auto& V = g.val(iv);
            if (g.needs_grad(ix))
                g.grad_buf(ix).mat(rows, cols).array() +=
                    dy.mat(rows, cols).array().rowwise() * V.mat(1, cols).row(0).array();
            if (g.needs_grad(iv))
                g.grad_buf(iv).mat(1, cols).row(0) +=
                    (dy.mat(rows, cols).array() * X.mat(rows, cols).array()).colwise().sum().matrix();
        });
    return {&g, out};
}

// x [S, in] * W [in, out] + b
template <typename Scalar>
Value<Scalar> linear(Value<Scalar> x, Value<Scalar> w, Value<Scalar> b) {
    return add_rowvec(matmul(x, w), b);
}

template <typename Scalar>
Value<Scalar> softmax_rows(Value<Scalar> a) {
    Graph<Scalar>& g = *a.g;
    const Tensor<Scalar>& x = a.tensor();
    Index rows = x.dim(0), cols = x.size() / x.dim(0);
    Tensor<Scalar> y(x.shape());
    auto Xm = x.mat(rows, cols);
    auto Ym = y.mat(rows, cols);
    for (Index i = 0; i < rows; ++i) {
        Scalar mx = Xm.row(i).maxCoeff();
        Ym.row(i) = (Xm.row(i).array() - mx).exp();
        Ym.row(i) /= Ym.row(i).sum();
    }
    bool req = g.needs_grad(a.id);
    int out = g.add_node(std::move(y), req);
    if (req)
        g.set_back(out, [out, ia = a.id, rows, cols](Graph<Scalar>& g) {
            const auto& dy = g.grad(out);
            const auto& y = g.val(out);
            auto dYm = dy.mat(rows, cols);
            auto Ym = y.mat(rows, cols);
            auto dXm = g.grad_buf(ia).mat(rows, cols);
            for (Index i = 0; i < rows; ++i) {
                Scalar dot = (dYm.row(i).array() * Ym.row(i).array()).sum();
                dXm.row(i).array() += (dYm.row(i).array() - dot) * Ym.row(i).array();
            }
        });
    return {&g, out};
}

}  // namespace nervdiff
