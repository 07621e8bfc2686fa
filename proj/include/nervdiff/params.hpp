#pragma once

#include "nervdiff/graph.hpp"
#include "nervdiff/random.hpp"

#include <cmath>
#include <map>
#include <string>

namespace nervdiff {

template <typename Scalar>
struct Param {
    std::string name;
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    Tensor<Scalar> adam_m;
    Tensor<Scalar> adam_v;
    bool trainable = true;  // false: buffer (serialized, never optimized)
};

// Named parameter registry; iteration order is the sorted name order.
template <typename Scalar>
class ParamStore {
public:
    Param<Scalar>& create(const std::string& name, Tensor<Scalar> init, bool trainable = true) {
        auto [it, inserted] = params_.try_emplace(name);
        assert(inserted && "duplicate parameter name");
        Param<Scalar>& p = it->second;
        p.name = name;
        p.grad = Tensor<Scalar>::zeros(init.shape());
        if (trainable) {
            p.adam_m = Tensor<Scalar>::zeros(init.shape());
            p.adam_v = Tensor<Scalar>::zeros(init.shape());
        }
        p.value = std::move(init);
        p.trainable = trainable;
        return p;
    }

    Param<Scalar>& at(const std::string& name) { return params_.at(name); }
    const Param<Scalar>& at(const std::string& name) const { return params_.at(name); }
    bool contains(const std::string& name) const { return params_.count(name) > 0; }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    size_t size() const { return params_.size(); }

    void zero_grads() {
        for (auto& [name, p] : params_) p.grad.set_zero();
    }

    Index trainable_count() const {
        Index n = 0;
        for (auto& [name, p] : params_)
            if (p.trainable) n += p.value.size();
        return n;
    }

private:
    std::map<std::string, Param<Scalar>> params_;
};

// Differentiable use of a parameter in a graph; gradients flush into p.grad.
template <typename Scalar>
Value<Scalar> use(Graph<Scalar>& g, Param<Scalar>& p) {
    return g.input(p.value, &p.grad);
}

template <typename Scalar>
Value<Scalar> use_frozen(Graph<Scalar>& g, const Param<Scalar>& p) {
    return g.leaf(p.value, false);
}

// Decoupled weight decay Adam.
template <typename Scalar>
class AdamW {
public:
    AdamW(Scalar beta1 = Scalar(0.9), Scalar beta2 = Scalar(0.999), Scalar eps = Scalar(1e-8),
          Scalar weight_decay = Scalar(0))
        : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

    void step(ParamStore<Scalar>& store, Scalar lr) {
        ++t_;
        Scalar bc1 = Scalar(1) - std::pow(beta1_, static_cast<Scalar>(t_));
        Scalar bc2 = Scalar(1) - std::pow(beta2_, static_cast<Scalar>(t_));
        for (auto& [name, p] : store) {
            if (!p.trainable) continue;
            auto gv = p.grad.array();
            auto m = p.adam_m.array();
            auto v = p.adam_v.array();
            m = beta1_ * m + (Scalar(1) - beta1_) * gv;
            v = beta2_ * v + (Scalar(1) - beta2_) * gv.square();
            p.value.array() -= lr * ((m / bc1) / ((v / bc2).sqrt() + eps_) + weight_decay_ * p.value.array());
        }
        store.zero_grads();
    }

    long step_count() const { return t_; }
    void set_step_count(long t) { t_ = t; }

private:
    Scalar beta1_, beta2_, eps_, weight_decay_;
    long t_ = 0;
};

// Linear warmup then cosine decay to zero.
inline double lr_at(long step, long total_steps, double base_lr, double warmup_frac) {
    long warmup = std::max<long>(1, static_cast<long>(warmup_frac * static_cast<double>(total_steps)));
    if (step < warmup) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    double t = static_cast<double>(step - warmup) / std::max(1.0, static_cast<double>(total_steps - warmup));
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * std::min(1.0, t)));
}

// init helpers

template <typename Scalar>
Tensor<Scalar> init_normal(RngStream& rng, Shape shape, double std_dev) {
    return rng.normal_tensor<Scalar>(std::move(shape), std_dev);
}

template <typename Scalar>
Tensor<Scalar> init_kaiming_conv(RngStream& rng, Shape shape) {
    // shape [O, C, k...]: fan_in = C * prod(k)
    Index fan_in = 1;
    for (size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
    return rng.normal_tensor<Scalar>(std::move(shape), std::sqrt(2.0 / static_cast<double>(fan_in)));
}

template <typename Scalar>
Tensor<Scalar> init_xavier(RngStream& rng, Index in, Index out) {
    double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    return rng.uniform_tensor<Scalar>({in, out}, -bound, bound);
}

}  // namespace nervdiff
