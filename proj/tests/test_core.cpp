#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "nervdiff/nn_ops.hpp"
#include "nervdiff/params.hpp"
#include "nervdiff/random.hpp"

#include <functional>
#include <vector>

using namespace nervdiff;

namespace {

using D = double;
using LossFn = std::function<Value<D>(Graph<D>&, std::vector<Value<D>>&)>;

double eval_loss(const LossFn& f, const std::vector<Tensor<D>>& inputs) {
    Graph<D> g;
    std::vector<Value<D>> vals;
    for (const auto& t : inputs) vals.push_back(g.leaf(t, false));
    return f(g, vals).tensor()[0];
}

// Central finite differences against tape gradients; returns max scaled error.
double grad_check(const LossFn& f, std::vector<Tensor<D>> inputs, double h = 1e-5) {
    Graph<D> g;
    std::vector<Value<D>> vals;
    std::vector<Tensor<D>> grads;
    grads.reserve(inputs.size());  // bindings hold pointers into this vector
    for (auto& t : inputs) {
        grads.push_back(Tensor<D>::zeros(t.shape()));
        vals.push_back(g.input(t, &grads.back()));
    }
    Value<D> loss = f(g, vals);
    g.backward(loss);

    double max_err = 0;
    for (size_t i = 0; i < inputs.size(); ++i) {
        for (Index j = 0; j < inputs[i].size(); ++j) {
            double orig = inputs[i][j];
            inputs[i][j] = orig + h;
            double lp = eval_loss(f, inputs);
            inputs[i][j] = orig - h;
            double lm = eval_loss(f, inputs);
            inputs[i][j] = orig;
            double fd = (lp - lm) / (2 * h);
            double an = grads[i][j];
            double err = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1.0});
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

Tensor<D> rnd(RngStream& rng, Shape s, double sd = 1.0) { return rng.normal_tensor<D>(std::move(s), sd); }

}  // namespace

TEST_CASE("tensor basics") {
    Tensor<float> t({2, 3});
    CHECK(t.size() == 6);
    t.at({1, 2}) = 5.f;
    CHECK(t[5] == 5.f);
    auto r = t.reshaped({3, 2});
    CHECK(r.dim(0) == 3);
    CHECK(r[5] == 5.f);
    CHECK(t.all_finite());
    t[0] = std::numeric_limits<float>::quiet_NaN();
    CHECK(!t.all_finite());
}

TEST_CASE("rng determinism and serialization") {
    RngStream a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.normal() == b.normal());
    std::string s = a.serialize();
    RngStream c = RngStream::deserialize(s);
    for (int i = 0; i < 100; ++i) CHECK(a.uniform() == c.uniform());
    RngStream f1 = a.fork(7), f2 = a.fork(7), f3 = a.fork(8);
    CHECK(f1.raw() == f2.raw());
    CHECK(f1.raw() != f3.raw());
}

TEST_CASE("rng normal moments") {
    RngStream rng(1);
    const int n = 200000;
    double s = 0, s2 = 0;
    for (int i = 0; i < n; ++i) {
        double x = rng.normal();
        s += x;
        s2 += x * x;
    }
    double mean = s / n, var = s2 / n - mean * mean;
    CHECK(std::abs(mean) < 0.01);
    CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("grad: elementwise and reductions") {
    RngStream rng(3);
    auto x = rnd(rng, {3, 4});
    auto y = rnd(rng, {3, 4});

    CHECK(grad_check([](Graph<D>& g, auto& v) { return mean_all(mul(add(v[0], v[1]), sub(v[0], v[1]))); },
                     {x, y}) < 1e-7);
    CHECK(grad_check([](Graph<D>& g, auto& v) { return sum_all(scale(v[0], 2.5)); }, {x}) < 1e-7);
    CHECK(grad_check([](Graph<D>& g, auto& v) { return mean_all(exp_op(v[0])); }, {x}) < 1e-7);
    CHECK(grad_check([](Graph<D>& g, auto& v) { return mean_all(tanh_op(v[0])); }, {x}) < 1e-7);
    CHECK(grad_check([](Graph<D>& g, auto& v) { return mean_all(sigmoid_op(v[0])); }, {x}) < 1e-7);
    CHECK(grad_check([](Graph<D>& g, auto& v) { return mean_all(softplus_op(v[0])); }, {x}) < 1e-7);
    CHECK(grad_check([](Graph<D>& g, auto& v) { return mean_all(gelu_op(v[0])); }, {x}) < 1e-7);
    CHECK(grad_check([](Graph<D>& g, auto& v) { return mean_all(silu_op(v[0])); }, {x}) < 1e-7);
    CHECK(grad_check([](Graph<D>& g, auto& v) { return mean_all(leaky_relu_op(v[0], 0.2)); }, {x}) < 1e-6);
    CHECK(grad_check([](Graph<D>& g, auto& v) { return mean_all(mse(v[0], v[1])); }, {x, y}) < 1e-7);
}

TEST_CASE("grad: matmul all transpose combinations") {
    RngStream rng(4);
    auto w = rnd(rng, {3, 5});
    for (bool ta : {false, true})
        for (bool tb : {false, true}) {
            Tensor<D> a = ta ? rnd(rng, {4, 2}) : rnd(rng, {2, 4});
            Tensor<D> b = tb ? rnd(rng, {3, 4}) : rnd(rng, {4, 3});
            CHECK(grad_check(
                      [ta, tb](Graph<D>& g, auto& v) {
                          return mean_all(mul(matmul(v[0], v[1], ta, tb), matmul(v[0], v[1], ta, tb)));
                      },
                      {a, b}) < 1e-7);
        }
    (void)w;
}

TEST_CASE("grad: shape ops") {
    RngStream rng(5);
    auto x = rnd(rng, {4, 6});
    auto y = rnd(rng, {2, 6});
    auto v = rnd(rng, {6});
    CHECK(grad_check([](Graph<D>& g, auto& vv) { return mean_all(reshape(vv[0], {6, 4})); }, {x}) < 1e-7);
    CHECK(grad_check([](Graph<D>& g, auto& vv) { return mean_all(mul(slice_rows(vv[0], 1, 2), vv[1])); },
                     {x, y}) < 1e-7);
    CHECK(grad_check(
              [](Graph<D>& g, auto& vv) {
                  std::vector<Value<D>> parts{vv[0], vv[1]};
                  return mean_all(mul(concat_rows(parts), concat_rows(parts)));
              },
              {x, y}) < 1e-7);
    CHECK(grad_check([](Graph<D>& g, auto& vv) { return mean_all(exp_op(slice_cols(vv[0], 2, 3))); }, {x}) < 1e-7);
    CHECK(grad_check(
              [](Graph<D>& g, auto& vv) {
                  std::vector<Value<D>> parts{slice_cols(vv[0], 0, 2), slice_cols(vv[0], 3, 3)};
                  return mean_all(tanh_op(concat_cols(parts)));
              },
              {x}) < 1e-7);
    CHECK(grad_check([](Graph<D>& g, auto& vv) { return mean_all(mul(add_rowvec(vv[0], vv[1]), vv[0])); },
                     {x, v}) < 1e-7);
    CHECK(grad_check([](Graph<D>& g, auto& vv) { return mean_all(mul(mul_rowvec(vv[0], vv[1]), vv[0])); },
                     {x, v}) < 1e-7);
    CHECK(grad_check(
              [](Graph<D>& g, auto& vv) {
                  auto t = tile_rows(vv[0], 5);
                  return mean_all(mul(t, t));
              },
              {rnd(rng, {1, 4})}) < 1e-7);
    CHECK(grad_check([](Graph<D>& g, auto& vv) { return mean_all(mul(swap_axes01(vv[0]), swap_axes01(vv[0]))); },
                     {rnd(rng, {2, 3, 2})}) < 1e-7);
}

TEST_CASE("grad: softmax and attention") {
    RngStream rng(6);
    auto x = rnd(rng, {5, 4});
    CHECK(grad_check([](Graph<D>& g, auto& v) { return mean_all(mul(softmax_rows(v[0]), v[0])); }, {x}) < 1e-7);

    auto seq = rnd(rng, {5, 8}, 0.5);
    auto wqkv = rnd(rng, {8, 24}, 0.3);
    auto bqkv = rnd(rng, {24}, 0.1);
    auto wo = rnd(rng, {8, 8}, 0.3);
    auto bo = rnd(rng, {8}, 0.1);
    CHECK(grad_check(
              [](Graph<D>& g, auto& v) {
                  auto y = multihead_self_attention(v[0], v[1], v[2], v[3], v[4], 2);
                  return mean_all(mul(y, y));
              },
              {seq, wqkv, bqkv, wo, bo}) < 1e-6);
}

TEST_CASE("grad: normalization") {
    RngStream rng(7);
    auto x = rnd(rng, {6, 5});
    auto gamma = rnd(rng, {5}, 0.2);
    auto beta = rnd(rng, {5}, 0.2);
    gamma.array() += 1.0;
    CHECK(grad_check(
              [](Graph<D>& g, auto& v) { return mean_all(mul(layer_norm(v[0], v[1], v[2]), v[0])); },
              {x, gamma, beta}) < 1e-6);
    CHECK(grad_check([](Graph<D>& g, auto& v) { return mean_all(mul(layer_norm_plain(v[0]), v[0])); }, {x}) <
          1e-6);
    CHECK(grad_check(
              [](Graph<D>& g, auto& v) {
                  auto y = batch_norm_cols<D>(v[0], v[1], v[2], nullptr, true);
                  return mean_all(mul(y, v[0]));
              },
              {x, gamma, beta}) < 1e-6);

    Tensor<D> rm = Tensor<D>::zeros({5}), rv = Tensor<D>::full({5}, 1.0);
    BatchNormState<D> st{&rm, &rv};
    CHECK(grad_check(
              [&st](Graph<D>& g, auto& v) {
                  auto y = batch_norm_cols<D>(v[0], v[1], v[2], &st, false);
                  return mean_all(mul(y, v[0]));
              },
              {x, gamma, beta}) < 1e-6);
}

TEST_CASE("batch norm running stats converge to data stats") {
    RngStream rng(8);
    Tensor<D> rm = Tensor<D>::zeros({3}), rv = Tensor<D>::full({3}, 1.0);
    BatchNormState<D> st{&rm, &rv};
    Tensor<D> gamma = Tensor<D>::full({3}, 1.0);
    Tensor<D> beta = Tensor<D>::zeros({3});
    for (int i = 0; i < 600; ++i) {
        Graph<D> g;
        auto x = g.leaf(rng.normal_tensor<D>({16, 3}, 2.0, 1.5), false);
        batch_norm_cols<D>(x, g.leaf(gamma), g.leaf(beta), &st, true);
    }
    for (int c = 0; c < 3; ++c) {
        CHECK(rm[c] == doctest::Approx(1.5).epsilon(0.15));
        CHECK(rv[c] == doctest::Approx(4.0).epsilon(0.2));
    }
}

TEST_CASE("grad: conv2d") {
    RngStream rng(9);
    auto x = rnd(rng, {2, 3, 5, 5});
    auto w = rnd(rng, {4, 3, 3, 3}, 0.4);
    auto b = rnd(rng, {4}, 0.2);
    CHECK(grad_check(
              [](Graph<D>& g, auto& v) {
                  auto y = conv2d(v[0], v[1], v[2], 1, 1);
                  return mean_all(mul(y, y));
              },
              {x, w, b}) < 1e-6);
    CHECK(grad_check(
              [](Graph<D>& g, auto& v) {
                  auto y = conv2d(v[0], v[1], v[2], 2, 1);
                  return mean_all(mul(y, y));
              },
              {rnd(rng, {1, 2, 6, 6}), rnd(rng, {3, 2, 3, 3}, 0.4), rnd(rng, {3}, 0.2)}) < 1e-6);
}

TEST_CASE("grad: conv_transpose2d doubles spatial extent") {
    RngStream rng(10);
    auto x = rnd(rng, {2, 3, 4, 4});
    auto w = rnd(rng, {3, 5, 4, 4}, 0.3);
    auto b = rnd(rng, {5}, 0.2);
    {
        Graph<D> g;
        auto y = conv_transpose2d(g.leaf(x), g.leaf(w), g.leaf(b), 2, 1);
        CHECK(y.shape() == Shape{2, 5, 8, 8});
    }
    CHECK(grad_check(
              [](Graph<D>& g, auto& v) {
                  auto y = conv_transpose2d(v[0], v[1], v[2], 2, 1);
                  return mean_all(mul(y, y));
              },
              {x, w, b}) < 1e-6);
}

TEST_CASE("conv_transpose2d matches direct summation") {
    RngStream rng(11);
    auto x = rnd(rng, {1, 2, 3, 3});
    auto w = rnd(rng, {2, 3, 4, 4});
    auto b = Tensor<D>::zeros({3});
    Graph<D> g;
    auto y = conv_transpose2d(g.leaf(x), g.leaf(w), g.leaf(b), 2, 1);
    // direct scatter evaluation
    Tensor<D> ref({1, 3, 6, 6});
    for (Index c = 0; c < 2; ++c)
        for (Index o = 0; o < 3; ++o)
            for (Index h = 0; h < 3; ++h)
                for (Index wd = 0; wd < 3; ++wd)
                    for (Index ky = 0; ky < 4; ++ky)
                        for (Index kx = 0; kx < 4; ++kx) {
                            Index oy = h * 2 - 1 + ky, ox = wd * 2 - 1 + kx;
                            if (oy < 0 || oy >= 6 || ox < 0 || ox >= 6) continue;
                            ref.at({0, o, oy, ox}) +=
                                x.at({0, c, h, wd}) * w.at({c, o, ky, kx});
                        }
    Tensor<D> diff(ref.shape());
    diff.array() = y.tensor().array() - ref.array();
    CHECK(max_abs(diff) < 1e-12);
}

TEST_CASE("grad: conv3d") {
    RngStream rng(12);
    auto x = rnd(rng, {1, 2, 4, 4, 4});
    auto w = rnd(rng, {3, 2, 3, 3, 3}, 0.3);
    auto b = rnd(rng, {3}, 0.2);
    CHECK(grad_check(
              [](Graph<D>& g, auto& v) {
                  auto y = conv3d(v[0], v[1], v[2], {2, 2, 2}, {1, 1, 1});
                  return mean_all(mul(y, y));
              },
              {x, w, b}) < 1e-6);
}

TEST_CASE("grad: bilinear_up2, demodulate, assign_block4") {
    RngStream rng(13);
    CHECK(grad_check(
              [](Graph<D>& g, auto& v) {
                  auto y = bilinear_up2(v[0]);
                  return mean_all(mul(y, y));
              },
              {rnd(rng, {1, 2, 3, 4})}) < 1e-6);
    CHECK(grad_check(
              [](Graph<D>& g, auto& v) {
                  auto y = demodulate_outch(v[0], 1e-8);
                  return mean_all(mul(y, v[0]));
              },
              {rnd(rng, {3, 2, 3, 3})}) < 1e-6);
    CHECK(grad_check(
              [](Graph<D>& g, auto& v) {
                  auto y = assign_block4(v[0], v[1], 1, 0);
                  return mean_all(mul(y, y));
              },
              {rnd(rng, {4, 3, 3, 3}), rnd(rng, {2, 2, 3, 3})}) < 1e-7);
}

TEST_CASE("demodulated rows have unit norm") {
    RngStream rng(14);
    Graph<D> g;
    auto w = g.leaf(rnd(rng, {6, 4, 3, 3}), false);
    auto y = demodulate_outch(w, 1e-8);
    auto m = y.tensor().mat(6, 36);
    for (Index o = 0; o < 6; ++o) CHECK(m.row(o).norm() == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("clamp passes gradient only inside range") {
    Graph<D> g;
    Tensor<D> x = Tensor<D>::from_data({3}, {-2.0, 0.5, 2.0});
    Tensor<D> grad = Tensor<D>::zeros({3});
    auto v = g.input(x, &grad);
    g.backward(sum_all(clamp_op(v, -1.0, 1.0)));
    CHECK(grad[0] == 0.0);
    CHECK(grad[1] == 1.0);
    CHECK(grad[2] == 0.0);
}

TEST_CASE("stop_gradient blocks flow") {
    Graph<D> g;
    Tensor<D> x = Tensor<D>::full({2}, 3.0);
    Tensor<D> grad = Tensor<D>::zeros({2});
    auto v = g.input(x, &grad);
    g.backward(sum_all(mul(stop_gradient(v), v)));
    CHECK(grad[0] == 3.0);  // only the non-detached factor contributes
}

TEST_CASE("adamw minimizes a quadratic") {
    ParamStore<float> store;
    RngStream rng(15);
    store.create("x", rng.normal_tensor<float>({8}, 2.0));
    AdamW<float> opt(0.9f, 0.999f, 1e-8f, 0.0f);
    for (int i = 0; i < 400; ++i) {
        Graph<float> g;
        auto x = use(g, store.at("x"));
        g.backward(mean_all(mul(x, x)));
        opt.step(store, 0.05f);
    }
    CHECK(max_abs(store.at("x").value) < 0.05f);
}

TEST_CASE("lr schedule: warmup then cosine to zero") {
    CHECK(lr_at(0, 1000, 1.0, 0.01) == doctest::Approx(0.1));
    CHECK(lr_at(9, 1000, 1.0, 0.01) == doctest::Approx(1.0));
    CHECK(lr_at(999, 1000, 1.0, 0.01) < 0.01);
    CHECK(lr_at(505, 1000, 1.0, 0.01) == doctest::Approx(0.5).epsilon(0.02));
}
