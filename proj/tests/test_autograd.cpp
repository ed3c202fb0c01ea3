#include <doctest.h>

#include "gradcheck.hpp"
#include "vce/core/nn.hpp"
#include "vce/core/optim.hpp"

using namespace vce;
using vce::testing::gradcheck;
using vce::testing::random_tensor;
using V = ag::Var<double>;

TEST_CASE("elementwise and reduction ops match finite differences") {
    V a = V::parameter(random_tensor({3, 4}, 1, 0.2, 1.5));
    V b = V::parameter(random_tensor({3, 4}, 2, 0.2, 1.5));
    auto f = [&] {
        V t = ag::add(ag::mul(a, b), ag::div(ag::exp(a), b));
        t = ag::sub(t, ag::log(ag::square(b)));
        t = ag::add(t, ag::sigmoid(ag::scale(a, -2.0)));
        t = ag::add(t, ag::leaky_relu(ag::add_scalar(a, -0.8), 0.1));
        t = ag::add(t, ag::abs(ag::add_scalar(b, -0.7)));
        return ag::sum(ag::mul(ag::sum_rows(t), ag::sum_rows(a)));
    };
    CHECK(gradcheck({a, b}, f) < 1e-6);
}

TEST_CASE("shape ops route gradients to the right entries") {
    V a = V::parameter(random_tensor({2, 5}, 3));
    V b = V::parameter(random_tensor({2, 3}, 4));
    std::vector<int> cols{4, 0, 0, 2};
    std::vector<std::size_t> rows{1, 1, 0};
    auto f = [&] {
        V c = ag::concat_cols(a, b);
        V g = ag::gather_cols(c, std::span<const int>(cols));
        V r = ag::gather_rows(ag::slice_cols(c, 2, 4), std::span<const std::size_t>(rows));
        V s = ag::concat_rows(ag::reshape(g, {4, 2}), ag::reshape(r, {6, 2}));
        return ag::sum(ag::square(s));
    };
    CHECK(gradcheck({a, b}, f) < 1e-6);
}

TEST_CASE("linear, log_softmax and nll match finite differences") {
    V x = V::parameter(random_tensor({4, 3}, 5));
    V w = V::parameter(random_tensor({5, 3}, 6));
    V b = V::parameter(random_tensor({5}, 7));
    std::vector<int> labels{0, 4, 2, 2};
    auto f = [&] {
        return ag::mean(ag::nll_rows(ag::log_softmax(ag::linear(x, w, b)), std::span<const int>(labels)));
    };
    CHECK(gradcheck({x, w, b}, f) < 1e-6);
}

TEST_CASE("conv2d and conv_transpose2d match finite differences") {
    for (int stride : {1, 2}) {
        const auto geom = ag::ConvGeom::same(2, 6, 6, 3, 4, stride);
        V x = V::parameter(random_tensor({2, 2, 6, 6}, 8));
        V w = V::parameter(random_tensor({3, 2, 4, 4}, 9));
        V b = V::parameter(random_tensor({3}, 10));
        auto f = [&] { return ag::sum(ag::square(ag::conv2d(x, w, b, geom))); };
        CHECK(gradcheck({x, w, b}, f) < 1e-6);

        V xt = V::parameter(random_tensor({2, 3, geom.out_h, geom.out_w}, 11));
        V wt = V::parameter(random_tensor({3, 2, 4, 4}, 12));
        V bt = V::parameter(random_tensor({2}, 13));
        auto ft = [&] { return ag::sum(ag::square(ag::conv_transpose2d(xt, wt, bt, geom))); };
        CHECK(gradcheck({xt, wt, bt}, ft) < 1e-6);
    }
}

TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
    const auto geom = ag::ConvGeom::same(2, 8, 8, 3, 4, 2);
    auto x = random_tensor({1, 2, 8, 8}, 20);
    auto y = random_tensor({1, 3, geom.out_h, geom.out_w}, 21);
    auto w = random_tensor({3, 2, 4, 4}, 22);
    V none;
    auto cx = ag::conv2d(V::constant(x), V::constant(w), none, geom).value();
    auto ty = ag::conv_transpose2d(V::constant(y), V::constant(w), none, geom).value();
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < cx.size(); ++i) lhs += cx[i] * y[i];
    for (std::size_t i = 0; i < ty.size(); ++i) rhs += ty[i] * x[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("batch norm (train and eval) matches finite differences") {
    V x = V::parameter(random_tensor({4, 3, 2, 2}, 30));
    V g = V::parameter(random_tensor({3}, 31, 0.5, 1.5));
    V b = V::parameter(random_tensor({3}, 32));
    V weights = V::constant(random_tensor({4, 3, 2, 2}, 33));
    auto f = [&] { return ag::sum(ag::mul(ag::batch_norm_train<double>(x, g, b, 1e-3, nullptr, nullptr), weights)); };
    CHECK(gradcheck({x, g, b}, f) < 1e-6);
    Tensor<double> mu({3}, 0.1), var({3}, 0.7);
    auto fe = [&] { return ag::sum(ag::square(ag::batch_norm_eval(x, g, b, mu, var, 1e-3))); };
    CHECK(gradcheck({x, g, b}, fe) < 1e-6);
}

TEST_CASE("safe_div gives zero and no gradient at a zero denominator") {
    V a = V::parameter(Tensor<double>({2}, std::vector<double>{1.0, 2.0}));
    V b = V::parameter(Tensor<double>({2}, std::vector<double>{0.0, 4.0}));
    V r = ag::safe_div(a, b);
    CHECK(r.value()[0] == 0.0);
    CHECK(r.value()[1] == 0.5);
    ag::sum(r).backward();
    CHECK(a.grad()[0] == 0.0);
    CHECK(b.grad()[0] == 0.0);
    CHECK(a.grad()[1] == doctest::Approx(0.25));
}

TEST_CASE("grad_reverse is identity forward and negates gradients") {
    V v = V::parameter(Tensor<double>({1}, 3.0));
    V r = ag::grad_reverse(v);
    CHECK(r.item() == 3.0);
    ag::sum(ag::square(r)).backward();
    CHECK(v.grad()[0] == -6.0);

    V w = V::parameter(Tensor<double>({1}, 3.0));
    ag::sum(ag::square(ag::grad_reverse(w, 2.5))).backward();
    CHECK(w.grad()[0] == -15.0);
}

TEST_CASE("no-grad guard and frozen parameters stop graph recording") {
    V p = V::parameter(Tensor<double>({2}, 1.0));
    {
        ag::NoGradGuard guard;
        CHECK_FALSE(ag::square(p).requires_grad());
    }
    CHECK(ag::square(p).requires_grad());
    p.set_requires_grad(false);
    CHECK_FALSE(ag::square(p).requires_grad());
}

TEST_CASE("sequential builds declared shapes and rejects mismatches") {
    std::mt19937_64 rng(1);
    nn::NetworkSpec spec{nn::LayerSpec::conv(4, 2, 32), nn::LayerSpec::lrelu(), nn::LayerSpec::bn(),
                         nn::LayerSpec::flatten_all(), nn::LayerSpec::fc(8)};
    nn::Sequential<float> net("enc", spec, {1, 32, 32}, rng);
    CHECK(net.output_shape() == Shape{8});
    CHECK(nn::spec_from_json(nn::spec_to_json(spec)) == spec);

    nn::NetworkSpec bad{nn::LayerSpec::fc(8)};
    CHECK_THROWS_WITH_AS(nn::Sequential<float>("bad", bad, {1, 32, 32}, rng),
                         doctest::Contains("bad layer 0 (fc)"), std::invalid_argument);
}

TEST_CASE("adam with zero learning rate leaves parameters unchanged") {
    V p = V::parameter(random_tensor({3}, 40));
    const auto before = p.value().vec();
    optim::Adam<double> opt({p}, optim::AdamConfig{0.0, 0.9, 0.999, 1e-4});
    ag::sum(ag::square(p)).backward();
    opt.step();
    CHECK(p.value().vec() == before);
}

TEST_CASE("adam takes a bias-corrected first step of size lr") {
    V p = V::parameter(Tensor<double>({1}, 1.0));
    optim::Adam<double> opt({p}, optim::AdamConfig{0.001, 0.9, 0.999, 1e-4});
    ag::sum(ag::square(p)).backward();  // gradient 2
    opt.step();
    CHECK(p.value()[0] == doctest::Approx(1.0 - 0.001 * 2.0 / (2.0 + 1e-4)).epsilon(1e-12));
}
