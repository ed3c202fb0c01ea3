#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "vce/model/baselines.hpp"

using namespace vce;
using namespace vce::model;
using vce::testing::gradcheck_split;
using vce::testing::random_tensor;

namespace {

LatentGaussian<double> gaussian(Tensor<double> mean, Tensor<double> logvar) {
    return {ag::Var<double>::parameter(std::move(mean)), ag::Var<double>::parameter(std::move(logvar))};
}

std::vector<int> dim_labels(int n, int n_c, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::vector<int> d;
    for (int i = 0; i < n * n_c; ++i) d.push_back(static_cast<int>(rng() & 1));
    return d;
}

// Numerical KL(N(m1, v1) || N(m2, v2)) by trapezoidal integration.
double integrated_kl(double m1, double v1, double m2, double v2) {
    const double s1 = std::sqrt(v1), lo = m1 - 12 * s1, hi = m1 + 12 * s1;
    const int steps = 200000;
    const double h = (hi - lo) / steps;
    double acc = 0;
    for (int i = 0; i <= steps; ++i) {
        const double z = lo + i * h;
        const double lp = -0.5 * std::log(2 * M_PI * v1) - (z - m1) * (z - m1) / (2 * v1);
        const double lq = -0.5 * std::log(2 * M_PI * v2) - (z - m2) * (z - m2) / (2 * v2);
        const double w = i == 0 || i == steps ? 0.5 : 1.0;
        acc += w * std::exp(lp) * (lp - lq);
    }
    return acc * h;
}

}  // namespace

TEST_CASE("lvae classifier shapes: one input per dimension, seven complementary") {
    LVAEHeads<double> heads(8, 1);
    CHECK(heads.n_c() == 8);
    for (int i = 0; i < 8; ++i) {
        CHECK(heads.dim[i].input_shape() == Shape{1});
        CHECK(heads.comp[i].input_shape() == Shape{7});
        CHECK(heads.dim[i].output_shape() == Shape{2});
        CHECK(heads.comp[i].output_shape() == Shape{2});
    }
}

TEST_CASE("lvae: certain per-dimension classifiers give zero positive terms") {
    LVAEHeads<double> heads(3, 2);
    const int n = 5;
    const auto labels = dim_labels(n, 3, 4);
    for (int i = 0; i < 3; ++i) {
        // class logit = 60 * (2 label - 1) * z, with z = 2 label - 1
        auto st = heads.dim[i].state();
        Tensor<double>& w = *st[0].tensor;
        w[0] = -60;
        w[1] = 60;
    }
    Tensor<double> z({n, 3});
    for (std::size_t k = 0; k < z.size(); ++k) z[k] = 2.0 * labels[k] - 1.0;
    const nn::RunContext ctx{nn::Mode::train, nullptr, false};
    const auto t = lvae_terms(heads, ag::Var<double>::constant(z), labels, LVAEParams{20, 3}, ctx);
    CHECK(t.dim_ce.item() < 1e-12);
}

TEST_CASE("lvae rejects missing dimension labels and mismatched widths") {
    LVAEHeads<double> heads(3, 2);
    const nn::RunContext ctx{nn::Mode::train, nullptr, false};
    const auto z = ag::Var<double>::constant(random_tensor({4, 3}, 1));
    CHECK_THROWS_WITH(lvae_terms(heads, z, {}, LVAEParams{20, 3}, ctx), doctest::Contains("labels"));
    const auto z4 = ag::Var<double>::constant(random_tensor({4, 4}, 1));
    CHECK_THROWS(lvae_terms(heads, z4, dim_labels(4, 4, 1), LVAEParams{20, 3}, ctx));
}

TEST_CASE("lvae: encoder gradient of the complementary term is minus alpha_d times the classifier's own") {
    LVAEHeads<double> heads(3, 5);
    const int n = 6;
    const auto labels = dim_labels(n, 3, 6);
    const nn::RunContext ctx{nn::Mode::train, nullptr, false};
    const double alpha_d = 20;
    auto z = ag::Var<double>::parameter(random_tensor({n, 3}, 7));
    lvae_terms(heads, z, labels, LVAEParams{alpha_d, 3}, ctx).comp_ce.backward();
    const Tensor<double> reversed = z.grad();
    z.zero_grad();
    for (const auto& p : heads.parameters()) const_cast<ag::Var<double>&>(p).zero_grad();
    // the complementary loss evaluated on plain z
    std::vector<int> lab(static_cast<std::size_t>(n));
    ag::Var<double> plain;
    for (int i = 0; i < 3; ++i) {
        for (int r = 0; r < n; ++r) lab[r] = labels[static_cast<std::size_t>(r) * 3 + i];
        std::vector<int> others;
        for (int c = 0; c < 3; ++c)
            if (c != i) others.push_back(c);
        const auto ce = ag::mean(ag::nll_rows(heads.comp[i].forward(ag::gather_cols(z, std::span<const int>(others)), ctx),
                                              std::span<const int>(lab)));
        plain = plain ? ag::add(plain, ce) : ce;
    }
    plain.backward();
    for (std::size_t k = 0; k < reversed.size(); ++k) CHECK(reversed[k] == doctest::Approx(-alpha_d * z.grad()[k]));
}

TEST_CASE("lvae loss gradient matches finite differences (64-bit, 2 dims)") {
    LVAEHeads<double> heads(2, 8);
    const int n = 6;
    const auto labels = dim_labels(n, 2, 9);
    const LVAEParams params{20, 2};
    const nn::RunContext ctx{nn::Mode::train, nullptr, false};
    auto z = ag::Var<double>::parameter(random_tensor({n, 2}, 10));
    auto terms = [&] { return lvae_terms(heads, z, labels, params, ctx); };
    std::vector<ag::Var<double>> main{z};
    for (const auto& p : heads.main_parameters()) main.push_back(p);
    const double main_err = gradcheck_split(
        main, [&] { terms().objective.backward(); }, [&] { return terms().reported; });
    const double adv_err = gradcheck_split(
        heads.adversary_parameters(), [&] { terms().objective.backward(); },
        [&] { return terms().comp_ce.item(); });
    CHECK(main_err < 1e-3);
    CHECK(adv_err < 1e-3);
}

TEST_CASE("gvae averaging: identity on equal posteriors, arithmetic mean at the shared dim") {
    const auto q = gaussian(random_tensor({4, 3}, 1), random_tensor({4, 3}, 2));
    const std::vector<int> shared{0, 1, 2, 1};
    const auto same = gvae_average(q, q, shared);
    CHECK(same.a.mean.value().vec() == q.mean.value().vec());
    CHECK(same.a.logvar.value().vec() == q.logvar.value().vec());

    Tensor<double> ma({1, 2}, 0.0), mb({1, 2}, 2.0);
    mb[1] = 5.0;
    Tensor<double> la({1, 2}, std::log(1.0)), lb({1, 2}, std::log(3.0));
    const auto out = gvae_average(gaussian(ma, la), gaussian(mb, lb), std::vector<int>{0});
    CHECK(out.a.mean.value()[0] == 1.0);
    CHECK(out.b.mean.value()[0] == 1.0);
    CHECK(std::exp(out.a.logvar.value()[0]) == doctest::Approx(2.0));
    CHECK(out.a.mean.value()[1] == 0.0);
    CHECK(out.b.mean.value()[1] == 5.0);
    CHECK(out.b.logvar.value()[1] == lb[1]);
}

TEST_CASE("gvae averaging leaves non-shared dims bit-identical and is idempotent") {
    const auto qa = gaussian(random_tensor({20, 8}, 3), random_tensor({20, 8}, 4));
    const auto qb = gaussian(random_tensor({20, 8}, 5), random_tensor({20, 8}, 6));
    std::vector<int> shared;
    for (int r = 0; r < 20; ++r) shared.push_back((r * 5) % 8);
    const auto once = gvae_average(qa, qb, shared);
    for (int r = 0; r < 20; ++r)
        for (int c = 0; c < 8; ++c) {
            const std::size_t k = static_cast<std::size_t>(r) * 8 + c;
            if (c == shared[r]) {
                CHECK(once.a.mean.value()[k] == once.b.mean.value()[k]);
                CHECK(once.a.logvar.value()[k] == once.b.logvar.value()[k]);
            } else {
                CHECK(once.a.mean.value()[k] == qa.mean.value()[k]);
                CHECK(once.b.logvar.value()[k] == qb.logvar.value()[k]);
            }
        }
    const auto twice = gvae_average(once.a, once.b, shared);
    CHECK(twice.a.mean.value().vec() == once.a.mean.value().vec());
    CHECK(twice.a.logvar.value().vec() == once.a.logvar.value().vec());
    CHECK(twice.b.mean.value().vec() == once.b.mean.value().vec());
    CHECK(twice.b.logvar.value().vec() == once.b.logvar.value().vec());
    CHECK_THROWS_AS(gvae_average(qa, qb, std::vector<int>(20, 8)), std::out_of_range);
}

TEST_CASE("symmetric kl matches numerical integration") {
    const double cases[][4] = {{0, 0, 0, 0}, {0.5, -0.3, -1.0, 0.4}, {2.0, 1.0, 1.5, -1.0}};
    for (const auto& c : cases) {
        const double v1 = std::exp(c[1]), v2 = std::exp(c[3]);
        const double oracle = 0.5 * (integrated_kl(c[0], v1, c[2], v2) + integrated_kl(c[2], v2, c[0], v1));
        CHECK(symmetric_kl(c[0], c[1], c[2], c[3]) == doctest::Approx(oracle).epsilon(1e-6));
    }
}

TEST_CASE("ada-gvae picks the most divergent dim, lowest index on ties") {
    CHECK(argmax_divergence(std::vector<double>{0.1, 2.0, 0.1, 0.3}) == 1);
    CHECK(argmax_divergence(std::vector<double>{0.0, 0.0, 0.0}) == 0);
    CHECK(argmax_divergence(std::vector<double>{1.0, 3.0, 3.0}) == 1);
    // unit variances: symmetric kl = d^2 / 2, so these give (0.1, 2.0, 0.1, 0.1)
    Tensor<double> ma({1, 4}, 0.0), mb({1, 4});
    const double d[] = {std::sqrt(0.2), 2.0, std::sqrt(0.2), std::sqrt(0.2)};
    for (int c = 0; c < 4; ++c) mb[c] = d[c];
    const auto out = ada_gvae_pair_step(gaussian(ma, Tensor<double>({1, 4})), gaussian(mb, Tensor<double>({1, 4})));
    CHECK(out.independent_dim == std::vector<int>{1});
    for (int c : {0, 2, 3}) CHECK(out.q.a.mean.value()[c] == out.q.b.mean.value()[c]);
    CHECK(out.q.a.mean.value()[1] == 0.0);
    CHECK(out.q.b.mean.value()[1] == 2.0);

    const auto q = gaussian(random_tensor({3, 4}, 1), random_tensor({3, 4}, 2));
    CHECK(ada_gvae_pair_step(q, q).independent_dim == std::vector<int>{0, 0, 0});
}

TEST_CASE("ada-gvae selection is invariant to a common rescaling of divergences") {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> u(0.0, 5.0), s(1e-3, 1e3);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> div(8);
        for (auto& v : div) v = u(rng);
        const int j = argmax_divergence(div);
        const double c = s(rng);
        for (auto& v : div) v *= c;
        CHECK(argmax_divergence(div) == j);
    }
}

TEST_CASE("ada-gvae averaging is idempotent and averaged dims agree exactly") {
    const auto qa = gaussian(random_tensor({10, 8}, 7), random_tensor({10, 8}, 8));
    const auto qb = gaussian(random_tensor({10, 8}, 9), random_tensor({10, 8}, 10));
    const auto once = ada_gvae_pair_step(qa, qb);
    for (int r = 0; r < 10; ++r)
        for (int c = 0; c < 8; ++c) {
            const std::size_t k = static_cast<std::size_t>(r) * 8 + c;
            if (c == once.independent_dim[r]) continue;
            CHECK(once.q.a.mean.value()[k] == once.q.b.mean.value()[k]);
            CHECK(once.q.a.logvar.value()[k] == once.q.b.logvar.value()[k]);
        }
    const auto twice = ada_gvae_pair_step(once.q.a, once.q.b);
    CHECK(twice.independent_dim == once.independent_dim);
    CHECK(twice.q.a.mean.value().vec() == once.q.a.mean.value().vec());
    CHECK(twice.q.b.logvar.value().vec() == once.q.b.logvar.value().vec());
}

TEST_CASE("pair elbo pass gradient matches finite differences (64-bit, 2+2 dims)") {
    for (PairAveraging mode : {PairAveraging::gvae, PairAveraging::ada_gvae}) {
        DVAE<double> m(Architecture::tiny(8, 2, 2), 3);
        const auto xa = ag::Var<double>::constant(random_tensor({3, 1, 8, 8}, 1, 0, 1));
        const auto xb = ag::Var<double>::constant(random_tensor({3, 1, 8, 8}, 2, 0, 1));
        const std::vector<int> shared{0, 1, 1};
        auto objective = [&] {
            const nn::RunContext ctx{nn::Mode::train, nullptr, false};
            std::mt19937_64 noise(4);
            return pair_elbo_forward(m, xa, xb, mode, shared, DVAEParams{2.0, 1.0, 1.0}, ctx, noise).objective;
        };
        CHECK(vce::testing::gradcheck(m.main_parameters(), objective) < 1e-3);
    }
}
