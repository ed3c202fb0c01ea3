#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gradcheck.hpp"
#include "vce/model/conditioning.hpp"
#include "vce/synthgen.hpp"

using namespace vce;
using namespace vce::model;
using vce::testing::gradcheck_split;
using vce::testing::random_tensor;

namespace {

template <class T>
Tensor<T>& named(std::vector<nn::NamedTensor<T>> state, const std::string& name) {
    for (auto& t : state)
        if (t.name == name) return *t.tensor;
    throw std::runtime_error("no tensor " + name);
}

// Forces the final softmax layer of `net` to put all mass on class 1.
template <class T>
void force_class_one(nn::Sequential<T>& net, const std::string& prefix) {
    named(net.state(), prefix + ".weight").vec().assign(named(net.state(), prefix + ".weight").size(), T(0));
    auto& b = named(net.state(), prefix + ".bias");
    b[0] = T(-60);
    b[1] = T(60);
}

CDModel<double> tiny_cd(std::uint64_t seed) { return {Architecture::tiny(8, 2, 2), change_head_spec(), seed}; }

Discriminator<double> tiny_d(std::uint64_t seed) { return {tiny_realism_spec(), {1, 8, 8}, seed}; }

double grad_norm(const std::vector<ag::Var<double>>& params) {
    double s = 0;
    for (const auto& p : params)
        for (double g : p.grad().vec()) s += g * g;
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("pass ratio is the datapoint count ratio") {
    CHECK(pass_ratio(256, 128) == 2.0);
    CHECK(pass_ratio(64, 128) == 0.5);
    CHECK_THROWS(pass_ratio(10, 0));
}

TEST_CASE("derangement is a permutation without fixed points") {
    std::mt19937_64 rng(3);
    for (std::size_t n = 2; n < 60; ++n) {
        const auto p = derangement(n, rng);
        std::vector<std::size_t> sorted = p;
        std::sort(sorted.begin(), sorted.end());
        std::vector<std::size_t> ident(n);
        std::iota(ident.begin(), ident.end(), std::size_t{0});
        CHECK(sorted == ident);
        for (std::size_t i = 0; i < n; ++i) CHECK(p[i] != i);
    }
}

TEST_CASE("change discriminator is symmetric and outputs probabilities") {
    auto cd = tiny_cd(4);
    const nn::RunContext ctx{nn::Mode::eval, nullptr, false};
    const auto a = ag::Var<double>::constant(random_tensor({6, 1, 8, 8}, 1, 0, 1));
    const auto b = ag::Var<double>::constant(random_tensor({6, 1, 8, 8}, 2, 0, 1));
    const auto ab = cd.log_probs(a, b, ctx).value();
    const auto ba = cd.log_probs(b, a, ctx).value();
    for (std::size_t k = 0; k < ab.size(); ++k) {
        CHECK(ab[k] == ba[k]);
        CHECK(std::exp(ab[k]) >= 0.0);
        CHECK(std::exp(ab[k]) <= 1.0);
    }
    for (int r = 0; r < 6; ++r) CHECK(std::exp(ab[2 * r]) + std::exp(ab[2 * r + 1]) == doctest::Approx(1.0));
}

TEST_CASE("change head rejects a non-binary output") {
    CHECK_THROWS_WITH(CDModel<double>(Architecture::tiny(8, 2, 2), {nn::LayerSpec::fc(3), nn::LayerSpec::softmax_out()}, 1),
                      doctest::Contains("2 classes"));
}

TEST_CASE("mixed pair: identical sources give identical outputs") {
    std::mt19937_64 rng(5);
    const auto z = ag::Var<double>::constant(random_tensor({20, 8}, 7));
    const auto p = build_mixed_pair(z, z, rng);
    CHECK(p.z_pa.value().vec() == z.value().vec());
    CHECK(p.z_pb.value().vec() == z.value().vec());
}

TEST_CASE("mixed pair: outputs differ in at most one dim, which takes a from a and b from b") {
    std::mt19937_64 rng(6);
    const int n = 500, w = 8;
    const auto za = ag::Var<double>::constant(random_tensor({n, w}, 8));
    const auto zb = ag::Var<double>::constant(random_tensor({n, w}, 9));
    const auto p = build_mixed_pair(za, zb, rng);
    for (int r = 0; r < n; ++r) {
        int differ = 0;
        for (int c = 0; c < w; ++c) {
            const std::size_t k = static_cast<std::size_t>(r) * w + c;
            differ += p.z_pa.value()[k] != p.z_pb.value()[k];
            const double v = p.z_pa.value()[k];
            CHECK((v == za.value()[k] || v == zb.value()[k]));
        }
        CHECK(differ <= 1);
        const std::size_t j = static_cast<std::size_t>(r) * w + p.dim[r];
        CHECK(p.z_pa.value()[j] == za.value()[j]);
        CHECK(p.z_pb.value()[j] == zb.value()[j]);
    }
}

TEST_CASE("mixed pair: shared dims draw each source half the time over 10^4 draws") {
    std::mt19937_64 rng(11);
    const int n = 10000, w = 4;
    Tensor<double> a({n, w}, 1.0), b({n, w}, 2.0);
    const auto p = build_mixed_pair(ag::Var<double>::constant(a), ag::Var<double>::constant(b), rng);
    const int fixed = 2;
    int shared = 0, from_a = 0;
    std::vector<int> picked(w, 0);
    for (int r = 0; r < n; ++r) {
        ++picked[p.dim[r]];
        if (p.dim[r] == fixed) continue;
        ++shared;
        from_a += p.z_pa.value()[static_cast<std::size_t>(r) * w + fixed] == 1.0;
    }
    CHECK(std::abs(static_cast<double>(from_a) / shared - 0.5) <= 0.02);
    for (int c = 0; c < w; ++c) CHECK(std::abs(picked[c] / static_cast<double>(n) - 0.25) <= 0.02);
}

TEST_CASE("conditioning loss is zero when D and CD are certain") {
    auto d = tiny_d(1);
    auto cd = tiny_cd(2);
    force_class_one(d.net, "realism.4");
    force_class_one(cd.head, "change.4");
    std::mt19937_64 rng(3);
    const auto za = ag::Var<double>::constant(random_tensor({5, 2}, 4));
    const auto zb = ag::Var<double>::constant(random_tensor({5, 2}, 5));
    const auto pair = build_mixed_pair(za, zb, rng);
    const auto xa = ag::Var<double>::constant(random_tensor({5, 1, 8, 8}, 6, 0, 1));
    const auto xb = ag::Var<double>::constant(random_tensor({5, 1, 8, 8}, 7, 0, 1));
    const auto t = conditioning_loss(xa, xb, pair, za, zb, d, cd, CondParams{1.0, 3.0}, rng);
    CHECK(std::abs(t.total.item()) < 1e-12);
}

TEST_CASE("scaling factor: one for equal per-dim differences, within [0, n_y] in general") {
    auto d = tiny_d(1);
    auto cd = tiny_cd(2);
    const int n = 6, w = 2;
    std::mt19937_64 rng(8);
    const auto x = ag::Var<double>::constant(random_tensor({n, 1, 8, 8}, 6, 0, 1));
    {
        Tensor<double> a({n, w}, 0.0), b({n, w});
        for (std::size_t k = 0; k < b.size(); ++k) b[k] = k % 2 ? 0.7 : -0.7;
        const auto za = ag::Var<double>::constant(a), zb = ag::Var<double>::constant(b);
        const auto pair = build_mixed_pair(za, zb, rng);
        const auto t = conditioning_loss(x, x, pair, za, zb, d, cd, {}, rng);
        for (double s : t.scale.value().vec()) CHECK(s == doctest::Approx(1.0));
    }
    for (unsigned seed = 0; seed < 20; ++seed) {
        const auto za = ag::Var<double>::constant(random_tensor({n, 5}, 100 + seed, -3, 3));
        const auto zb = ag::Var<double>::constant(random_tensor({n, 5}, 200 + seed, -3, 3));
        const auto pair = build_mixed_pair(za, zb, rng);
        auto cd5 = CDModel<double>(Architecture::tiny(8, 5, 2), change_head_spec(), 3);
        const auto t = conditioning_loss(x, x, pair, za, zb, d, cd5, {}, rng);
        for (double s : t.scale.value().vec()) {
            CHECK(s >= 0.0);
            CHECK(s <= 5.0 + 1e-12);
        }
    }
}

TEST_CASE("degenerate pair with identical class latents has no change term") {
    auto d = tiny_d(1);
    auto cd = tiny_cd(2);
    std::mt19937_64 rng(8);
    const auto z = ag::Var<double>::constant(random_tensor({4, 2}, 3));
    const auto x = ag::Var<double>::constant(random_tensor({4, 1, 8, 8}, 6, 0, 1));
    const auto t = conditioning_loss(x, x, build_mixed_pair(z, z, rng), z, z, d, cd, {}, rng);
    CHECK(t.change.item() == 0.0);
}

TEST_CASE("change term vanishes as the differing dim's difference goes to zero") {
    auto d = tiny_d(1);
    auto cd = tiny_cd(2);
    const int n = 8, w = 2;
    const auto xa = ag::Var<double>::constant(random_tensor({n, 1, 8, 8}, 6, 0, 1));
    const auto xb = ag::Var<double>::constant(random_tensor({n, 1, 8, 8}, 7, 0, 1));
    // the dims drawn depend only on the rng, so a probe run reveals them
    std::mt19937_64 probe(21);
    const auto dims = build_mixed_pair(ag::Var<double>::constant(Tensor<double>({n, w})),
                                       ag::Var<double>::constant(Tensor<double>({n, w})), probe)
                          .dim;
    double last = 1e300;
    for (double delta : {1.0, 0.1, 1e-2, 1e-4, 1e-8}) {
        Tensor<double> a({n, w}, 0.0), b({n, w}, 1.0);
        for (int r = 0; r < n; ++r) b[static_cast<std::size_t>(r) * w + dims[r]] = delta;
        const auto za = ag::Var<double>::constant(a), zb = ag::Var<double>::constant(b);
        std::mt19937_64 rng(21);
        const auto pair = build_mixed_pair(za, zb, rng);
        CHECK(pair.dim == dims);
        const auto t = conditioning_loss(xa, xb, pair, za, zb, d, cd, {}, rng);
        CHECK(t.change.item() < last);
        last = t.change.item();
    }
    CHECK(last < 1e-6);
}

TEST_CASE("frozen D and CD receive zero gradient while both latent sources do") {
    auto d = tiny_d(1);
    auto cd = tiny_cd(2);
    d.set_trainable(false);
    cd.set_trainable(false);
    DVAE<double> gen(Architecture::tiny(8, 2, 2), 3);
    const nn::RunContext ctx{nn::Mode::train, nullptr, true};
    std::mt19937_64 rng(4);
    auto za = ag::Var<double>::parameter(random_tensor({6, 2}, 5));
    auto zb = ag::Var<double>::parameter(random_tensor({6, 2}, 6));
    const auto zx = ag::Var<double>::parameter(random_tensor({6, 2}, 7));
    const auto pair = build_mixed_pair(za, zb, rng);
    const auto xa = gen.decode(pair.z_pa, zx, ctx), xb = gen.decode(pair.z_pb, zx, ctx);
    auto running = named(d.state(), "realism.2.running_mean");
    const auto t = conditioning_loss(xa, xb, pair, za, zb, d, cd, CondParams{1.0, 2.0}, rng);
    t.total.backward();
    CHECK(grad_norm(d.parameters()) == 0.0);
    CHECK(grad_norm(cd.parameters()) == 0.0);
    CHECK(grad_norm({za}) > 0.0);
    CHECK(grad_norm({zb}) > 0.0);
    CHECK(grad_norm(gen.parameters()) > 0.0);
    CHECK(named(d.state(), "realism.2.running_mean").vec() == running.vec());
}

TEST_CASE("conditioning loss gradient matches finite differences (64-bit, 2 dims)") {
    auto d = tiny_d(1);
    auto cd = tiny_cd(2);
    d.set_trainable(false);
    cd.set_trainable(false);
    DVAE<double> gen(Architecture::tiny(8, 2, 2), 3);
    auto za = ag::Var<double>::parameter(random_tensor({6, 2}, 5));
    auto zb = ag::Var<double>::parameter(random_tensor({6, 2}, 6));
    auto zx = ag::Var<double>::parameter(random_tensor({6, 2}, 7));
    auto loss = [&] {
        const nn::RunContext ctx{nn::Mode::train, nullptr, false};
        std::mt19937_64 rng(9);
        const auto pair = build_mixed_pair(za, zb, rng);
        const auto xa = gen.decode(pair.z_pa, zx, ctx), xb = gen.decode(pair.z_pb, zx, ctx);
        return conditioning_loss(xa, xb, pair, za, zb, d, cd, CondParams{0.7, 2.0}, rng).total;
    };
    std::vector<ag::Var<double>> params{za, zb, zx};
    for (const auto& p : gen.decoder.parameters()) params.push_back(p);
    const double err = vce::testing::gradcheck(params, loss);
    CHECK(err < 1e-3);
}

TEST_CASE("d loss is zero for a discriminator that is already perfect") {
    // mean-intensity discriminator: ones are real, zeros are synthesized
    Discriminator<float> d({nn::LayerSpec::flatten_all(), nn::LayerSpec::fc(2), nn::LayerSpec::softmax_out()},
                           {1, 4, 4}, 1);
    auto& w = named(d.state(), "realism.1.weight");
    auto& bias = named(d.state(), "realism.1.bias");
    for (int i = 0; i < 16; ++i) {
        w[static_cast<std::size_t>(i)] = -100.0f;
        w[static_cast<std::size_t>(16 + i)] = 100.0f;
    }
    bias[0] = 50.0f;
    bias[1] = -50.0f;
    optim::Adam<float> adam(d.parameters(), {});
    std::mt19937_64 rng(2);
    const auto r = d_train_step(d, adam, Tensor<float>({8, 1, 4, 4}, 1.0f), Tensor<float>({8, 1, 4, 4}, 0.0f), rng);
    CHECK(r.loss < 1e-6);
    CHECK(r.accuracy == 1.0);
    const auto p = d_predict(d, Tensor<float>({3, 1, 4, 4}, 1.0f));
    for (float v : p) CHECK(v > 0.999f);
}

TEST_CASE("d training with a uniform discriminator reports log 2") {
    Discriminator<float> d({nn::LayerSpec::flatten_all(), nn::LayerSpec::fc(2), nn::LayerSpec::softmax_out()},
                           {1, 4, 4}, 1);
    named(d.state(), "realism.1.weight").vec().assign(32, 0.0f);
    optim::Adam<float> adam(d.parameters(), {});
    std::mt19937_64 rng(2);
    const auto r = d_train_step(d, adam, random_tensor({4, 1, 4, 4}, 1).cast<float>(),
                                random_tensor({4, 1, 4, 4}, 2).cast<float>(), rng);
    CHECK(r.loss == doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("d separates real data from a frozen random decoder within 500 steps") {
    const auto cfg = synth::SynthConfig::defaults();
    const auto train = synth::generate_split(cfg, 20, 31, 1);
    const auto test = synth::generate_split(cfg, 10, 32, 2);
    DVAE<float> gen(Architecture::standard(), 5);
    std::mt19937_64 zrng(6);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    auto fakes = [&](int n) {
        Tensor<float> zy({n, 8}), zx({n, 8});
        for (auto& v : zy.vec()) v = normal(zrng);
        for (auto& v : zx.vec()) v = normal(zrng);
        return decode_latents(gen, zy, zx);
    };
    const Tensor<float> fake_train = fakes(200), fake_test = fakes(100);
    Discriminator<float> d(realism_spec(), {1, 32, 32}, 7);
    optim::Adam<float> adam(d.parameters(), {});
    std::mt19937_64 rng(8);
    std::uniform_int_distribution<std::size_t> pick_real(0, 199), pick_fake(0, 199);
    const int half = 8;
    for (int s = 0; s < 500; ++s) {
        std::vector<std::size_t> ri, fi;
        for (int i = 0; i < half; ++i) {
            ri.push_back(pick_real(rng));
            fi.push_back(pick_fake(rng));
        }
        d_train_step(d, adam, gather_rows(train.images, std::span<const std::size_t>(ri)),
                     gather_rows(fake_train, std::span<const std::size_t>(fi)), rng);
    }
    const auto pr = d_predict(d, test.images), pf = d_predict(d, fake_test);
    int hit = 0;
    for (float v : pr) hit += v > 0.5f;
    for (float v : pf) hit += v <= 0.5f;
    CHECK(static_cast<double>(hit) / static_cast<double>(pr.size() + pf.size()) > 0.9);
}

TEST_CASE("cd accuracy agrees with re-evaluation from posterior means") {
    const auto cfg = synth::SynthConfig::defaults();
    const auto pairs = synth::generate_change_pairs(cfg, 64, 41);
    Tensor<float> a({64, 1, 32, 32}), b({64, 1, 32, 32});
    std::vector<int> labels;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        std::copy(pairs[i].a.vec().begin(), pairs[i].a.vec().end(), a.data() + i * 1024);
        std::copy(pairs[i].b.vec().begin(), pairs[i].b.vec().end(), b.data() + i * 1024);
        labels.push_back(pairs[i].label);
    }
    CDModel<float> cd(Architecture::change_discriminator(), change_head_spec(), 3);
    CDTrainer trainer(cd, {}, {}, 4);
    const auto images = synth::generate_split(cfg, 2, 42, 1);
    const auto y = images.labels();
    for (int s = 0; s < 3; ++s) {
        const auto r = trainer.step(images.images, y, a, b, labels);
        CHECK(r.primary.finite());
        CHECK(std::isfinite(r.change_ce));
    }
    const double acc = cd_accuracy(cd, a, b, labels);
    const auto ea = encode_dataset(cd.backbone, a), eb = encode_dataset(cd.backbone, b);
    ag::NoGradGuard guard;
    const auto lp = cd.log_probs_from_latents(ag::Var<float>::constant(ea.mu_y), ag::Var<float>::constant(eb.mu_y),
                                              {nn::Mode::eval, nullptr, false});
    int hit = 0;
    for (int i = 0; i < 64; ++i) hit += (lp.value()[2 * i + 1] > lp.value()[2 * i] ? 1 : 0) == labels[i];
    CHECK(std::abs(acc - hit / 64.0) <= 0.02);
}

TEST_CASE("cd checkpoint round trip reproduces predictions") {
    CDModel<float> cd(Architecture::change_discriminator(), change_head_spec(), 3);
    const auto a = random_tensor({4, 1, 32, 32}, 1, 0, 1).cast<float>();
    const auto b = random_tensor({4, 1, 32, 32}, 2, 0, 1).cast<float>();
    const auto path = std::filesystem::temp_directory_path() / "vce_cd_roundtrip.ckpt";
    save_cd(path, cd, {}, {});
    CDTrainParams params;
    auto loaded = load_cd(path, &params);
    CHECK(params.alpha_c == 50.0);
    CHECK(cd_predict(cd, a, b) == cd_predict(loaded, a, b));
    std::filesystem::remove(path);
}

TEST_CASE("cond params json round trip") {
    const CondParams p{0.25, 3.0};
    const auto q = cond_params_from_json(to_json(p));
    CHECK(q.alpha_r == 0.25);
    CHECK(q.alpha_p == 3.0);
}
