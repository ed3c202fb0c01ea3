// Acceptance suite: one PASS / FAIL / UNMET line per criterion.
//
// Exit status: 0 when every selected criterion passes, 1 when any fails, 77
// when none fails but a training criterion could not run at desk scale in
// this environment (its reduced-scale numbers are printed instead).

#include <CLI11.hpp>

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "gradcheck.hpp"
#include "vce/harness.hpp"
#include "vce/model/baselines.hpp"

using namespace vce;
using Clock = std::chrono::steady_clock;

namespace {

enum class Status { pass, fail, unmet };

struct Outcome {
    Status status = Status::pass;
    std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 4) {
    std::ostringstream s;
    s << std::setprecision(digits) << v;
    return s.str();
}

// ---- 1: graph combinatorics ------------------------------------------------------

// Depth-first enumeration of source-to-sink paths.
std::uint64_t enumerate_paths(const std::map<std::uint32_t, std::vector<std::uint32_t>>& out, std::uint32_t node,
                              std::uint32_t sink) {
    if (node == sink) return 1;
    std::uint64_t n = 0;
    const auto it = out.find(node);
    if (it != out.end())
        for (auto t : it->second) n += enumerate_paths(out, t, sink);
    return n;
}

Outcome graph_combinatorics() {
    const auto t0 = Clock::now();
    const std::uint64_t expected_paths[] = {1, 1, 3, 13, 75, 541};
    std::ostringstream bad;
    for (int n = 0; n <= 8; ++n) {
        std::vector<float> a(8, 0.0f), b(8, 0.0f);
        for (int i = 0; i < n; ++i) b[i] = 1.0f;
        const auto g = explain::graph_skeleton(a, b, explain::graph_dims(a, b, {}));
        std::uint64_t p3 = 1, p2 = 1;
        for (int i = 0; i < n; ++i) {
            p3 *= 3;
            p2 *= 2;
        }
        if (g.node_count() != p2) bad << " n=" << n << " nodes " << g.node_count();
        if (g.edges.size() != p3 - p2) bad << " n=" << n << " edges " << g.edges.size();
        if (n <= 5) {
            std::map<std::uint32_t, std::vector<std::uint32_t>> out;
            for (const auto& e : g.edges) out[e.from].push_back(e.to);
            const auto paths = enumerate_paths(out, 0, g.sink());
            if (paths != expected_paths[n]) bad << " n=" << n << " paths " << paths;
        }
    }
    const double s = seconds_since(t0);
    if (s >= 10) bad << " runtime " << fmt(s) << " s";
    if (!bad.str().empty()) return {Status::fail, bad.str()};
    return {Status::pass, "n = 0..8 nodes 2^n, edges 3^n - 2^n; paths 1,1,3,13,75,541 (" + fmt(s, 2) + " s)"};
}

// ---- 2: shortest path oracle -----------------------------------------------------

void weak_orderings(std::uint32_t done, std::uint32_t full, std::vector<std::uint32_t>& seq,
                    const std::function<void(const std::vector<std::uint32_t>&)>& visit) {
    if (done == full) {
        visit(seq);
        return;
    }
    const std::uint32_t rest = full & ~done;
    for (std::uint32_t block = rest; block; block = (block - 1) & rest) {
        seq.push_back(done | block);
        weak_orderings(done | block, full, seq, visit);
        seq.pop_back();
    }
}

Outcome shortest_path_oracle() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(2024);
    int mismatches = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 1 + trial % 4;
        std::vector<float> a(4, 0.0f), b(4, 0.0f);
        std::vector<int> dims;
        for (int i = 0; i < n; ++i) {
            b[i] = 2.0f;
            dims.push_back(i);
        }
        auto g = explain::graph_skeleton(a, b, dims);
        std::uniform_real_distribution<double> w(0.0, 3.0);
        for (auto& e : g.edges) e.weight = w(rng);
        std::map<std::pair<std::uint32_t, std::uint32_t>, double> weight;
        for (const auto& e : g.edges) weight[{e.from, e.to}] = e.weight;
        double best = INFINITY;
        std::vector<std::uint32_t> seq{0};
        weak_orderings(0, g.sink(), seq, [&](const std::vector<std::uint32_t>& s) {
            double c = 0;
            for (std::size_t i = s.size() - 1; i-- > 0;) c = weight.at({s[i], s[i + 1]}) + c;
            best = std::min(best, c);
        });
        const auto p = explain::shortest_path(g);
        double along = 0;
        for (std::size_t i = p.nodes.size() - 1; i-- > 0;) along = weight.at({p.nodes[i], p.nodes[i + 1]}) + along;
        if (p.total != best || along != best) ++mismatches;
    }
    const double s = seconds_since(t0);
    if (mismatches || s >= 30)
        return {Status::fail, std::to_string(mismatches) + " of 200 graphs differ (" + fmt(s, 2) + " s)"};
    return {Status::pass, "200 graphs, n <= 4, equal to the weak-ordering minimum (" + fmt(s, 2) + " s)"};
}

// ---- 3: dtw oracle ---------------------------------------------------------------

std::vector<synth::Image> random_sequence(std::size_t len, std::mt19937& rng) {
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    std::vector<synth::Image> out;
    for (std::size_t i = 0; i < len; ++i) {
        synth::Image im({1, 32, 32});
        for (auto& v : im.vec()) v = u(rng);
        out.push_back(im);
    }
    return out;
}

double brute_force_alignment(const std::vector<synth::Image>& c, const std::vector<synth::Image>& t, double eps) {
    double best = INFINITY;
    std::function<void(std::size_t, std::size_t, double)> walk = [&](std::size_t i, std::size_t j, double acc) {
        double direct = 0;
        for (std::size_t k = 0; k < c[i].size(); ++k) {
            const double d = static_cast<double>(c[i][k]) - static_cast<double>(t[j][k]);
            direct += d * d;
        }
        acc += direct + eps;
        if (i + 1 == c.size() && j + 1 == t.size()) {
            best = std::min(best, acc);
            return;
        }
        if (i + 1 < c.size()) walk(i + 1, j, acc);
        if (j + 1 < t.size()) walk(i, j + 1, acc);
        if (i + 1 < c.size() && j + 1 < t.size()) walk(i + 1, j + 1, acc);
    };
    walk(0, 0, 0.0);
    return best;
}

Outcome dtw_oracle() {
    const double eps = 0.001;
    std::mt19937 rng(99);
    double worst = 0;
    int trials = 0;
    for (std::size_t n = 1; n <= 5; ++n)
        for (std::size_t m = 1; m <= 5; ++m)
            for (int r = 0; r < 4; ++r, ++trials) {
                const auto c = random_sequence(n, rng), t = random_sequence(m, rng);
                const double dp = metrics::dtw_align(c, t, eps), bf = brute_force_alignment(c, t, eps);
                worst = std::max(worst, std::abs(dp - bf) / std::max(1.0, std::abs(bf)));
            }
    double worst_identity = 0;
    for (std::size_t len = 1; len <= 8; ++len) {
        const auto s = random_sequence(len, rng);
        worst_identity = std::max(worst_identity, std::abs(metrics::dtw_align(s, s, eps) - len * eps));
    }
    const bool ok = trials == 100 && worst <= 1e-9 && worst_identity <= 1e-9;
    return {ok ? Status::pass : Status::fail, std::to_string(trials) + " trials, max relative error " + fmt(worst, 3) +
                                                  "; identical sequences off |s| eps by " + fmt(worst_identity, 3)};
}

// ---- 4: analytic kl vs monte carlo ----------------------------------------------

// One-dimensional posteriors with antithetic pairs (e, -e): at 1e5 samples the
// standard error stays well under the tolerance. The multi-dimensional closed
// form is checked to be the sum of its per-dimension terms.
Outcome kl_monte_carlo() {
    std::mt19937_64 rng(404);
    std::uniform_real_distribution<double> um(-1.0, 1.0), us(0.5, 1.5);
    std::normal_distribution<double> normal(0.0, 1.0);
    const int samples = 100000;
    double worst = 0, worst_sum = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const double mu = um(rng), sigma = us(rng);
        // E_q[log q(z) - log p(z)]
        double acc = 0;
        for (int s = 0; s < samples / 2; ++s) {
            const double e = normal(rng);
            for (double x : {e, -e}) {
                const double z = mu + sigma * x;
                acc += -0.5 * x * x - std::log(sigma) + 0.5 * z * z;
            }
        }
        const std::vector<double> m{mu}, sd{sigma};
        worst = std::max(worst, std::abs(acc / samples - model::kl_to_standard_normal(m, sd)));

        std::vector<double> mv(4), sv(4);
        double parts = 0;
        for (int i = 0; i < 4; ++i) {
            mv[i] = um(rng);
            sv[i] = us(rng);
            parts += model::kl_to_standard_normal(std::vector<double>{mv[i]}, std::vector<double>{sv[i]});
        }
        worst_sum = std::max(worst_sum, std::abs(model::kl_to_standard_normal(mv, sv) - parts));
    }
    return {worst < 1e-2 && worst_sum < 1e-12 ? Status::pass : Status::fail,
            "50 posteriors, 1e5 samples each, max |analytic - MC| = " + fmt(worst, 3) +
                "; 4-dim closed form off the per-dimension sum by " + fmt(worst_sum, 3)};
}

// ---- 5: gradient checks ---------------------------------------------------------

Outcome gradient_checks() {
    using testing::gradcheck_split;
    using testing::random_tensor;
    std::map<std::string, double> err;
    const nn::RunContext ctx{nn::Mode::train, nullptr, false};
    {
        model::DVAE<double> m(model::Architecture::tiny(8, 2, 2), 21);
        const auto x = ag::Var<double>::constant(random_tensor({4, 1, 8, 8}, 22, 0.0, 1.0));
        const std::vector<int> y{0, 3, 6, 9};
        const model::DVAEParams p{1.5, 0.7, 2.0};
        auto run = [&] {
            std::mt19937_64 rng(5);
            return model::dvae_forward(m, x, y, p, ctx, rng);
        };
        err["dvae"] = gradcheck_split(
            m.main_parameters(), [&] { run().objective.backward(); }, [&] { return run().values.total; });
        err["dvae adversary"] = gradcheck_split(
            m.adversary_parameters(), [&] { run().objective.backward(); }, [&] { return run().values.cls_x; });
    }
    {
        model::LVAEHeads<double> heads(2, 8);
        const int n = 6;
        std::vector<int> labels;
        std::mt19937_64 lr(9);
        for (int i = 0; i < n * 2; ++i) labels.push_back(static_cast<int>(lr() & 1));
        const model::LVAEParams params{20, 2};
        auto z = ag::Var<double>::parameter(random_tensor({n, 2}, 10));
        auto terms = [&] { return model::lvae_terms(heads, z, labels, params, ctx); };
        std::vector<ag::Var<double>> main{z};
        for (const auto& p : heads.main_parameters()) main.push_back(p);
        err["lvae"] = gradcheck_split(
            main, [&] { terms().objective.backward(); }, [&] { return terms().reported; });
        err["lvae adversary"] = gradcheck_split(
            heads.adversary_parameters(), [&] { terms().objective.backward(); },
            [&] { return terms().comp_ce.item(); });
    }
    {
        model::Discriminator<double> d(model::tiny_realism_spec(), {1, 8, 8}, 1);
        model::CDModel<double> cd(model::Architecture::tiny(8, 2, 2), model::change_head_spec(), 2);
        d.set_trainable(false);
        cd.set_trainable(false);
        model::DVAE<double> gen(model::Architecture::tiny(8, 2, 2), 3);
        auto za = ag::Var<double>::parameter(random_tensor({6, 2}, 5));
        auto zb = ag::Var<double>::parameter(random_tensor({6, 2}, 6));
        auto zx = ag::Var<double>::parameter(random_tensor({6, 2}, 7));
        auto loss = [&] {
            std::mt19937_64 rng(9);
            const auto pair = model::build_mixed_pair(za, zb, rng);
            const auto xa = gen.decode(pair.z_pa, zx, ctx), xb = gen.decode(pair.z_pb, zx, ctx);
            return model::conditioning_loss(xa, xb, pair, za, zb, d, cd, model::CondParams{0.7, 2.0}, rng).total;
        };
        std::vector<ag::Var<double>> params{za, zb, zx};
        for (const auto& p : gen.decoder.parameters()) params.push_back(p);
        err["conditioning"] = testing::gradcheck(params, loss);
    }
    // gradient reversal: identity forward, gradient scaled by -alpha exactly
    auto v = ag::Var<double>::parameter(Tensor<double>({1}, 3.0));
    const auto r = ag::grad_reverse(v, 2.5);
    ag::sum(ag::square(r)).backward();
    const bool grl = r.item() == 3.0 && v.grad()[0] == -15.0;

    bool ok = grl;
    std::ostringstream d;
    for (const auto& [name, e] : err) {
        ok = ok && e < 1e-3;
        d << name << " " << fmt(e, 2) << ", ";
    }
    d << "grl sign " << (grl ? "exact" : "wrong");
    return {ok ? Status::pass : Status::fail, "relative errors: " + d.str()};
}

// ---- 6: supervision soundness ------------------------------------------------------

Outcome supervision_soundness(int n_synth_pairs) {
    const auto cfg = synth::SynthConfig::defaults();
    int bad = 0, audited = 0;
    for (const auto& p : synth::generate_change_pairs(cfg, n_synth_pairs, 606)) {
        ++audited;
        const std::size_t diff = (p.shown_a ^ p.shown_b).count();
        bool ok = (p.label == 1) == (diff == 1);
        ok = ok && p.a.vec() == synth::render_concepts(cfg, p.shown_a, p.seed).vec();
        ok = ok && p.b.vec() == synth::render_concepts(cfg, p.shown_b, p.seed).vec();
        bad += !ok;
    }
    // line-augmented digits: real MNIST when VCE_MNIST_DIR is set, digit-like renders otherwise
    mnist::MnistSet digits;
    std::string source = "digit-like renders";
    if (const char* dir = std::getenv("VCE_MNIST_DIR"); dir && *dir) {
        const auto full = mnist::load_mnist(dir, "train");
        digits = {slice_rows(full.images, 0, 2000), std::vector<int>(full.labels.begin(), full.labels.begin() + 2000)};
        source = "MNIST";
    } else {
        const auto split = synth::generate_split(cfg, 50, 607, 1);
        digits = {split.images, split.labels()};
    }
    int mnist_bad = 0, mnist_audited = 0;
    for (const auto& p : mnist::make_mnist_pairs(digits, 2000, 608)) {
        ++mnist_audited;
        const auto split = mnist::split_lines(slice_rows(digits.images, p.seed, 1));
        int differing = 0;
        for (const auto& seg : split.segments) {
            bool diff = false;
            for (int px : seg) diff = diff || p.a[static_cast<std::size_t>(px)] != p.b[static_cast<std::size_t>(px)];
            differing += diff;
        }
        bool ok = (p.label == 1) == (differing == 1);
        ok = ok && p.a.vec() == mnist::mask_segments(split, p.shown_a).vec();
        ok = ok && p.b.vec() == mnist::mask_segments(split, p.shown_b).vec();
        mnist_bad += !ok;
    }
    const auto s = synth::generate_split(cfg, 10000, 609, 1);
    int v0 = 0, total = 0;
    for (const auto& r : s.records)
        if (r.class_id == 9) {
            ++total;
            v0 += r.variant_id == 0;
        }
    const double freq = static_cast<double>(v0) / total;
    const bool ok = bad == 0 && mnist_bad == 0 && total == 10000 && std::abs(freq - 0.5) <= 0.03;
    return {ok ? Status::pass : Status::fail,
            std::to_string(audited - bad) + "/" + std::to_string(audited) + " synthetic and " +
                std::to_string(mnist_audited - mnist_bad) + "/" + std::to_string(mnist_audited) + " " + source +
                " pair labels sound; class-9 variant frequency " + fmt(freq) + " at 1e4 samples"};
}

// ---- 10: mig calibration ------------------------------------------------------------

Outcome mig_calibration() {
    const int n = 10000, k = 8;
    std::mt19937_64 rng(1010);
    std::bernoulli_distribution coin(0.5);
    std::normal_distribution<float> noise(0.0f, 1.0f);
    std::vector<int> factors(static_cast<std::size_t>(n) * k);
    for (auto& f : factors) f = coin(rng);
    Tensor<float> perfect({n, k}), random({n, k});
    for (std::size_t i = 0; i < factors.size(); ++i) {
        perfect[i] = static_cast<float>(factors[i]);
        random[i] = noise(rng);
    }
    const double hi = metrics::mig(perfect, factors, k), lo = metrics::mig(random, factors, k);
    return {hi >= 0.95 && lo <= 0.05 ? Status::pass : Status::fail,
            "perfect code " + fmt(hi) + ", independent noise " + fmt(lo) + " at N = 1e4"};
}

// ---- 11: grid bookkeeping --------------------------------------------------------------

Outcome grid_bookkeeping() {
    const auto g = harness::GridSpec::standard();
    const auto n = g.configurations().size();
    return {n == 44 && g.run_count() == 176 ? Status::pass : Status::fail,
            std::to_string(n) + " configurations, " + std::to_string(g.run_count()) + " runs"};
}

// ---- 7-9: desk-scale training ------------------------------------------------------------

constexpr double kCpuBudgetSeconds = 4 * 3600;

struct TrainingSetup {
    bool full = false;
    int reduced_steps = 100;
    int reduced_cd_steps = 60;
    int reduced_per_class = 100;
    int reduced_eac_pairs = 10;
    std::uint64_t seed = 1;
};

// Seconds per step of a trainer at batch 128, after one warm-up step.
template <class Step>
double time_steps(Step&& step, int n) {
    step();
    const auto t0 = Clock::now();
    for (int i = 0; i < n; ++i) step();
    return seconds_since(t0) / n;
}

struct StepTimes {
    double dvae = 0, vae_ce = 0, cd = 0;
};

StepTimes measure_step_times(const synth::SynthConfig& cfg) {
    StepTimes t;
    const auto train = synth::generate_split(cfg, 13, 701, 1);
    const auto data = harness::synthetic_training_data(cfg, train, model::ModelKind::dvae, 0, 1);
    harness::BatchSampler sampler(data, 128, 64, 1);
    model::CDModel<float> cd(model::Architecture::change_discriminator(), model::change_head_spec(), 2);
    model::ModelTrainer dvae(model::ModelKind::dvae, model::Architecture::standard(),
                             model::HyperParams::selected(model::ModelKind::dvae), {}, 3);
    t.dvae = time_steps([&] { dvae.step(sampler.next(model::ModelKind::dvae)); }, 2);
    model::ModelTrainer vce(model::ModelKind::vae_ce, model::Architecture::standard(),
                            model::HyperParams::selected(model::ModelKind::vae_ce), {}, 3, &cd);
    t.vae_ce = time_steps([&] { vce.step(sampler.next(model::ModelKind::vae_ce)); }, 2);
    const auto pairs = synth::generate_change_pairs(cfg, 64, 702);
    Tensor<float> a({64, 1, 32, 32}), b({64, 1, 32, 32});
    std::vector<int> labels;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        std::copy(pairs[i].a.vec().begin(), pairs[i].a.vec().end(), a.data() + i * 1024);
        std::copy(pairs[i].b.vec().begin(), pairs[i].b.vec().end(), b.data() + i * 1024);
        labels.push_back(pairs[i].label);
    }
    model::CDTrainer cdt(cd, {}, {}, 4);
    t.cd = time_steps(
        [&] {
            const auto batch = sampler.next(model::ModelKind::dvae);
            cdt.step(batch.images, batch.labels, a, b, labels);
        },
        1);
    return t;
}

double test_accuracy(model::DVAE<float>& m, const synth::Split& test) {
    const auto probs = model::class_probabilities(m, model::encode_dataset(m, test.images).mu_y);
    const int k = probs.dim(1);
    std::vector<int> pred;
    for (int i = 0; i < probs.dim(0); ++i) {
        const float* row = probs.data() + static_cast<std::size_t>(i) * k;
        pred.push_back(static_cast<int>(std::max_element(row, row + k) - row));
    }
    return metrics::accuracy(pred, test.labels());
}

// Accuracy with batch statistics in the normalization layers (chunks of 128,
// no running-stat updates); a diagnostic for short runs whose running averages
// are still dominated by their initial values.
double batch_stat_accuracy(model::DVAE<float>& m, const synth::Split& test) {
    const nn::RunContext ctx{nn::Mode::train, nullptr, false};
    ag::NoGradGuard guard;
    const auto labels = test.labels();
    int correct = 0;
    const int n = test.images.dim(0);
    for (int b = 0; b < n; b += 128) {
        const int count = std::min(128, n - b);
        const auto x = ag::Var<float>::constant(slice_rows(test.images, b, count));
        const auto lp = m.classify_y(m.encode_y(x, ctx).mean, ctx).value();
        const int k = lp.dim(1);
        for (int i = 0; i < count; ++i) {
            const float* row = lp.data() + static_cast<std::size_t>(i) * k;
            correct += static_cast<int>(std::max_element(row, row + k) - row) == labels[b + i];
        }
    }
    return static_cast<double>(correct) / n;
}

Tensor<float> stack(const std::vector<synth::ChangePair>& pairs, bool first) {
    Tensor<float> out({static_cast<int>(pairs.size()), 1, 32, 32});
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& im = first ? pairs[i].a : pairs[i].b;
        std::copy(im.vec().begin(), im.vec().end(), out.data() + i * 1024);
    }
    return out;
}

struct TrainingRun {
    synth::SynthConfig cfg = synth::SynthConfig::defaults();
    synth::Dataset data;
    harness::TrainingData train;
    std::int64_t steps = 0, cd_steps = 0;
    int eac_pairs = 90, seeds = 5;
    std::optional<harness::CDResult> cd;
    std::unique_ptr<model::ModelTrainer> dvae;  // seed 0
};

harness::ExperimentConfig desk_config(model::ModelKind kind, std::int64_t steps, std::uint64_t seed) {
    harness::ExperimentConfig c;
    c.kind = kind;
    c.hp = model::HyperParams::selected(kind);
    c.steps = steps;
    c.seed = seed;
    c.log_every = 10;
    return c;
}

Outcome desk_dvae(TrainingRun& run, double projected, bool desk) {
    double rec_window = 0, rec_end = 0;
    int window = 0, end_n = 0;
    const std::int64_t probe = std::min<std::int64_t>(100, run.steps / 4);
    auto c = desk_config(model::ModelKind::dvae, run.steps, 11);
    c.realism_steps = 0;
    auto r = harness::train_model(c, run.train, nullptr, {},
                                  [&](std::int64_t s, const model::StepReport& rep, model::ModelTrainer&) {
                                      if (s > probe - 10 && s <= probe) {
                                          rec_window += rep.dvae.rec;
                                          ++window;
                                      }
                                      if (s > run.steps - 10) {
                                          rec_end += rep.dvae.rec;
                                          ++end_n;
                                      }
                                  });
    const double acc = test_accuracy(r.trainer->model(), run.data.test);
    const double ratio = (rec_end / end_n) / (rec_window / window);
    run.dvae = std::move(r.trainer);
    std::ostringstream d;
    d << "test accuracy " << fmt(acc) << ", rec at end / rec at step " << probe << " = " << fmt(ratio) << " after "
      << run.steps << " steps";
    if (!desk)
        d << " (batch-statistics accuracy " << fmt(batch_stat_accuracy(run.dvae->model(), run.data.test))
          << "; running normalization statistics keep weight " << fmt(std::pow(0.99, run.steps), 2)
          << " on their initial values)";
    if (!desk)
        return {Status::unmet, "UNMET (environment): 20,000 steps projected at " + fmt(projected / 3600, 3) +
                                   " h > 4 h CPU; reduced scale: " + d.str()};
    return {acc >= 0.90 && ratio < 0.5 ? Status::pass : Status::fail, d.str()};
}

Outcome desk_cd(TrainingRun& run, double projected, bool desk) {
    harness::CDConfig c;
    c.steps = run.cd_steps;
    c.seed = 12;
    harness::TrainingData d = run.train;
    d.pairs = synth::generate_change_pairs(run.cfg, desk ? 20000 : 2000, 801);
    run.cd = harness::train_cd(c, d);
    const auto held = synth::generate_change_pairs(run.cfg, 1000, 802);
    std::vector<int> labels;
    for (const auto& p : held) labels.push_back(p.label);
    const double acc = model::cd_accuracy(run.cd->model, stack(held, true), stack(held, false), labels);
    const std::string detail = "held-out pair accuracy " + fmt(acc) + " on 1000 pairs after " +
                               std::to_string(run.cd_steps) + " steps";
    if (!desk)
        return {Status::unmet, "UNMET (environment): 20,000 steps projected at " + fmt(projected / 3600, 3) +
                                   " h > 4 h CPU; reduced scale: " + detail};
    return {acc >= 0.85 ? Status::pass : Status::fail, detail};
}

Outcome desk_eac(TrainingRun& run, double projected, bool desk) {
    if (!run.cd) return {Status::fail, "no CD model"};
    const auto pairs = metrics::generate_eac_pairs(run.cfg, run.eac_pairs, 903);
    int wins = 0;
    std::ostringstream d;
    for (int s = 0; s < run.seeds; ++s) {
        std::unique_ptr<model::ModelTrainer> dvae;
        std::optional<model::Discriminator<float>> dvae_d;
        if (s == 0 && run.dvae) {
            dvae = std::move(run.dvae);
        } else {
            auto c = desk_config(model::ModelKind::dvae, run.steps, 11 + s);
            c.realism_steps = 0;
            dvae = harness::train_model(c, run.train, nullptr).trainer;
        }
        auto vc = desk_config(model::ModelKind::vae_ce, run.steps, 21 + s);
        auto v = harness::train_model(vc, run.train, &run.cd->model);
        const double sm = metrics::eac_report({&dvae->model(), nullptr, nullptr}, run.cfg, pairs,
                                              {explain::Method::sm})
                              .of(explain::Method::sm)
                              .mean;
        const double graph = metrics::eac_report({&v.trainer->model(), &run.cd->model, v.trainer->discriminator()},
                                                 run.cfg, pairs, {explain::Method::graph})
                                 .of(explain::Method::graph)
                                 .mean;
        wins += graph < sm;
        d << (s ? "; " : "") << "seed " << s << ": vae-ce graph " << fmt(graph) << " vs dvae sm " << fmt(sm);
    }
    const std::string detail = d.str() + " (" + std::to_string(wins) + "/" + std::to_string(run.seeds) + " seeds, " +
                               std::to_string(run.eac_pairs) + " pairs, " + std::to_string(run.steps) + " steps)";
    if (!desk)
        return {Status::unmet, "UNMET (environment): 5 seeds x 2 models x 20,000 steps projected at " +
                                   fmt(projected / 3600, 3) + " h > 4 h CPU; reduced scale: " + detail};
    return {wins >= 4 ? Status::pass : Status::fail, detail};
}

std::set<int> parse_criteria(const std::string& s) {
    std::set<int> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');) {
        const auto dash = item.find('-');
        if (dash == std::string::npos) {
            out.insert(std::stoi(item));
        } else {
            for (int i = std::stoi(item.substr(0, dash)); i <= std::stoi(item.substr(dash + 1)); ++i) out.insert(i);
        }
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::string criteria = "1-11";
    TrainingSetup setup;
    int synth_pairs = 10000;
    app.add_option("--criteria", criteria, "Criteria to run, e.g. 1-6,10,11");
    app.add_flag("--full", setup.full, "Run training criteria at desk scale whatever the projected runtime");
    app.add_option("--reduced-steps", setup.reduced_steps, "Model steps of the reduced-scale runs");
    app.add_option("--reduced-cd-steps", setup.reduced_cd_steps, "CD steps of the reduced-scale run");
    app.add_option("--reduced-eac-pairs", setup.reduced_eac_pairs, "eac pairs of the reduced-scale run");
    app.add_option("--synthetic-pairs", synth_pairs, "Synthetic change pairs audited for criterion 6");
    CLI11_PARSE(app, argc, argv);

    const auto selected = parse_criteria(criteria);
    int failed = 0, unmet = 0;
    auto report = [&](int id, const std::string& name, const std::function<Outcome()>& run) {
        if (!selected.count(id)) return;
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = run();
        } catch (const std::exception& e) {
            o = {Status::fail, std::string("error: ") + e.what()};
        }
        const char* tag = o.status == Status::pass ? "PASS" : o.status == Status::fail ? "FAIL" : "UNMET";
        failed += o.status == Status::fail;
        unmet += o.status == Status::unmet;
        std::cout << "criterion " << id << " " << name << ": " << tag << " - " << o.detail << " ["
                  << fmt(seconds_since(t0), 3) << " s]" << std::endl;
    };

    report(1, "graph combinatorics", graph_combinatorics);
    report(2, "shortest-path oracle", shortest_path_oracle);
    report(3, "dtw oracle", dtw_oracle);
    report(4, "analytic kl vs monte carlo", kl_monte_carlo);
    report(5, "gradient checks", gradient_checks);
    report(6, "supervision soundness", [&] { return supervision_soundness(synth_pairs); });

    if (selected.count(7) || selected.count(8) || selected.count(9)) {
        TrainingRun run;
        const auto times = measure_step_times(run.cfg);
        const double p7 = harness::kDeskSteps * times.dvae;
        const double p8 = harness::kDeskSteps * times.cd;
        const double p9 = 5.0 * harness::kDeskSteps * (times.dvae + times.vae_ce);
        std::cout << "measured seconds per step at batch 128: dvae " << fmt(times.dvae, 3) << ", vae-ce "
                  << fmt(times.vae_ce, 3) << ", cd " << fmt(times.cd, 3) << std::endl;
        const bool desk7 = setup.full || p7 <= kCpuBudgetSeconds;
        const bool desk8 = setup.full || p8 <= kCpuBudgetSeconds;
        const bool desk9 = setup.full || (p9 <= kCpuBudgetSeconds && desk7 && desk8);
        const bool all_desk = desk7 && desk8 && desk9;
        synth::DatasetCounts counts;
        if (!all_desk) counts = {setup.reduced_per_class, setup.reduced_per_class / 5};
        run.data = synth::generate_dataset(run.cfg, counts, setup.seed);
        run.train = harness::synthetic_training_data(run.cfg, run.data.train, model::ModelKind::dvae, 0, setup.seed);
        run.steps = all_desk ? harness::kDeskSteps : setup.reduced_steps;
        run.cd_steps = all_desk ? harness::kDeskSteps : setup.reduced_cd_steps;
        if (!all_desk) {
            run.eac_pairs = setup.reduced_eac_pairs;
            run.seeds = 1;
        }
        report(7, "desk-scale dvae training", [&] { return desk_dvae(run, p7, all_desk); });
        if (selected.count(8) || selected.count(9))
            report(8, "desk-scale cd training", [&] { return desk_cd(run, p8, all_desk); });
        if (selected.count(9) && !selected.count(8)) {
            harness::CDConfig c;
            c.steps = run.cd_steps;
            harness::TrainingData d = run.train;
            d.pairs = synth::generate_change_pairs(run.cfg, all_desk ? 20000 : 2000, 801);
            run.cd = harness::train_cd(c, d);
        }
        report(9, "eac trend", [&] { return desk_eac(run, p9, all_desk); });
    }

    report(10, "mig calibration", mig_calibration);
    report(11, "grid bookkeeping", grid_bookkeeping);

    std::cout << "summary: " << (failed ? "FAIL" : unmet ? "UNMET (environment)" : "PASS") << ", " << failed
              << " failed, " << unmet << " unmet" << std::endl;
    if (failed) return 1;
    return unmet ? 77 : 0;
}
