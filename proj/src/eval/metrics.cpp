#include "vce/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include "vce/core/random.hpp"
#include "vce/simd/kernels.hpp"

namespace vce::metrics {

void EACConfig::validate() const {
    if (!(epsilon > 0)) throw std::invalid_argument("eac: epsilon must be positive");
    if (pairs < 1) throw std::invalid_argument("eac: pair count must be positive");
}

double state_cost(const synth::Image& x_c, const synth::Image& x_t, double epsilon) {
    if (x_c.shape() != x_t.shape())
        throw std::invalid_argument("state_cost: shapes differ (" + shape_str(x_c.shape()) + " vs " +
                                    shape_str(x_t.shape()) + ")");
    return simd::kernels().sum_sq_diff(x_c.data(), x_t.data(), x_c.size()) + epsilon;
}

double dtw_align(std::span<const synth::Image> c, std::span<const synth::Image> t, double epsilon) {
    if (c.empty() || t.empty()) throw std::invalid_argument("dtw_align: empty sequence");
    const std::size_t n = c.size(), m = t.size();
    std::vector<double> d((n + 1) * (m + 1), INFINITY);
    auto at = [&](std::size_t i, std::size_t j) -> double& { return d[i * (m + 1) + j]; };
    at(0, 0) = 0;
    for (std::size_t i = 1; i <= n; ++i)
        for (std::size_t j = 1; j <= m; ++j)
            at(i, j) = state_cost(c[i - 1], t[j - 1], epsilon) +
                       std::min({at(i - 1, j - 1), at(i - 1, j), at(i, j - 1)});
    return at(n, m);
}

double eac(std::span<const synth::Image> candidate, const std::vector<std::vector<synth::Image>>& truths,
           double epsilon) {
    if (truths.empty()) throw std::invalid_argument("eac: no ground-truth sequences");
    double best = INFINITY;
    for (const auto& t : truths) best = std::min(best, dtw_align(candidate, t, epsilon));
    return best;
}

double eac(std::span<const synth::Image> candidate, const synth::SynthConfig& config,
           const synth::SyntheticDatapoint& a, const synth::ConceptSet& b_concepts, double epsilon) {
    const std::size_t n = (a.concepts ^ b_concepts).count();
    if (n > 8) throw std::invalid_argument("eac: more than 8 changed concepts");
    return eac(candidate, synth::ground_truth_explanations(config, a, b_concepts), epsilon);
}

std::vector<EacPair> generate_eac_pairs(const synth::SynthConfig& config, int count, std::uint64_t seed) {
    if (count < 0) throw std::invalid_argument("eac pairs: count must be >= 0");
    const int classes = static_cast<int>(config.classes.size());
    if (classes < 2) throw std::invalid_argument("eac pairs: need at least two classes");
    std::vector<EacPair> out;
    for (int i = 0; i < count; ++i) {
        Rng rng(derive_seed(seed, 41, static_cast<std::uint64_t>(i)));
        std::uniform_int_distribution<int> pick(0, classes - 1), other(0, classes - 2);
        const int ca = pick(rng);
        int cb = other(rng);
        if (cb >= ca) ++cb;
        auto variant = [&](int c) {
            return std::uniform_int_distribution<int>(0, static_cast<int>(config.classes[c].variants.size()) - 1)(rng);
        };
        const int va = variant(ca), vb = variant(cb);
        const std::uint64_t na = rng(), nb = rng();
        out.push_back({synth::make_datapoint(config, ca, va, na), synth::make_datapoint(config, cb, vb, nb)});
    }
    return out;
}

nlohmann::json eac_pairs_json(const std::vector<EacPair>& pairs) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& p : pairs)
        arr.push_back({{"a", {{"class", p.a.class_id}, {"variant", p.a.variant_id}, {"seed", p.a.noise_seed}}},
                       {"b", {{"class", p.b.class_id}, {"variant", p.b.variant_id}, {"seed", p.b.noise_seed}}}});
    return {{"version", kReportSchemaVersion}, {"pairs", arr}};
}

std::vector<EacPair> eac_pairs_from_json(const synth::SynthConfig& config, const nlohmann::json& j) {
    std::vector<EacPair> out;
    auto dp = [&](const nlohmann::json& e) {
        return synth::make_datapoint(config, e.at("class").get<int>(), e.at("variant").get<int>(),
                                     e.at("seed").get<std::uint64_t>());
    };
    for (const auto& e : j.at("pairs")) out.push_back({dp(e.at("a")), dp(e.at("b"))});
    return out;
}

MethodScores summarize(std::vector<double> values) {
    MethodScores s;
    s.values = std::move(values);
    if (s.values.empty()) return s;
    s.mean = std::accumulate(s.values.begin(), s.values.end(), 0.0) / static_cast<double>(s.values.size());
    double v = 0;
    for (double x : s.values) v += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(v / static_cast<double>(s.values.size()));
    return s;
}

const MethodScores& EacReport::of(explain::Method m) const {
    for (std::size_t i = 0; i < methods.size(); ++i)
        if (methods[i] == m) return scores[i];
    throw std::invalid_argument("eac report: method " + explain::method_name(m) + " not evaluated");
}

nlohmann::json EacReport::to_json() const {
    nlohmann::json j{{"version", kReportSchemaVersion},
                     {"selection_score", selection_score},
                     {"best_method", explain::method_name(best)}};
    for (std::size_t i = 0; i < methods.size(); ++i)
        j["methods"][explain::method_name(methods[i])] = {
            {"mean", scores[i].mean}, {"std", scores[i].std}, {"values", scores[i].values}};
    return j;
}

EacReport eac_report(const explain::ModelBundle& bundle, const synth::SynthConfig& config,
                     const std::vector<EacPair>& pairs, const std::vector<explain::Method>& methods,
                     const EACConfig& eac_config, const explain::GraphParams& graph) {
    eac_config.validate();
    if (methods.empty()) throw std::invalid_argument("eac report: no methods");
    EacReport r;
    r.methods = methods;
    for (explain::Method m : methods) {
        std::vector<double> values;
        for (const auto& p : pairs) {
            const auto ex = explain::explain_pair(bundle, p.a.image, p.b.image, m, graph);
            values.push_back(eac(ex.sequence(), config, p.a, p.b.concepts, eac_config.epsilon));
        }
        r.scores.push_back(summarize(std::move(values)));
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < methods.size(); ++i)
        if (r.scores[i].mean < r.scores[best].mean) best = i;
    r.best = methods[best];
    r.selection_score = r.scores[best].mean;
    return r;
}

// ---- mig ------------------------------------------------------------------

std::vector<int> discretize(const Tensor<float>& latents, int bins, bool quantile) {
    if (bins < 2) throw std::invalid_argument("discretize: need at least two bins");
    const int n = latents.dim(0), l = latents.dim(1);
    std::vector<int> out(static_cast<std::size_t>(n) * l);
    for (int j = 0; j < l; ++j) {
        std::vector<float> col(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) col[i] = latents[static_cast<std::size_t>(i) * l + j];
        if (quantile) {
            std::vector<float> sorted = col;
            std::sort(sorted.begin(), sorted.end());
            for (int i = 0; i < n; ++i) {
                const auto rank = std::lower_bound(sorted.begin(), sorted.end(), col[i]) - sorted.begin();
                out[static_cast<std::size_t>(i) * l + j] =
                    static_cast<int>(static_cast<std::int64_t>(rank) * bins / n);
            }
        } else {
            const auto [lo, hi] = std::minmax_element(col.begin(), col.end());
            const double width = (static_cast<double>(*hi) - *lo) / bins;
            for (int i = 0; i < n; ++i) {
                const int b = width > 0 ? static_cast<int>((col[i] - static_cast<double>(*lo)) / width) : 0;
                out[static_cast<std::size_t>(i) * l + j] = std::min(b, bins - 1);
            }
        }
    }
    return out;
}

double entropy(std::span<const int> a) {
    std::map<int, std::size_t> count;
    for (int v : a) ++count[v];
    double h = 0;
    const double n = static_cast<double>(a.size());
    for (const auto& [v, c] : count) h -= c / n * std::log(c / n);
    return h;
}

double mutual_information(std::span<const int> a, std::span<const int> b) {
    if (a.size() != b.size()) throw std::invalid_argument("mutual_information: lengths differ");
    std::map<int, std::size_t> ca, cb;
    std::map<std::pair<int, int>, std::size_t> cab;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ++ca[a[i]];
        ++cb[b[i]];
        ++cab[{a[i], b[i]}];
    }
    const double n = static_cast<double>(a.size());
    double mi = 0;
    for (const auto& [k, c] : cab) mi += c / n * std::log(c * n / (static_cast<double>(ca[k.first]) * cb[k.second]));
    return std::max(mi, 0.0);
}

double mig(const Tensor<float>& latents, std::span<const int> factors, int n_factors, const MigConfig& config) {
    const int n = latents.dim(0), l = latents.dim(1);
    if (n < config.bins) throw std::invalid_argument("mig: fewer datapoints than bins");
    if (factors.size() != static_cast<std::size_t>(n) * n_factors)
        throw std::invalid_argument("mig: factor matrix does not match the latent count");
    if (l < 2) throw std::invalid_argument("mig: needs at least two latent dims");
    const auto codes = discretize(latents, config.bins, config.quantile);
    std::vector<std::vector<int>> dims(static_cast<std::size_t>(l), std::vector<int>(static_cast<std::size_t>(n)));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < l; ++j) dims[j][i] = codes[static_cast<std::size_t>(i) * l + j];
    double total = 0;
    int used = 0;
    for (int k = 0; k < n_factors; ++k) {
        std::vector<int> f(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) f[i] = factors[static_cast<std::size_t>(i) * n_factors + k];
        const double h = entropy(f);
        if (h <= 0) continue;
        std::vector<double> mi;
        for (int j = 0; j < l; ++j) mi.push_back(mutual_information(dims[j], f));
        std::partial_sort(mi.begin(), mi.begin() + 2, mi.end(), std::greater<>());
        total += (mi[0] - mi[1]) / h;
        ++used;
    }
    if (used == 0) return 0.0;
    return std::clamp(total / used, 0.0, 1.0);
}

// ---- logistic probe ----------------------------------------------------------

namespace {

// Penalized negative log-likelihood and its gradient.
double probe_objective(const std::vector<double>& x, std::span<const int> y, int n, int f, int classes,
                       const std::vector<double>& w, double l2, std::vector<double>* grad) {
    const int stride = f + 1;
    if (grad) std::fill(grad->begin(), grad->end(), 0.0);
    double loss = 0;
    std::vector<double> z(static_cast<std::size_t>(classes));
    for (int i = 0; i < n; ++i) {
        const double* xi = &x[static_cast<std::size_t>(i) * f];
        double mx = -INFINITY;
        for (int c = 0; c < classes; ++c) {
            const double* wc = &w[static_cast<std::size_t>(c) * stride];
            double s = wc[f];
            for (int k = 0; k < f; ++k) s += wc[k] * xi[k];
            z[c] = s;
            mx = std::max(mx, s);
        }
        double se = 0;
        for (int c = 0; c < classes; ++c) se += std::exp(z[c] - mx);
        const double lse = mx + std::log(se);
        loss += lse - z[y[i]];
        if (grad)
            for (int c = 0; c < classes; ++c) {
                const double g = std::exp(z[c] - lse) - (c == y[i] ? 1.0 : 0.0);
                double* gc = &(*grad)[static_cast<std::size_t>(c) * stride];
                for (int k = 0; k < f; ++k) gc[k] += g * xi[k];
                gc[f] += g;
            }
    }
    for (int c = 0; c < classes; ++c)
        for (int k = 0; k < f; ++k) {
            const double v = w[static_cast<std::size_t>(c) * stride + k];
            loss += 0.5 * l2 * v * v;
            if (grad) (*grad)[static_cast<std::size_t>(c) * stride + k] += l2 * v;
        }
    return loss;
}

}  // namespace

void LogisticProbe::fit(const Tensor<float>& x, std::span<const int> labels, int classes, const ProbeConfig& config) {
    const int n = x.dim(0), f = x.dim(1);
    if (labels.size() != static_cast<std::size_t>(n)) throw std::invalid_argument("probe: label count differs");
    if (n == 0) throw std::invalid_argument("probe: no training data");
    for (int y : labels)
        if (y < 0 || y >= classes) throw std::invalid_argument("probe: label out of range");
    classes_ = classes;
    features_ = f;
    mean_.assign(static_cast<std::size_t>(f), 0.0);
    scale_.assign(static_cast<std::size_t>(f), 1.0);
    for (int k = 0; k < f; ++k) {
        double m = 0, v = 0;
        for (int i = 0; i < n; ++i) m += x[static_cast<std::size_t>(i) * f + k];
        m /= n;
        for (int i = 0; i < n; ++i) v += std::pow(x[static_cast<std::size_t>(i) * f + k] - m, 2);
        mean_[k] = m;
        scale_[k] = v > 0 ? std::sqrt(v / n) : 1.0;
    }
    std::vector<double> xs(static_cast<std::size_t>(n) * f);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < f; ++k)
            xs[static_cast<std::size_t>(i) * f + k] = (x[static_cast<std::size_t>(i) * f + k] - mean_[k]) / scale_[k];

    // gradient descent with backtracking line search; step grows after success
    w_.assign(static_cast<std::size_t>(classes) * (f + 1), 0.0);
    std::vector<double> g(w_.size()), trial(w_.size());
    double loss = probe_objective(xs, labels, n, f, classes, w_, config.l2, &g);
    double step = 1.0 / n;
    iterations_ = 0;
    for (; iterations_ < config.max_iter; ++iterations_) {
        double gg = 0;
        for (double v : g) gg += v * v;
        if (std::sqrt(gg) / n < config.tol) break;
        for (;;) {
            for (std::size_t k = 0; k < w_.size(); ++k) trial[k] = w_[k] - step * g[k];
            const double t = probe_objective(xs, labels, n, f, classes, trial, config.l2, nullptr);
            if (t <= loss - 0.5 * step * gg) {
                w_.swap(trial);
                loss = probe_objective(xs, labels, n, f, classes, w_, config.l2, &g);
                step *= 1.5;
                break;
            }
            step *= 0.5;
            if (step < 1e-16) return;
        }
    }
}

std::vector<int> LogisticProbe::predict(const Tensor<float>& x) const {
    if (x.dim(1) != features_) throw std::invalid_argument("probe: feature count differs from training");
    const int n = x.dim(0), f = features_, stride = f + 1;
    std::vector<int> out(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        double best = -INFINITY;
        for (int c = 0; c < classes_; ++c) {
            double s = w_[static_cast<std::size_t>(c) * stride + f];
            for (int k = 0; k < f; ++k)
                s += w_[static_cast<std::size_t>(c) * stride + k] *
                     ((x[static_cast<std::size_t>(i) * f + k] - mean_[k]) / scale_[k]);
            if (s > best) {
                best = s;
                out[i] = c;
            }
        }
    }
    return out;
}

double LogisticProbe::accuracy(const Tensor<float>& x, std::span<const int> labels) const {
    const auto p = predict(x);
    return metrics::accuracy(p, labels);
}

double accuracy(std::span<const int> predicted, std::span<const int> labels) {
    if (predicted.size() != labels.size()) throw std::invalid_argument("accuracy: lengths differ");
    if (labels.empty()) return 0.0;
    std::size_t hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i];
    return static_cast<double>(hit) / static_cast<double>(labels.size());
}

// ---- representation report ------------------------------------------------------

nlohmann::json RepresentationReport::to_json() const {
    return {{"version", kReportSchemaVersion}, {"mig", mig}, {"rec", rec}, {"kl_y", kl_y}, {"kl_x", kl_x},
            {"acc", acc}, {"l_acc_y", l_acc_y}, {"l_acc_x", l_acc_x}};
}

std::vector<int> concept_factors(const std::vector<synth::Record>& records) {
    std::vector<int> out;
    out.reserve(records.size() * synth::kNumConcepts);
    for (const auto& r : records)
        for (int k = 0; k < synth::kNumConcepts; ++k) out.push_back(r.concepts[k] ? 1 : 0);
    return out;
}

RepresentationReport representation_report(model::DVAE<float>& model, const Tensor<float>& train_images,
                                           std::span<const int> train_labels, const Tensor<float>& test_images,
                                           std::span<const int> test_labels, std::span<const int> test_factors,
                                           const MigConfig& mig_config, const ProbeConfig& probe) {
    RepresentationReport r;
    const int classes = model.arch().n_classes;
    const auto elbo = model::elbo_terms(model, test_images);
    r.rec = elbo.rec;
    r.kl_y = elbo.kl_y;
    r.kl_x = elbo.kl_x;
    const auto train = model::encode_dataset(model, train_images);
    const auto test = model::encode_dataset(model, test_images);
    const auto probs = model::class_probabilities(model, test.mu_y);
    std::vector<int> pred(test_labels.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const float* row = probs.data() + i * classes;
        pred[i] = static_cast<int>(std::max_element(row, row + classes) - row);
    }
    r.acc = accuracy(pred, test_labels);
    LogisticProbe py, px;
    py.fit(train.mu_y, train_labels, classes, probe);
    px.fit(train.mu_x, train_labels, classes, probe);
    r.l_acc_y = py.accuracy(test.mu_y, test_labels);
    r.l_acc_x = px.accuracy(test.mu_x, test_labels);
    const int n_factors = test_images.dim(0) > 0 ? static_cast<int>(test_factors.size() / test_images.dim(0)) : 0;
    r.mig = n_factors > 0 ? mig(test.mu_y, test_factors, n_factors, mig_config) : 0.0;
    return r;
}

// ---- exemplar-variant experiment -------------------------------------------------

nlohmann::json VariantExperiment::to_json() const {
    return {{"p_classes_7_8", p_78}, {"p_other_classes", p_other}, {"n_classes_7_8", n_78},
            {"n_other_classes", n_other}, {"skipped", skipped}};
}

int designated_variant(const synth::SynthConfig& config) {
    const auto& nine = config.classes.at(9).variants;
    int best = 0;
    std::size_t best_shared = 0;
    for (std::size_t v = 0; v < nine.size(); ++v) {
        std::size_t shared = 0;
        for (int c : {7, 8})
            for (const auto& w : config.classes.at(c).variants) shared += (nine[v] & w).count();
        if (shared > best_shared) {
            best_shared = shared;
            best = static_cast<int>(v);
        }
    }
    return best;
}

VariantExperiment exemplar_variant_experiment(const std::vector<synth::Record>& queries,
                                              const std::vector<synth::Record>& pool, int variant,
                                              const ExemplarSelector& select) {
    VariantExperiment e;
    int hit_78 = 0, hit_other = 0;
    for (std::size_t q = 0; q < queries.size(); ++q) {
        if (queries[q].class_id == 9) continue;
        const auto pick = select(q);
        if (!pick) {
            ++e.skipped;
            continue;
        }
        const bool hit = pool.at(*pick).class_id == 9 && pool.at(*pick).variant_id == variant;
        if (queries[q].class_id == 7 || queries[q].class_id == 8) {
            ++e.n_78;
            hit_78 += hit;
        } else {
            ++e.n_other;
            hit_other += hit;
        }
    }
    e.p_78 = e.n_78 ? static_cast<double>(hit_78) / e.n_78 : 0.0;
    e.p_other = e.n_other ? static_cast<double>(hit_other) / e.n_other : 0.0;
    return e;
}

VariantExperiment exemplar_variant_experiment(model::DVAE<float>& model, const synth::Split& test,
                                              const synth::SynthConfig& config, int n_queries, double t,
                                              std::uint64_t seed) {
    const explain::ExemplarPool pool = explain::make_pool(model, test.images);
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < test.records.size(); ++i)
        if (test.records[i].class_id != 9) order.push_back(i);
    Rng rng(derive_seed(seed, 43));
    std::shuffle(order.begin(), order.end(), rng);
    if (order.size() > static_cast<std::size_t>(n_queries)) order.resize(static_cast<std::size_t>(n_queries));
    std::vector<synth::Record> queries;
    for (std::size_t i : order) queries.push_back(test.records[i]);
    const std::size_t w = pool.mu_y.row_size();
    return exemplar_variant_experiment(
        queries, test.records, designated_variant(config), [&](std::size_t q) -> std::optional<std::size_t> {
            const std::span<const float> mu(pool.mu_y.data() + order[q] * w, w);
            try {
                return explain::select_exemplar(mu, pool, 9, t);
            } catch (const std::runtime_error&) {
                return std::nullopt;
            }
        });
}

}  // namespace vce::metrics
