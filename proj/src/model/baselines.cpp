#include "vce/model/baselines.hpp"

#include <cmath>
#include <numeric>

namespace vce::model {

using nn::LayerSpec;

void LVAEParams::validate() const {
    if (!(alpha_d >= 0)) throw std::invalid_argument("lvae: alpha_d must be >= 0");
    if (n_c < 2) throw std::invalid_argument("lvae: n_c must be at least 2");
}

nlohmann::json to_json(const LVAEParams& p) { return {{"alpha_d", p.alpha_d}, {"n_c", p.n_c}}; }

LVAEParams lvae_params_from_json(const nlohmann::json& j) {
    LVAEParams p;
    p.alpha_d = j.value("alpha_d", p.alpha_d);
    p.n_c = j.value("n_c", p.n_c);
    return p;
}

nn::NetworkSpec dim_classifier_spec() { return {LayerSpec::fc(2), LayerSpec::softmax_out()}; }

nn::NetworkSpec complementary_classifier_spec() {
    return {LayerSpec::fc(50), LayerSpec::lrelu(), LayerSpec::bn(), LayerSpec::fc(2), LayerSpec::softmax_out()};
}

template <class T>
LVAEHeads<T>::LVAEHeads(int n_c, std::uint64_t init_seed) {
    if (n_c < 2) throw std::invalid_argument("lvae: n_c must be at least 2");
    std::mt19937_64 rng(init_seed);
    for (int i = 0; i < n_c; ++i) {
        dim.emplace_back("lvae.dim" + std::to_string(i), dim_classifier_spec(), Shape{1}, rng);
        comp.emplace_back("lvae.comp" + std::to_string(i), complementary_classifier_spec(), Shape{n_c - 1}, rng);
    }
}

template <class T>
std::vector<ag::Var<T>> LVAEHeads<T>::main_parameters() const {
    std::vector<ag::Var<T>> out;
    for (const auto& n : dim)
        for (const auto& p : n.parameters()) out.push_back(p);
    return out;
}

template <class T>
std::vector<ag::Var<T>> LVAEHeads<T>::adversary_parameters() const {
    std::vector<ag::Var<T>> out;
    for (const auto& n : comp)
        for (const auto& p : n.parameters()) out.push_back(p);
    return out;
}

template <class T>
std::vector<ag::Var<T>> LVAEHeads<T>::parameters() const {
    auto out = main_parameters();
    for (const auto& p : adversary_parameters()) out.push_back(p);
    return out;
}

template <class T>
std::vector<nn::NamedTensor<T>> LVAEHeads<T>::state() {
    std::vector<nn::NamedTensor<T>> out;
    for (auto* group : {&dim, &comp})
        for (auto& n : *group)
            for (const auto& t : n.state()) out.push_back(t);
    return out;
}

template <class T>
LVAETerms<T> lvae_terms(LVAEHeads<T>& heads, const ag::Var<T>& z_y, std::span<const int> dim_labels,
                        const LVAEParams& params, const nn::RunContext& ctx) {
    const int n = z_y.shape()[0], n_c = heads.n_c();
    if (z_y.shape()[1] != n_c)
        throw std::invalid_argument("lvae: z_y width " + std::to_string(z_y.shape()[1]) + " does not match " +
                                    std::to_string(n_c) + " concepts");
    if (dim_labels.size() != static_cast<std::size_t>(n) * n_c)
        throw std::invalid_argument("lvae: dimension labels missing or of wrong size");
    const ag::Var<T> reversed = ag::grad_reverse(z_y, T(params.alpha_d));
    LVAETerms<T> t;
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (int i = 0; i < n_c; ++i) {
        for (int r = 0; r < n; ++r) labels[r] = dim_labels[static_cast<std::size_t>(r) * n_c + i];
        std::vector<int> others;
        for (int c = 0; c < n_c; ++c)
            if (c != i) others.push_back(c);
        const auto own = ag::mean(ag::nll_rows(heads.dim[i].forward(ag::slice_cols(z_y, i, 1), ctx),
                                               std::span<const int>(labels)));
        const auto rest = ag::mean(ag::nll_rows(
            heads.comp[i].forward(ag::gather_cols(reversed, std::span<const int>(others)), ctx),
            std::span<const int>(labels)));
        t.dim_ce = t.dim_ce ? ag::add(t.dim_ce, own) : own;
        t.comp_ce = t.comp_ce ? ag::add(t.comp_ce, rest) : rest;
    }
    t.objective = ag::add(ag::scale(t.dim_ce, T(params.alpha_d)), t.comp_ce);
    t.reported = params.alpha_d * (static_cast<double>(t.dim_ce.item()) - static_cast<double>(t.comp_ce.item()));
    return t;
}

template <class T>
PairPosteriors<T> average_dims(const LatentGaussian<T>& q_a, const LatentGaussian<T>& q_b, const Tensor<T>& mask) {
    if (q_a.mean.shape() != q_b.mean.shape() || mask.shape() != q_a.mean.shape())
        throw std::invalid_argument("pair averaging: posterior and mask shapes differ");
    Tensor<T> keep(mask.shape());
    for (std::size_t k = 0; k < mask.size(); ++k) keep[k] = T(1) - mask[k];
    const auto mean = ag::scale(ag::add(q_a.mean, q_b.mean), T(0.5));
    // log((e^a + e^b) / 2) = a + log((1 + e^(b - a)) / 2), exact for a = b
    const auto logvar =
        ag::add(q_a.logvar,
                ag::log(ag::scale(ag::add_scalar(ag::exp(ag::sub(q_b.logvar, q_a.logvar)), T(1)), T(0.5))));
    auto mix = [&](const ag::Var<T>& avg, const ag::Var<T>& own) {
        return ag::add(ag::mul_const(avg, mask), ag::mul_const(own, keep));
    };
    PairPosteriors<T> out;
    out.a = {mix(mean, q_a.mean), mix(logvar, q_a.logvar)};
    out.b = {mix(mean, q_b.mean), mix(logvar, q_b.logvar)};
    return out;
}

template <class T>
PairPosteriors<T> gvae_average(const LatentGaussian<T>& q_a, const LatentGaussian<T>& q_b,
                               std::span<const int> shared_dim) {
    const int n = q_a.mean.shape()[0], w = q_a.mean.shape()[1];
    if (shared_dim.size() != static_cast<std::size_t>(n))
        throw std::invalid_argument("gvae: one shared dimension per pair required");
    Tensor<T> mask({n, w});
    for (int r = 0; r < n; ++r) {
        if (shared_dim[r] < 0 || shared_dim[r] >= w)
            throw std::out_of_range("gvae: shared dimension " + std::to_string(shared_dim[r]) + " outside [0, " +
                                    std::to_string(w) + ")");
        mask[static_cast<std::size_t>(r) * w + shared_dim[r]] = T(1);
    }
    return average_dims(q_a, q_b, mask);
}

double symmetric_kl(double mean_a, double logvar_a, double mean_b, double logvar_b) {
    const double va = std::exp(logvar_a), vb = std::exp(logvar_b), d2 = (mean_a - mean_b) * (mean_a - mean_b);
    const double ab = 0.5 * (logvar_b - logvar_a + (va + d2) / vb - 1.0);
    const double ba = 0.5 * (logvar_a - logvar_b + (vb + d2) / va - 1.0);
    return 0.5 * (ab + ba);
}

int argmax_divergence(std::span<const double> divergences) {
    if (divergences.empty()) throw std::invalid_argument("argmax of an empty divergence list");
    int best = 0;
    for (std::size_t i = 1; i < divergences.size(); ++i)
        if (divergences[i] > divergences[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    return best;
}

template <class T>
AdaPair<T> ada_gvae_pair_step(const LatentGaussian<T>& q_a, const LatentGaussian<T>& q_b) {
    if (q_a.mean.shape() != q_b.mean.shape()) throw std::invalid_argument("ada-gvae: posterior shapes differ");
    const int n = q_a.mean.shape()[0], w = q_a.mean.shape()[1];
    AdaPair<T> out;
    Tensor<T> mask({n, w}, T(1));
    std::vector<double> div(static_cast<std::size_t>(w));
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < w; ++c) {
            const std::size_t k = static_cast<std::size_t>(r) * w + c;
            div[c] = symmetric_kl(q_a.mean.value()[k], q_a.logvar.value()[k], q_b.mean.value()[k],
                                  q_b.logvar.value()[k]);
        }
        const int j = argmax_divergence(div);
        out.independent_dim.push_back(j);
        mask[static_cast<std::size_t>(r) * w + j] = T(0);
    }
    out.q = average_dims(q_a, q_b, mask);
    return out;
}

template <class T>
PairElboPass<T> pair_elbo_forward(DVAE<T>& model, const ag::Var<T>& x_a, const ag::Var<T>& x_b,
                                  PairAveraging mode, std::span<const int> shared_dim, const DVAEParams& params,
                                  const nn::RunContext& ctx, std::mt19937_64& noise) {
    const int p = x_a.shape()[0];
    if (x_b.shape()[0] != p) throw std::invalid_argument("pair pass: pair members differ in count");
    const auto x = ag::concat_rows(x_a, x_b);
    const auto q_y = model.encode_y(x, ctx);
    const auto q_x = model.encode_x(x, ctx);
    std::vector<std::size_t> first(static_cast<std::size_t>(p)), second(static_cast<std::size_t>(p));
    std::iota(first.begin(), first.end(), std::size_t{0});
    std::iota(second.begin(), second.end(), static_cast<std::size_t>(p));
    auto rows = [](const LatentGaussian<T>& q, const std::vector<std::size_t>& idx) {
        const std::span<const std::size_t> s(idx);
        return LatentGaussian<T>{ag::gather_rows(q.mean, s), ag::gather_rows(q.logvar, s)};
    };
    const auto qa = rows(q_y, first), qb = rows(q_y, second);
    PairElboPass<T> out;
    PairPosteriors<T> avg;
    if (mode == PairAveraging::gvae) {
        avg = gvae_average(qa, qb, shared_dim);
        out.averaged_out.assign(shared_dim.begin(), shared_dim.end());
    } else {
        auto ada = ada_gvae_pair_step(qa, qb);
        avg = std::move(ada.q);
        out.averaged_out = std::move(ada.independent_dim);
    }
    const LatentGaussian<T> q_y_avg{ag::concat_rows(avg.a.mean, avg.b.mean),
                                    ag::concat_rows(avg.a.logvar, avg.b.logvar)};
    const auto z_y = reparameterize(q_y_avg, noise);
    const auto z_x = reparameterize(q_x, noise);
    const auto recon = model.decode(z_y, z_x, ctx);
    out.kl_y = kl_to_standard_normal(q_y_avg);
    out.kl_x = kl_to_standard_normal(q_x);
    out.rec = reconstruction_error(x, recon);
    out.objective =
        ag::add(ag::add(ag::scale(out.kl_y, T(params.beta_y)), ag::scale(out.kl_x, T(params.beta_x))), out.rec);
    return out;
}

#define VCE_BASELINES(T)                                                                                      \
    template class LVAEHeads<T>;                                                                              \
    template LVAETerms<T> lvae_terms(LVAEHeads<T>&, const ag::Var<T>&, std::span<const int>, const LVAEParams&, \
                                     const nn::RunContext&);                                                  \
    template PairPosteriors<T> average_dims(const LatentGaussian<T>&, const LatentGaussian<T>&, const Tensor<T>&); \
    template PairPosteriors<T> gvae_average(const LatentGaussian<T>&, const LatentGaussian<T>&,               \
                                            std::span<const int>);                                            \
    template AdaPair<T> ada_gvae_pair_step(const LatentGaussian<T>&, const LatentGaussian<T>&);               \
    template PairElboPass<T> pair_elbo_forward(DVAE<T>&, const ag::Var<T>&, const ag::Var<T>&, PairAveraging,   \
                                               std::span<const int>, const DVAEParams&, const nn::RunContext&,  \
                                               std::mt19937_64&);

VCE_BASELINES(float)
VCE_BASELINES(double)

}  // namespace vce::model
