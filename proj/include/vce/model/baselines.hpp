#pragma once

// Comparison regularizers layered on the DVAE loss: LVAE (per-dimension
// concept classifiers with reversed complementary classifiers), GVAE
// (averaging a named shared dimension over a pair) and ADA-GVAE (averaging all
// but the most divergent dimension over a single-change pair).

#include <cstdint>
#include <span>
#include <vector>

#include "vce/model/dvae.hpp"

namespace vce::model {

struct LVAEParams {
    double alpha_d = 20.0;
    int n_c = 8;

    void validate() const;
};

nlohmann::json to_json(const LVAEParams& p);
LVAEParams lvae_params_from_json(const nlohmann::json& j);

// FC(2) + softmax on a single class dimension.
nn::NetworkSpec dim_classifier_spec();
// FC(50) + LReLU + BN -> FC(2) + softmax on the remaining n_c - 1 dimensions.
nn::NetworkSpec complementary_classifier_spec();

template <class T>
class LVAEHeads {
public:
    LVAEHeads() = default;
    LVAEHeads(int n_c, std::uint64_t init_seed);

    int n_c() const { return static_cast<int>(dim.size()); }
    // Per-dimension classifiers, trained with the main model.
    std::vector<ag::Var<T>> main_parameters() const;
    // Complementary classifiers, trained on their own loss.
    std::vector<ag::Var<T>> adversary_parameters() const;
    std::vector<ag::Var<T>> parameters() const;
    std::vector<nn::NamedTensor<T>> state();

    std::vector<nn::Sequential<T>> dim, comp;
};

// Sums over concepts of batch-mean cross-entropies. `objective` is
// alpha_d dim_ce + comp_ce with the complementary classifiers fed through
// grad_reverse(z_y, alpha_d), so the classifiers descend comp_ce while the
// encoder descends -alpha_d comp_ce. `reported` is alpha_d (dim_ce - comp_ce).
template <class T>
struct LVAETerms {
    ag::Var<T> dim_ce, comp_ce, objective;
    double reported = 0;
};

// dim_labels: row-major [N, n_c] presence flags (0/1).
template <class T>
LVAETerms<T> lvae_terms(LVAEHeads<T>& heads, const ag::Var<T>& z_y, std::span<const int> dim_labels,
                        const LVAEParams& params, const nn::RunContext& ctx);

// ---- pair averaging ---------------------------------------------------------

template <class T>
struct PairPosteriors {
    LatentGaussian<T> a, b;
};

// Replaces the dims flagged in `mask` ([N, W], 1 = average) in both
// posteriors by the pair's arithmetic mean of means and of variances. Other
// dims pass through bit for bit.
template <class T>
PairPosteriors<T> average_dims(const LatentGaussian<T>& q_a, const LatentGaussian<T>& q_b, const Tensor<T>& mask);

// GVAE: average dimension shared_dim[r] of row r.
template <class T>
PairPosteriors<T> gvae_average(const LatentGaussian<T>& q_a, const LatentGaussian<T>& q_b,
                               std::span<const int> shared_dim);

// 0.5 [KL(a || b) + KL(b || a)] of univariate Gaussians given log-variances.
double symmetric_kl(double mean_a, double logvar_a, double mean_b, double logvar_b);
// Index of the largest divergence, lowest index on ties.
int argmax_divergence(std::span<const double> divergences);

template <class T>
struct AdaPair {
    PairPosteriors<T> q;
    std::vector<int> independent_dim;  // per row
};

// ADA-GVAE: per row, leave the dim of largest symmetric KL independent and
// average all others.
template <class T>
AdaPair<T> ada_gvae_pair_step(const LatentGaussian<T>& q_a, const LatentGaussian<T>& q_b);

enum class PairAveraging { gvae, ada_gvae };

// ELBO pass over a batch of pairs with class-latent averaging. Both members
// are encoded in one batch; the loss is the mean over the 2P datapoints.
template <class T>
struct PairElboPass {
    ag::Var<T> kl_y, kl_x, rec, objective;
    std::vector<int> averaged_out;  // ADA: independent dim; GVAE: shared dim
};

template <class T>
PairElboPass<T> pair_elbo_forward(DVAE<T>& model, const ag::Var<T>& x_a, const ag::Var<T>& x_b,
                                  PairAveraging mode, std::span<const int> shared_dim, const DVAEParams& params,
                                  const nn::RunContext& ctx, std::mt19937_64& noise);

}  // namespace vce::model
