#pragma once

// Pair-based dimension conditioning: the change discriminator CD (its own
// DVAE plus a head on |mu_ya - mu_yb|), the realism discriminator D, mixed
// latent pairs that share all but one class dimension, and the conditioning
// loss that ties single dimensions to single concepts.

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "vce/model/dvae.hpp"

namespace vce::model {

// Loss of an auxiliary pass is scaled by its datapoint count relative to the
// primary pass.
double pass_ratio(int pass_datapoints, int primary_datapoints);

nn::NetworkSpec change_head_spec();
// Realism discriminator stack on 32 x 32 x 1 inputs.
nn::NetworkSpec realism_spec();
// Small realism discriminator for tests and smoke runs.
nn::NetworkSpec tiny_realism_spec();

template <class T>
class CDModel {
public:
    CDModel() = default;
    CDModel(Architecture backbone, nn::NetworkSpec head, std::uint64_t init_seed);

    // Log-probabilities [N, 2] of (bad change, good change). With `sample`
    // the class latents are drawn from the posteriors (training pass),
    // otherwise posterior means are used.
    ag::Var<T> log_probs(const ag::Var<T>& x_a, const ag::Var<T>& x_b, const nn::RunContext& ctx,
                         std::mt19937_64* sample = nullptr);
    ag::Var<T> log_probs_from_latents(const ag::Var<T>& z_a, const ag::Var<T>& z_b, const nn::RunContext& ctx);

    std::vector<ag::Var<T>> parameters() const;
    std::vector<nn::NamedTensor<T>> state();
    void set_trainable(bool trainable);

    DVAE<T> backbone;
    nn::Sequential<T> head;
};

struct CDTrainParams {
    double beta_y = 1.0;
    double beta_x = 0.5;
    double alpha = 16.0;
    double alpha_c = 50.0;

    DVAEParams dvae() const { return {beta_y, beta_x, alpha}; }
};

nlohmann::json to_json(const CDTrainParams& p);
CDTrainParams cd_params_from_json(const nlohmann::json& j);

// Pair pass of CD training: ELBO on both pair members plus alpha_c times the
// cross-entropy of the change head on sampled class latents.
template <class T>
struct CDPairPass {
    DVAEPass<T> elbo;
    ag::Var<T> change_ce;
    ag::Var<T> objective;
    double accuracy = 0;
};

template <class T>
CDPairPass<T> cd_pair_forward(CDModel<T>& model, const ag::Var<T>& x_a, const ag::Var<T>& x_b,
                              std::span<const int> pair_labels, const CDTrainParams& params,
                              const nn::RunContext& ctx, std::mt19937_64& noise);

struct CDStepReport {
    LossBreakdown primary;
    LossBreakdown pair_elbo;
    double change_ce = 0;
    double change_accuracy = 0;
};

class CDTrainer {
public:
    CDTrainer(CDModel<float>& model, CDTrainParams params, optim::AdamConfig adam, std::uint64_t seed);

    CDStepReport step(const Tensor<float>& images, std::span<const int> labels, const Tensor<float>& pair_a,
                      const Tensor<float>& pair_b, std::span<const int> pair_labels);

    optim::Adam<float>& optimizer() { return adam_; }
    const CDTrainParams& params() const { return params_; }

private:
    CDModel<float>& model_;
    CDTrainParams params_;
    optim::Adam<float> adam_;
    std::mt19937_64 rng_;
};

// Probability of a good change for each pair (evaluation mode, means).
std::vector<float> cd_predict(CDModel<float>& model, const Tensor<float>& x_a, const Tensor<float>& x_b,
                              int batch = 256);
double cd_accuracy(CDModel<float>& model, const Tensor<float>& x_a, const Tensor<float>& x_b,
                   std::span<const int> labels);

void save_cd(const std::filesystem::path& path, CDModel<float>& model, const CDTrainParams& params,
             const CheckpointMeta& meta, optim::Adam<float>* optimizer = nullptr);
CDModel<float> load_cd(const std::filesystem::path& path, CDTrainParams* params = nullptr,
                       CheckpointMeta* meta = nullptr);

// ---- realism discriminator --------------------------------------------------

template <class T>
class Discriminator {
public:
    Discriminator() = default;
    Discriminator(nn::NetworkSpec spec, Shape image_shape, std::uint64_t init_seed);

    // Log-probabilities [N, 2] of (synthesized, real).
    ag::Var<T> log_probs(const ag::Var<T>& x, const nn::RunContext& ctx) { return net.forward(x, ctx); }
    std::vector<ag::Var<T>> parameters() const { return net.parameters(); }
    std::vector<nn::NamedTensor<T>> state() { return net.state(); }
    void set_trainable(bool trainable) { net.set_trainable(trainable); }

    nn::Sequential<T> net;
};

struct DStepReport {
    double loss = 0;
    double accuracy = 0;
};

// Cross-entropy with label 1 for `real`, 0 for `fake`; updates only D.
DStepReport d_train_step(Discriminator<float>& d, optim::Adam<float>& adam, const Tensor<float>& real,
                         const Tensor<float>& fake, std::mt19937_64& rng);
// Probability of "real" per image (evaluation mode).
std::vector<float> d_predict(Discriminator<float>& d, const Tensor<float>& images, int batch = 256);

// Standalone realism discriminator checkpoint (kind "realism").
void save_discriminator(const std::filesystem::path& path, Discriminator<float>& d);
Discriminator<float> load_discriminator(const std::filesystem::path& path);

// ---- mixed pairs and the conditioning loss -----------------------------------

// z_pa = m_a * z_ya + (1 - m_a) * z_yb and likewise for z_pb. Shared dims
// draw their source uniformly; dim j takes z_ya in z_pa and z_yb in z_pb.
template <class T>
struct MixedPair {
    ag::Var<T> z_pa, z_pb;
    Tensor<T> mask_a, mask_b;
    std::vector<int> dim;  // j per row
};

template <class T>
MixedPair<T> build_mixed_pair(const ag::Var<T>& z_ya, const ag::Var<T>& z_yb, std::mt19937_64& rng);

struct CondParams {
    double alpha_r = 1.0;
    double alpha_p = 1.0;
};

nlohmann::json to_json(const CondParams& p);
CondParams cond_params_from_json(const nlohmann::json& j);

template <class T>
struct ConditioningTerms {
    ag::Var<T> realism;  // -log D(x_pa) - log D(x_pb), batch mean
    ag::Var<T> change;   // scale * -log CD(x_pa, x_pb), batch mean
    ag::Var<T> scale;    // n_y * |z_pa - z_pb|_1 / |z_ya - z_yb|_1 per row
    ag::Var<T> total;    // alpha_r realism + alpha_p change
};

// D runs in training mode without running-stat updates; CD runs in
// evaluation mode on posterior means. Neither receives gradient when frozen
// by the caller.
template <class T>
ConditioningTerms<T> conditioning_loss(const ag::Var<T>& x_pa, const ag::Var<T>& x_pb, const MixedPair<T>& pair,
                                       const ag::Var<T>& z_ya, const ag::Var<T>& z_yb, Discriminator<T>& d,
                                       CDModel<T>& cd, const CondParams& params, std::mt19937_64& rng);

// Random permutation without fixed points (cyclic, Sattolo).
std::vector<std::size_t> derangement(std::size_t n, std::mt19937_64& rng);

}  // namespace vce::model
