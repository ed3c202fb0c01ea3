#pragma once

// Class-disentangled VAE: encoders for the class subspace z_y and the
// residual subspace z_x, a decoder over [z_y, z_x], a label classifier on
// z_y and an adversarial label classifier on z_x trained through gradient
// reversal.

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vce/core/autograd.hpp"
#include "vce/core/checkpoint.hpp"
#include "vce/core/nn.hpp"
#include "vce/core/optim.hpp"

namespace vce::model {

struct DVAEParams {
    double beta_y = 1.0;
    double beta_x = 1.0;
    double alpha = 1.0;

    void validate() const;
};

nlohmann::json to_json(const DVAEParams& p);
DVAEParams dvae_params_from_json(const nlohmann::json& j);

// Layer stacks for every network of a DVAE. The encoder trunk is shared in
// layout (not weights) by both encoders; the mean and log-variance heads are
// single FC layers on the flattened trunk output.
struct Architecture {
    Shape image_shape{1, 32, 32};
    int n_y = 8;
    int n_x = 8;
    int n_classes = 10;
    nn::NetworkSpec encoder_trunk;
    nn::NetworkSpec decoder;  // input width n_y + n_x
    nn::NetworkSpec classifier_y;
    nn::NetworkSpec classifier_x;

    // Main model: 8 + 8 latent dims.
    static Architecture standard(int n_y = 8, int n_x = 8);
    // Backbone of the change discriminator: 16 + 16 latent dims.
    static Architecture change_discriminator();
    // Small stack on image_size x image_size inputs, for tests and smoke runs.
    static Architecture tiny(int image_size, int n_y, int n_x);

    bool operator==(const Architecture&) const = default;
};

nlohmann::json to_json(const Architecture& a);
Architecture architecture_from_json(const nlohmann::json& j);

// Amortised diagonal Gaussian; the network emits log-variance.
template <class T>
struct LatentGaussian {
    ag::Var<T> mean;
    ag::Var<T> logvar;

    ag::Var<T> stddev() const { return ag::exp(ag::scale(logvar, T(0.5))); }
};

template <class T>
class Encoder {
public:
    Encoder() = default;
    Encoder(const std::string& name, const nn::NetworkSpec& trunk, const Shape& input, int width,
            std::mt19937_64& init_rng);

    LatentGaussian<T> forward(const ag::Var<T>& x, const nn::RunContext& ctx);
    std::vector<ag::Var<T>> parameters() const;
    std::vector<nn::NamedTensor<T>> state();

private:
    nn::Sequential<T> trunk_, mean_head_, logvar_head_;
};

template <class T>
class DVAE {
public:
    DVAE() = default;
    DVAE(Architecture arch, std::uint64_t init_seed);

    const Architecture& arch() const { return arch_; }

    LatentGaussian<T> encode_y(const ag::Var<T>& x, const nn::RunContext& ctx) { return enc_y.forward(x, ctx); }
    LatentGaussian<T> encode_x(const ag::Var<T>& x, const nn::RunContext& ctx) { return enc_x.forward(x, ctx); }
    ag::Var<T> decode(const ag::Var<T>& z_y, const ag::Var<T>& z_x, const nn::RunContext& ctx);
    // Log-probabilities [N, n_classes].
    ag::Var<T> classify_y(const ag::Var<T>& z_y, const nn::RunContext& ctx) { return cls_y.forward(z_y, ctx); }
    ag::Var<T> classify_x(const ag::Var<T>& z_x, const nn::RunContext& ctx) { return cls_x.forward(z_x, ctx); }

    // Encoders, decoder and label classifier.
    std::vector<ag::Var<T>> main_parameters() const;
    // The adversarial classifier on z_x.
    std::vector<ag::Var<T>> adversary_parameters() const;
    std::vector<ag::Var<T>> parameters() const;
    std::vector<nn::NamedTensor<T>> state();
    void set_trainable(bool trainable);

    Encoder<T> enc_y, enc_x;
    nn::Sequential<T> decoder, cls_y, cls_x;

private:
    Architecture arch_;
};

// Sum over dimensions of KL(q || N(0, I)), averaged over the batch.
template <class T>
ag::Var<T> kl_to_standard_normal(const LatentGaussian<T>& q);
// Closed form for plain tensors; rejects non-positive sigma.
double kl_to_standard_normal(std::span<const double> mean, std::span<const double> sigma);

// mean + stddev * eps with eps ~ N(0, I).
template <class T>
ag::Var<T> reparameterize(const LatentGaussian<T>& q, std::mt19937_64& rng);

// Squared error summed over pixels, averaged over the batch.
template <class T>
ag::Var<T> reconstruction_error(const ag::Var<T>& x, const ag::Var<T>& recon);

struct LossBreakdown {
    double kl_y = 0, kl_x = 0, rec = 0, cls_y = 0, cls_x = 0, total = 0;

    bool finite() const;
    nlohmann::json to_json() const;
};

class TrainingError : public std::runtime_error {
public:
    TrainingError(const std::string& what, LossBreakdown last)
        : std::runtime_error(what + " (last breakdown: " + last.to_json().dump() + ")"), breakdown(last) {}
    LossBreakdown breakdown;
};

// One forward pass of the DVAE objective. `objective` is what gets
// backpropagated: beta_y kl_y + beta_x kl_x + rec + alpha cls_y + cls_x, where
// cls_x is computed on grad_reverse(z_x, alpha). The adversary therefore
// descends cls_x while the encoders descend -alpha cls_x. The reported total
// is beta_y kl_y + beta_x kl_x + rec + alpha cls_y - alpha cls_x. Without
// labels only the ELBO terms are formed.
template <class T>
struct DVAEPass {
    LatentGaussian<T> q_y, q_x;
    ag::Var<T> z_y, z_x, recon;
    ag::Var<T> kl_y, kl_x, rec, cls_y, cls_x;
    ag::Var<T> objective;
    LossBreakdown values;
};

template <class T>
DVAEPass<T> dvae_forward(DVAE<T>& model, const ag::Var<T>& x, std::span<const int> labels,
                         const DVAEParams& params, const nn::RunContext& ctx, std::mt19937_64& noise);

// Adam over all DVAE parameters with the shared optimiser settings.
class DVAETrainer {
public:
    DVAETrainer(DVAE<float>& model, DVAEParams params, optim::AdamConfig adam, std::uint64_t seed);

    // One update on a labelled batch [N, C, H, W].
    LossBreakdown step(const Tensor<float>& images, std::span<const int> labels);

    DVAE<float>& model() { return model_; }
    optim::Adam<float>& optimizer() { return adam_; }
    std::mt19937_64& rng() { return rng_; }
    const DVAEParams& params() const { return params_; }

private:
    DVAE<float>& model_;
    DVAEParams params_;
    optim::Adam<float> adam_;
    std::mt19937_64 rng_;
};

// Throws TrainingError if the breakdown or any parameter is non-finite.
void check_finite(const LossBreakdown& b, const std::vector<ag::Var<float>>& params);

// ---- evaluation (evaluation mode, posterior means) -------------------------

struct Embeddings {
    Tensor<float> mu_y, mu_x;  // [N, n_y], [N, n_x]
    Tensor<float> logvar_y, logvar_x;
};

Embeddings encode_dataset(DVAE<float>& model, const Tensor<float>& images, int batch = 256);
Tensor<float> decode_latents(DVAE<float>& model, const Tensor<float>& z_y, const Tensor<float>& z_x,
                             int batch = 256);
// Class probabilities [N, n_classes] from q(y | mu_y).
Tensor<float> class_probabilities(DVAE<float>& model, const Tensor<float>& mu_y, int batch = 256);

struct ElboTerms {
    double rec = 0, kl_y = 0, kl_x = 0;
};
// Reconstruction from posterior means; KL terms from the full posteriors.
ElboTerms elbo_terms(DVAE<float>& model, const Tensor<float>& images, int batch = 256);

// ---- checkpoints ------------------------------------------------------------

struct CheckpointMeta {
    std::string kind = "dvae";
    std::int64_t step = 0;
    std::uint64_t seed = 0;
    nlohmann::json extra = nlohmann::json::object();
};

void save_dvae(const std::filesystem::path& path, DVAE<float>& model, const DVAEParams& params,
               const CheckpointMeta& meta, optim::Adam<float>* optimizer = nullptr,
               const std::vector<nn::NamedTensor<float>>& extra_tensors = {});

struct LoadedDVAE {
    DVAE<float> model;
    DVAEParams params;
    CheckpointMeta meta;
    Archive archive;  // raw contents, for extra tensors and optimiser state
};

LoadedDVAE load_dvae(const std::filesystem::path& path);
// Restores Adam moments and step count saved by save_dvae.
void restore_optimizer(const Archive& archive, optim::Adam<float>& optimizer);

}  // namespace vce::model
