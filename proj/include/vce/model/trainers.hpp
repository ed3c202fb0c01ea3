#pragma once

// One training step for each model type (DVAE, LVAE, GVAE, ADA-GVAE,
// VAE-CE) behind a single trainer, plus self-describing checkpoints that
// carry the auxiliary networks each type needs at explanation time.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vce/model/baselines.hpp"
#include "vce/model/conditioning.hpp"

namespace vce::model {

enum class ModelKind { dvae, lvae, gvae, ada_gvae, vae_ce };

std::string model_kind_name(ModelKind kind);
// Accepts dvae, lvae, gvae, ada-gvae, vae-ce.
ModelKind parse_model_kind(const std::string& name);

// Unlisted parameters are 1.
struct HyperParams {
    double beta_y = 1, beta_x = 1, alpha = 1;
    double alpha_d = 1;             // LVAE
    double alpha_r = 1, alpha_p = 1;  // VAE-CE

    DVAEParams dvae() const { return {beta_y, beta_x, alpha}; }
    LVAEParams lvae(int n_c) const { return {alpha_d, n_c}; }
    CondParams cond() const { return {alpha_r, alpha_p}; }

    // The selected configuration of each model type.
    static HyperParams selected(ModelKind kind);
};

nlohmann::json to_json(const HyperParams& p);
HyperParams hyper_params_from_json(const nlohmann::json& j);

// Primary labelled batch plus the supervision of the model type.
struct TrainBatch {
    Tensor<float> images;
    std::vector<int> labels;
    std::vector<int> dim_labels;  // LVAE: [N, n_y] concept presence
    Tensor<float> pair_a, pair_b; // GVAE / ADA-GVAE pairs
    std::vector<int> shared_dim;  // GVAE: named matching concept per pair
};

struct StepReport {
    LossBreakdown dvae;
    nlohmann::json extra = nlohmann::json::object();
    double total = 0;  // reported objective of the whole step
};

class ModelTrainer {
public:
    // `cd` is required for VAE-CE and must outlive the trainer.
    ModelTrainer(ModelKind kind, Architecture arch, HyperParams hp, optim::AdamConfig adam, std::uint64_t seed,
                 CDModel<float>* cd = nullptr, int conditioning_pairs = 64);

    StepReport step(const TrainBatch& batch);

    ModelKind kind() const { return kind_; }
    const HyperParams& hyper_params() const { return hp_; }
    DVAE<float>& model() { return model_; }
    LVAEHeads<float>* lvae_heads() { return lvae_ ? &*lvae_ : nullptr; }
    Discriminator<float>* discriminator() { return d_ ? &*d_ : nullptr; }
    optim::Adam<float>& optimizer() { return adam_; }
    std::int64_t steps() const { return steps_; }

    void save(const std::filesystem::path& path, const CheckpointMeta& meta);

private:
    StepReport step_vae_ce(const TrainBatch& batch);

    ModelKind kind_;
    HyperParams hp_;
    DVAE<float> model_;
    std::optional<LVAEHeads<float>> lvae_;
    std::optional<Discriminator<float>> d_;
    CDModel<float>* cd_ = nullptr;
    int conditioning_pairs_;
    optim::Adam<float> adam_, d_adam_;
    std::mt19937_64 rng_;
    std::int64_t steps_ = 0;
};

// A trained model restored from disk with its auxiliary networks.
struct TrainedModel {
    ModelKind kind = ModelKind::dvae;
    HyperParams hp;
    DVAE<float> model;
    std::optional<Discriminator<float>> d;
    CheckpointMeta meta;
};

TrainedModel load_model(const std::filesystem::path& path);

}  // namespace vce::model
