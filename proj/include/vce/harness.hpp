#pragma once

// Experiment orchestration: configs, training loops for every model type and
// for CD, the hyperparameter grid with selection by eac, checkpoints and
// figure emission.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vce/core/random.hpp"
#include "vce/metrics.hpp"
#include "vce/mnist_lines.hpp"
#include "vce/model/trainers.hpp"

namespace vce::harness {

// Step budget of the full-scale runs and of the desk-scale preset.
inline constexpr std::int64_t kFullSteps = 2000000;
inline constexpr std::int64_t kDeskSteps = 20000;

struct ExperimentConfig {
    model::ModelKind kind = model::ModelKind::vae_ce;
    std::string dataset = "synthetic";  // synthetic | mnist
    std::string data_dir;
    std::string cd_checkpoint;          // VAE-CE, and the graph method at evaluation
    std::string arch = "standard";      // standard | tiny (8 x 8 test images)
    model::HyperParams hp = model::HyperParams::selected(model::ModelKind::vae_ce);
    optim::AdamConfig adam;
    int batch = 128;
    int pair_batch = 64;     // pairs per step for GVAE, ADA-GVAE, VAE-CE and CD
    int pair_pool = 10000;   // pre-rendered pairs sampled from during training
    std::int64_t steps = kDeskSteps;
    double scale = 1.0;      // multiplies steps
    std::uint64_t seed = 1;
    int log_every = 100;
    int checkpoint_every = 0;
    int realism_steps = 1000;  // D trained after the fact for models without one

    std::int64_t effective_steps() const;
    void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
// Reads a JSON config file; VCE_SEED in the environment overrides the seed.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
// VCE_SEED if set, else `fallback`.
std::uint64_t seed_from_env(std::uint64_t fallback);

model::Architecture architecture_for(const std::string& name, int n_y = 8, int n_x = 8);

// ---- training data -------------------------------------------------------------

struct TrainingData {
    Tensor<float> images;
    std::vector<int> labels;
    std::vector<int> dim_labels;                // [N, 8] concept presence, synthetic only
    std::vector<synth::ChangePair> pairs;       // group, positive or change pairs by model type
};

// Synthetic training split plus the pair pool the model type needs.
TrainingData synthetic_training_data(const synth::SynthConfig& config, const synth::Split& train,
                                     model::ModelKind kind, int pair_pool, std::uint64_t seed);

// Data behind an ExperimentConfig (synthetic split files or MNIST IDX files).
TrainingData load_training_data(const ExperimentConfig& c, synth::SynthConfig* synth_config = nullptr);
synth::SynthConfig dataset_config(const std::filesystem::path& data_dir);

// Epoch-shuffled batch sampling.
class BatchSampler {
public:
    BatchSampler(const TrainingData& data, int batch, int pair_batch, std::uint64_t seed);
    model::TrainBatch next(model::ModelKind kind);

private:
    std::vector<std::size_t> draw(std::vector<std::size_t>& order, std::size_t& cursor, std::size_t n, int count);

    const TrainingData& data_;
    int batch_, pair_batch_;
    Rng rng_;
    std::vector<std::size_t> order_, pair_order_;
    std::size_t cursor_ = 0, pair_cursor_ = 0;
};

// ---- training ------------------------------------------------------------------

struct CurvePoint {
    std::int64_t step = 0;
    double total = 0, rec = 0, kl_y = 0, kl_x = 0;
    nlohmann::json extra;
};

struct TrainResult {
    std::unique_ptr<model::ModelTrainer> trainer;
    std::optional<model::Discriminator<float>> realism;  // post-hoc D for non-VAE-CE models
    std::vector<CurvePoint> curve;
    std::int64_t steps = 0;
};

using StepHook = std::function<void(std::int64_t step, const model::StepReport& report, model::ModelTrainer& t)>;

// Runs the step budget. Checkpoints go to `out` (and `out`.d for a post-hoc
// D) when `out` is non-empty. On divergence the curve is written to
// `out`.curve.json before the error propagates.
TrainResult train_model(const ExperimentConfig& c, const TrainingData& data, model::CDModel<float>* cd,
                        const std::filesystem::path& out = {}, const StepHook& hook = {});

nlohmann::json curve_json(const std::vector<CurvePoint>& curve);

// D trained on real images against decodes of mixed latent pairs of a
// frozen model (evaluation mode).
model::Discriminator<float> train_realism_discriminator(model::DVAE<float>& m, const Tensor<float>& images,
                                                        int steps, int batch, std::uint64_t seed);

struct CDConfig {
    std::string arch = "cd";  // cd | tiny
    model::CDTrainParams params;
    optim::AdamConfig adam;
    int batch = 128, pair_batch = 64;
    std::int64_t steps = kDeskSteps;
    std::uint64_t seed = 1;
    int log_every = 100;
};

nlohmann::json to_json(const CDConfig& c);
CDConfig cd_config_from_json(const nlohmann::json& j);

struct CDResult {
    model::CDModel<float> model;
    std::vector<nlohmann::json> curve;
};

// `data.pairs` are labelled change pairs.
CDResult train_cd(const CDConfig& c, const TrainingData& data, const std::filesystem::path& out = {},
                  const std::function<void(std::int64_t, const model::CDStepReport&)>& hook = {});

// ---- model bundles ---------------------------------------------------------------

struct LoadedBundle {
    model::TrainedModel trained;
    std::optional<model::CDModel<float>> cd;
    std::optional<model::Discriminator<float>> d;  // explicit, post-hoc or the model's own

    explain::ModelBundle bundle();
};

// D is taken from `d_path`, else from the model checkpoint, else from
// `model_path`.d when present.
LoadedBundle load_bundle(const std::filesystem::path& model_path, const std::filesystem::path& cd_path = {},
                         const std::filesystem::path& d_path = {});

// ---- grid ----------------------------------------------------------------------

struct GridSpec {
    struct Axis {
        std::string name;  // beta_y, beta_x, alpha, alpha_d, alpha_r, alpha_p
        std::vector<double> values;
    };
    struct ModelGrid {
        model::ModelKind kind;
        std::vector<Axis> axes;
    };
    std::vector<ModelGrid> models;
    int runs = 4;

    static GridSpec standard();

    struct Configuration {
        model::ModelKind kind;
        model::HyperParams hp;
    };
    // Cartesian product per model type; unlisted parameters are 1.
    std::vector<Configuration> configurations() const;
    std::size_t run_count() const { return configurations().size() * static_cast<std::size_t>(runs); }
};

nlohmann::json to_json(const GridSpec& g);
GridSpec grid_spec_from_json(const nlohmann::json& j);

struct GridEntry {
    model::ModelKind kind;
    model::HyperParams hp;
    int config_index = 0, run = 0;
    bool ok = false;
    double score = 0;  // minimum over methods of the mean eac
    std::string error;
};

struct GridSelection {
    model::ModelKind kind;
    int config_index = 0;
    model::HyperParams hp;
    double mean_score = 0;
    int completed_runs = 0;
};

// Mean score per configuration over completed runs, argmin per model type
// (ties to the lower configuration index).
std::vector<GridSelection> select_configurations(const std::vector<GridEntry>& entries);

struct GridReport {
    std::vector<GridEntry> entries;
    std::vector<GridSelection> selected;
    nlohmann::json to_json() const;
};

// Trains every run of every configuration at `base` settings and scores it
// on the validation pairs with sm, dim and graph.
GridReport run_grid(const GridSpec& grid, const ExperimentConfig& base, const TrainingData& data,
                    const synth::SynthConfig& synth_config, const std::vector<metrics::EacPair>& validation,
                    model::CDModel<float>* cd, const std::filesystem::path& out_dir);

// ---- figures ---------------------------------------------------------------------

// 8-bit grayscale PNG of a [H, W] image with values in [0, 1].
void write_png(const std::filesystem::path& path, const Tensor<float>& gray);
Tensor<float> read_png(const std::filesystem::path& path);

// Query (outlined) followed by the states, left to right: [H, (1 + n) W].
Tensor<float> explanation_strip(const synth::Image& query, const std::vector<synth::Image>& states);

inline constexpr int kBarHeight = 100, kBarWidth = 20, kBarGap = 4;
// Bars of height round(value / max * kBarHeight) on a black canvas.
Tensor<float> bar_chart(const std::vector<double>& values);
// Heights read back from a bar chart image.
std::vector<int> bar_heights(const Tensor<float>& chart, std::size_t bars);
// One column per group; each value a point at its relative height.
Tensor<float> scatter_plot(const std::vector<std::vector<double>>& groups);

struct FigureExplanation {
    std::string name;
    synth::Image query;
    explain::Explanation explanation;
};

// Strips for explanations, bar charts for eac means ("methods") and the
// representation metrics, and a scatter of per-run scores ("entries").
std::vector<std::filesystem::path> emit_figures(const std::vector<FigureExplanation>& explanations,
                                                const nlohmann::json& report, const std::filesystem::path& out_dir);

}  // namespace vce::harness
