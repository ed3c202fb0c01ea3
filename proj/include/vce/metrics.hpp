#pragma once

// Evaluation: explanation alignment cost (DTW against every ground-truth
// concept order), mutual information gap, ELBO terms, accuracies of the
// classifier and of logistic-regression probes, and the exemplar-variant
// experiment.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vce/explain.hpp"
#include "vce/synthgen.hpp"

namespace vce::metrics {

inline constexpr int kReportSchemaVersion = 1;

struct EACConfig {
    double epsilon = 0.001;
    int pairs = 90;

    void validate() const;
};

// Sum over pixels of (x_c - x_t)^2, plus epsilon.
double state_cost(const synth::Image& x_c, const synth::Image& x_t, double epsilon);

// Minimum total state cost over monotone alignments that map every state of
// each sequence to at least one state of the other, starting at (0, 0) and
// ending at both last states; steps (+1, 0), (0, +1), (+1, +1).
double dtw_align(std::span<const synth::Image> candidate, std::span<const synth::Image> truth, double epsilon);

// Minimum alignment cost over the given ground-truth sequences.
double eac(std::span<const synth::Image> candidate, const std::vector<std::vector<synth::Image>>& truths,
           double epsilon);

// Ground truths rendered from a's noise towards b_concepts; more than eight
// changed concepts is rejected.
double eac(std::span<const synth::Image> candidate, const synth::SynthConfig& config,
           const synth::SyntheticDatapoint& a, const synth::ConceptSet& b_concepts, double epsilon);

// A query datapoint and a contrast datapoint of another class.
struct EacPair {
    synth::SyntheticDatapoint a, b;
};

std::vector<EacPair> generate_eac_pairs(const synth::SynthConfig& config, int count, std::uint64_t seed);
nlohmann::json eac_pairs_json(const std::vector<EacPair>& pairs);
std::vector<EacPair> eac_pairs_from_json(const synth::SynthConfig& config, const nlohmann::json& j);

struct MethodScores {
    std::vector<double> values;
    double mean = 0, std = 0;  // population std
};

struct EacReport {
    std::vector<explain::Method> methods;
    std::vector<MethodScores> scores;
    double selection_score = 0;  // minimum over methods of the mean
    explain::Method best = explain::Method::sm;

    const MethodScores& of(explain::Method m) const;
    nlohmann::json to_json() const;
};

MethodScores summarize(std::vector<double> values);

EacReport eac_report(const explain::ModelBundle& bundle, const synth::SynthConfig& config,
                     const std::vector<EacPair>& pairs, const std::vector<explain::Method>& methods,
                     const EACConfig& eac_config = {}, const explain::GraphParams& graph = {});

// ---- mutual information gap ---------------------------------------------------

struct MigConfig {
    int bins = 20;
    bool quantile = false;  // per-dimension quantile bins instead of equal width
};

// latents [N, L]; factors row-major [N, K] of discrete values. Factors with
// zero entropy are left out of the mean; the result is clipped to [0, 1].
double mig(const Tensor<float>& latents, std::span<const int> factors, int n_factors, const MigConfig& config = {});

// Per-column bin index of each latent value.
std::vector<int> discretize(const Tensor<float>& latents, int bins, bool quantile);

// Mutual information (nats) of two discrete sequences.
double mutual_information(std::span<const int> a, std::span<const int> b);
double entropy(std::span<const int> a);

// ---- probes -------------------------------------------------------------------

struct ProbeConfig {
    double l2 = 1.0;  // penalty 0.5 * l2 * ||W||^2 on the summed cross-entropy
    int max_iter = 1000;
    double tol = 1e-6;
};

// Multinomial logistic regression on standardized features.
class LogisticProbe {
public:
    void fit(const Tensor<float>& x, std::span<const int> labels, int classes, const ProbeConfig& config = {});
    std::vector<int> predict(const Tensor<float>& x) const;
    double accuracy(const Tensor<float>& x, std::span<const int> labels) const;
    int iterations() const { return iterations_; }

private:
    int classes_ = 0, features_ = 0, iterations_ = 0;
    std::vector<double> mean_, scale_, w_;  // w_: [classes, features + 1]
};

double accuracy(std::span<const int> predicted, std::span<const int> labels);

// ---- representation quality -----------------------------------------------------

struct RepresentationReport {
    double mig = 0, rec = 0, kl_y = 0, kl_x = 0, acc = 0, l_acc_y = 0, l_acc_x = 0;
    nlohmann::json to_json() const;
};

// Factor matrix [N, 8] of concept booleans.
std::vector<int> concept_factors(const std::vector<synth::Record>& records);

RepresentationReport representation_report(model::DVAE<float>& model, const Tensor<float>& train_images,
                                           std::span<const int> train_labels, const Tensor<float>& test_images,
                                           std::span<const int> test_labels, std::span<const int> test_factors,
                                           const MigConfig& mig_config = {}, const ProbeConfig& probe = {});

// ---- exemplar-variant experiment -------------------------------------------------

struct VariantExperiment {
    double p_78 = 0, p_other = 0;  // frequency of the designated class-9 variant
    int n_78 = 0, n_other = 0, skipped = 0;
    nlohmann::json to_json() const;
};

// The class-9 variant sharing the most lines with classes 7 and 8.
int designated_variant(const synth::SynthConfig& config);

// select(query) returns a pool index, or nothing when no exemplar exists.
using ExemplarSelector = std::function<std::optional<std::size_t>(std::size_t query)>;

VariantExperiment exemplar_variant_experiment(const std::vector<synth::Record>& queries,
                                              const std::vector<synth::Record>& pool, int variant,
                                              const ExemplarSelector& select);

// Queries are up to n_queries test datapoints outside class 9 (seeded
// shuffle); the pool is the whole test split.
VariantExperiment exemplar_variant_experiment(model::DVAE<float>& model, const synth::Split& test,
                                              const synth::SynthConfig& config, int n_queries, double t,
                                              std::uint64_t seed);

}  // namespace vce::metrics
