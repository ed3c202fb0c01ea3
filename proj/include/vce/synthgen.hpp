#pragma once

// Seeded generator for the synthetic line-concept dataset: eight line
// concepts, ten classes built from line combinations, an elastic-distortion
// plus stroke-width noise process, change pairs, pair supervision for the
// group-based baselines, and ground-truth single-concept explanation
// sequences.

#include <bitset>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "vce/core/tensor.hpp"

namespace vce::synth {

inline constexpr int kImageSize = 32;
inline constexpr int kPixels = kImageSize * kImageSize;
inline constexpr int kNumConcepts = 8;
inline constexpr int kNumClasses = 10;

// A single 1 x 32 x 32 image with values in [0, 1].
using Image = Tensor<float>;
using ConceptSet = std::bitset<kNumConcepts>;

Image blank_image();

struct LineSpec {
    int index = 0;
    double orientation_deg = 0.0;  // 0 = horizontal, 90 = vertical (row increasing)
    double length = 0.0;           // fraction of the canvas side
    double anchor_row = 0.5;       // centre, fraction of the canvas
    double anchor_col = 0.5;
    double thickness = 2.0;        // pixels
};

struct ClassSpec {
    int class_id = 0;
    std::vector<ConceptSet> variants;
};

struct NoiseParams {
    int distortion_grid = 4;
    double distortion_strength = 2.5;
    double thickness_min = 0.75;
    double thickness_max = 1.25;
};

struct SynthConfig {
    std::vector<LineSpec> lines;
    std::vector<ClassSpec> classes;
    NoiseParams noise;

    static SynthConfig defaults();
    // Throws std::invalid_argument naming the offending entry.
    void validate() const;
};

nlohmann::json to_json(const SynthConfig& config);
SynthConfig config_from_json(const nlohmann::json& j);
SynthConfig load_config(const std::filesystem::path& path);

std::vector<int> concept_indices(const ConceptSet& set);
ConceptSet concept_set(std::span<const int> indices);

// Anti-aliased rendering of the union of `lines`; composition is a
// pixelwise max over single-line renders.
Image render_base(const ConceptSet& lines, std::span<const LineSpec> specs);
// Index-list form; rejects indices outside the spec list.
Image render_base(std::span<const int> lines, std::span<const LineSpec> specs);

// Per-pixel displacement (row, col offsets in pixels) on the 32 x 32 grid.
struct DisplacementField {
    std::vector<float> d_row, d_col;
};

DisplacementField make_displacement(const NoiseParams& params, std::uint64_t seed);
Image warp(const Image& image, const DisplacementField& field);
// factor > 1 thickens strokes (grey dilation blend), < 1 thins (erosion blend).
Image adjust_thickness(const Image& image, double factor);
double thickness_factor(const NoiseParams& params, std::uint64_t seed);
// Elastic distortion followed by thickness jitter, both drawn from `seed`.
Image apply_noise(const Image& image, const NoiseParams& params, std::uint64_t seed);

struct SyntheticDatapoint {
    Image image;
    int class_id = 0;
    ConceptSet concepts;
    int variant_id = 0;
    std::uint64_t noise_seed = 0;
};

SyntheticDatapoint make_datapoint(const SynthConfig& config, int class_id, int variant_id,
                                  std::uint64_t noise_seed);
// Image of an arbitrary concept set under the noise of `noise_seed`.
Image render_concepts(const SynthConfig& config, const ConceptSet& concepts, std::uint64_t noise_seed);

struct Record {
    int class_id = 0;
    int variant_id = 0;
    ConceptSet concepts;
    std::uint64_t seed = 0;
};

struct Split {
    Tensor<float> images;  // [N, 1, 32, 32]
    std::vector<Record> records;
    std::vector<int> labels() const;
};

struct DatasetCounts {
    int train_per_class = 1000;
    int test_per_class = 200;
};

struct Dataset {
    Split train, test;
};

Split generate_split(const SynthConfig& config, int per_class, std::uint64_t seed, std::uint64_t stream);
Dataset generate_dataset(const SynthConfig& config, DatasetCounts counts, std::uint64_t seed);

enum class PairKind { positive, zero_change, multi_change };

struct ChangePair {
    Image a, b;
    int label = 0;  // 1 = exactly one concept differs
    ConceptSet shown_a, shown_b;
    int class_id = 0;
    int variant_id = 0;
    std::uint64_t seed = 0;
    int shared_dim = -1;  // matching concept, for group-pair supervision
};

// Both images are renders of `variant` with some lines hidden, under one
// shared noise seed. multi_change on a single-line variant falls back to a
// zero-change negative.
ChangePair make_change_pair(const SynthConfig& config, const ConceptSet& variant, PairKind kind,
                            std::uint64_t seed);
// Balanced stream: half positive, negatives split evenly between 0 and 2+ changes.
std::vector<ChangePair> generate_change_pairs(const SynthConfig& config, int count, std::uint64_t seed);
// Pairs of datapoints with one named matching concept (GVAE supervision).
std::vector<ChangePair> generate_group_pairs(const SynthConfig& config, int count, std::uint64_t seed);
// Positive change pairs only (ADA-GVAE supervision).
std::vector<ChangePair> generate_positive_pairs(const SynthConfig& config, int count, std::uint64_t seed);

// All n! single-concept paths from a's concepts to b_concepts rendered with
// a's noise; each sequence has n + 1 states, state 0 being a's image.
std::vector<std::vector<Image>> ground_truth_explanations(const SynthConfig& config,
                                                          const SyntheticDatapoint& a,
                                                          const ConceptSet& b_concepts);

// Concept path metadata behind ground_truth_explanations, same order.
std::vector<std::vector<ConceptSet>> ground_truth_concept_paths(const ConceptSet& from,
                                                                const ConceptSet& to);

// ---- on-disk format -------------------------------------------------------
// <name>.bin: four little-endian uint32 dims [N, 32, 32, 1] followed by N*1024
// little-endian float32 values, row-major. <name>.json: manifest.

void write_tensor_file(const std::filesystem::path& path, const Tensor<float>& images);
Tensor<float> read_tensor_file(const std::filesystem::path& path);

nlohmann::json manifest_json(const std::vector<Record>& records, const std::string& split);
std::vector<Record> records_from_manifest(const nlohmann::json& j);

void write_split(const std::filesystem::path& dir, const std::string& name, const Split& split);
Split read_split(const std::filesystem::path& dir, const std::string& name);

// Pairs are stored as two tensor files (<name>_a.bin, <name>_b.bin) and a
// manifest carrying pair_label, shown-line sets and shared_dim.
void write_pairs(const std::filesystem::path& dir, const std::string& name,
                 const std::vector<ChangePair>& pairs);
std::vector<ChangePair> read_pairs(const std::filesystem::path& dir, const std::string& name);

}  // namespace vce::synth
