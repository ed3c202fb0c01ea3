#pragma once

// MNIST ingestion (IDX files, zero-padded to 32 x 32, scaled to [0, 1]) and
// line-based augmentation: digits are split into strokes and change pairs
// are made by hiding subsets of those strokes.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vce/synthgen.hpp"

namespace vce::mnist {

struct MnistSet {
    Tensor<float> images;  // [N, 1, 32, 32]
    std::vector<int> labels;
};

// Reads an idx3 image file and its idx1 label file. Errors name the file.
MnistSet load_idx(const std::filesystem::path& images_file, const std::filesystem::path& labels_file);
// split "train" or "test" from the standard file names in `dir`
// (train-images-idx3-ubyte, t10k-images-idx3-ubyte, ...).
MnistSet load_mnist(const std::filesystem::path& dir, const std::string& split);

// Writers for the same format (tools and tests).
void write_idx_images(const std::filesystem::path& path, const std::vector<std::uint8_t>& pixels, int count,
                      int rows, int cols);
void write_idx_labels(const std::filesystem::path& path, const std::vector<std::uint8_t>& labels);

struct SplitParams {
    float binarize = 0.5f;        // skeleton is taken from pixels >= this
    double merge_angle_deg = 30;  // collinear branches merge within this angle
    int direction_depth = 5;      // branch pixels used to estimate a direction
    int min_spur = 3;             // shorter end branches at a junction are dropped
};

// Pixel indices (row * 32 + col) per extracted line. Segments are disjoint
// and together cover every pixel with a value above zero.
struct StrokeSplit {
    synth::Image source;
    std::vector<std::vector<int>> segments;
};

StrokeSplit split_lines(const synth::Image& image, const SplitParams& params = {});

// Zhang-Suen thinning of a binary 32 x 32 mask.
std::vector<std::uint8_t> skeletonize(std::vector<std::uint8_t> mask);

// Image with the pixels of hidden segments set to 0.
synth::Image mask_segments(const StrokeSplit& split, const synth::ConceptSet& shown);

// Pair i is positive for i % 4 in {0, 1}, zero-change for 2 and multi-change
// for 3 (zero-change when the digit has one segment). Digits with more than
// eight segments are skipped. shown_a / shown_b hold the visible segments,
// class_id the digit label and seed the digit index.
std::vector<synth::ChangePair> make_mnist_pairs(const MnistSet& data, int n_pairs, std::uint64_t seed,
                                                const SplitParams& params = {});

}  // namespace vce::mnist
