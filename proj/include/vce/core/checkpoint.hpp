#pragma once

// Versioned binary archive: magic, format version, a JSON header, then named
// float32 tensors stored little-endian in header order.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "vce/core/nn.hpp"
#include "vce/core/tensor.hpp"

namespace vce {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Archive {
    nlohmann::json header;
    std::map<std::string, Tensor<float>> tensors;

    // Throws naming the missing tensor or mismatched shape.
    const Tensor<float>& at(const std::string& name, const Shape& expect) const;
};

void write_archive(const std::filesystem::path& path, const nlohmann::json& header,
                   const std::vector<nn::NamedTensor<float>>& tensors);
Archive read_archive(const std::filesystem::path& path);

// Copies archive tensors into `state` by name.
void restore_state(const Archive& archive, const std::vector<nn::NamedTensor<float>>& state);

}  // namespace vce
