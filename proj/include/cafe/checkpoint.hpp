#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "cafe/model_zoo.hpp"
#include "json.hpp"

// Checkpoint container, little-endian:
//
//   "CAFECKPT"                       8-byte magic
//   u32 format_version               currently 1
//   u32 header_bytes, header         JSON object (see CheckpointHeader)
//   u32 tensor_count
//   per tensor:
//     u32 name_bytes, name
//     u32 rank, u32 dims[rank]
//     f32 values[prod(dims)]
//   u32 crc32                        zlib CRC-32 of every preceding byte
//
// Parameters are stored as float32; a float model reloads bit-exactly.

namespace cafe::ckpt {

inline constexpr std::uint32_t kFormatVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct CheckpointHeader {
    std::uint32_t format_version = kFormatVersion;
    std::string kind;  // classifier | hypothesis | test_function
    std::string arch;  // ArchSpec text, or "feature-net:<kind>:CxHxW"
    std::string split;
    int num_classes = 0;
    std::uint64_t seed = 0;
    nlohmann::json metadata = nlohmann::json::object();
};

struct Checkpoint {
    CheckpointHeader header;
    nn::StateDict tensors;
};

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

void save_classifier(zoo::SplitClassifier<float>& model, const std::filesystem::path& path,
                     const nlohmann::json& metadata = nlohmann::json::object());
zoo::SplitClassifier<float> load_classifier(const std::filesystem::path& path);
/// Throws CheckpointError when the stored architecture differs from `expected`.
zoo::SplitClassifier<float> load_classifier(const std::filesystem::path& path, const zoo::ArchSpec& expected);

/// `role` is "hypothesis" or "test_function".
void save_feature_net(zoo::FeatureNet<float>& net, const std::string& role, const std::filesystem::path& path,
                      const nlohmann::json& metadata = nlohmann::json::object());
zoo::FeatureNet<float> load_feature_net(const std::filesystem::path& path, const std::string& role);

}  // namespace cafe::ckpt
