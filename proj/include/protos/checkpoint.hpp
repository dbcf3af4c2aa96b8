#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace protos {

struct NamedTensor {
    std::string name;
    std::vector<int> shape;
    std::vector<float> values;
};

/// Hex SHA-256 digest.
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::span<const float> values);

/// Writes `dir/manifest.json` + `dir/params.bin`. Tensors are stored sorted by name as little-endian
/// float32; the manifest records shape, dtype, byte offset and SHA-256 of each payload. The directory is
/// replaced atomically (written next to it, then renamed).
void write_tensor_archive(const std::filesystem::path& dir, std::vector<NamedTensor> tensors,
                          const nlohmann::json& metadata);

struct TensorArchive {
    std::vector<NamedTensor> tensors;  // sorted by name
    nlohmann::json metadata;

    const NamedTensor* find(const std::string& name) const;
};

/// Verifies every payload digest; FormatError on manifest problems or digest mismatch, IoError on truncation.
TensorArchive read_tensor_archive(const std::filesystem::path& dir);

}  // namespace protos
