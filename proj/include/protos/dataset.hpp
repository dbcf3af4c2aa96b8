#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "protos/partsynth.hpp"

namespace protos {

inline constexpr int kDatasetSchemaVersion = 1;

nlohmann::json to_json(const DatasetSpec& spec);
DatasetSpec dataset_spec_from_json(const nlohmann::json& j, const DatasetSpec& defaults = {});
nlohmann::json to_json(const ClassCatalog& catalog);
ClassCatalog catalog_from_json(const nlohmann::json& j);

/// On-disk layout:
///   dataset.json    spec + schema version
///   catalog.json    class definitions
///   manifest.jsonl  one record per scene (split, index, class, seeds, image / mask paths)
///   images/<split>_<index>.png, masks/<split>_<index>.png (0 = no part, 1 + category index)
void write_dataset(const std::filesystem::path& dir, const DatasetSpec& spec);

struct DatasetOnDisk {
    std::filesystem::path root;
    DatasetSpec spec;
    ClassCatalog catalog;
    std::vector<SceneRecord> records;
    std::vector<std::string> image_paths;  // relative to root, parallel to records
    bool has_masks = false;                // masks/ present for every record

    std::vector<std::size_t> split(const std::string& name) const;
    Image load_image(std::size_t record) const;
    /// Re-renders the scene from its recipe (identical pixels to the stored PNG).
    Scene scene(std::size_t record) const;
};

/// Throws IoError when the manifest is missing, FormatError when it is malformed.
DatasetOnDisk load_dataset(const std::filesystem::path& dir);

std::string record_stem(const SceneRecord& r);

}  // namespace protos
