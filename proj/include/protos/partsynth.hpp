#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "protos/image.hpp"

namespace protos {

enum class PartCategory : int { Eye = 0, Beak = 1, Wing = 2, Leg = 3, Tail = 4 };
inline constexpr int kCategoryCount = 5;
inline constexpr std::array<PartCategory, kCategoryCount> kAllCategories{
    PartCategory::Eye, PartCategory::Beak, PartCategory::Wing, PartCategory::Leg, PartCategory::Tail};

std::string to_string(PartCategory c);
PartCategory category_from_string(const std::string& name);
inline int index(PartCategory c) { return static_cast<int>(c); }

using TypeCounts = std::array<int, kCategoryCount>;
using PartAssignment = std::array<int, kCategoryCount>;

inline constexpr TypeCounts kDefaultTypeCounts{3, 4, 6, 4, 9};

enum class GlyphShape : int { Ellipse, Rectangle, TriangleRight, Diamond, Ring, Cross, TriangleDown, Hourglass, Frame };
inline constexpr int kShapeCount = 9;

struct Glyph {
    GlyphShape shape = GlyphShape::Ellipse;
    std::array<float, 3> color{};
    int width = 13;
    int height = 13;
};

struct PartSpec {
    PartCategory category = PartCategory::Eye;
    int type = 0;
    Glyph glyph;
    int anchor_x = 0;  // slot center on the canvas
    int anchor_y = 0;
};

/// Rendering recipe of one part type. Colors are unique across (category, type) for the first
/// 96 global type indices, shapes cycle per category.
PartSpec part_spec(PartCategory category, int type);

/// Whether pixel (dx, dy) of a glyph's bounding box belongs to the glyph.
bool glyph_covers(const Glyph& glyph, int dx, int dy);

struct ClassCatalog {
    TypeCounts type_counts = kDefaultTypeCounts;
    std::vector<PartAssignment> classes;
    std::uint64_t seed = 0;

    int num_classes() const { return static_cast<int>(classes.size()); }
};

/// Deterministic, collision-free sample of `num_classes` part assignments. Enumerates every
/// combination when num_classes equals the product of type counts.
ClassCatalog build_catalog(int num_classes, const TypeCounts& type_counts, std::uint64_t seed);

struct SceneConfig {
    int height = 96;
    int width = 96;
    int num_backgrounds = 8;
    int jitter = 2;
    bool clutter = false;  // background distractor glyphs
};

struct Scene {
    SceneConfig config;
    TypeCounts type_counts = kDefaultTypeCounts;
    int class_id = -1;
    PartAssignment types{};
    std::array<bool, kCategoryCount> present{};
    std::array<std::array<int, 2>, kCategoryCount> offset{};  // (dx, dy) jitter per slot
    int background_id = 0;
    std::uint64_t background_seed = 0;
    std::uint64_t placement_seed = 0;

    Image image;
    LabelMap parts;       // 0 = no part, 1 + category index otherwise
    LabelMap foreground;  // 1 on body and part pixels

    bool has_part(PartCategory c) const { return present[index(c)]; }
    std::size_t mask_area(PartCategory c) const;
    bool in_mask(PartCategory c, int y, int x) const { return parts.at(y, x) == index(c) + 1; }
};

/// Composites parts at jittered slot anchors over a body silhouette and a parametric background.
Scene render_scene(const ClassCatalog& catalog, int class_id, std::uint64_t placement_seed, int background_id,
                   const SceneConfig& cfg = {});

struct Intervention {
    enum class Kind { DeleteParts, KeepOnly, SwapPart, RandomizeBackground };
    Kind kind = Kind::DeleteParts;
    std::vector<PartCategory> parts;
    PartCategory category = PartCategory::Eye;
    int new_type = 0;
    std::uint64_t seed = 0;

    static Intervention delete_parts(std::vector<PartCategory> parts);
    static Intervention keep_only(std::vector<PartCategory> parts);
    static Intervention swap_part(PartCategory category, int new_type);
    static Intervention randomize_background(std::uint64_t seed);
};

/// Applies an intervention by re-rendering the modified recipe; pixels outside the affected
/// regions are unchanged. Throws RejectedInput for parts absent from the scene.
Scene intervene(const Scene& scene, const Intervention& action);

// --- datasets ----------------------------------------------------------------

struct DatasetSpec {
    int num_classes = 20;
    TypeCounts type_counts = kDefaultTypeCounts;
    int train_per_class = 100;
    int test_per_class = 20;
    std::uint64_t seed = 0;
    SceneConfig scene;
};

struct SceneRecord {
    std::string split;  // "train" or "test"
    int index = 0;      // position within the split
    int class_id = 0;
    std::uint64_t placement_seed = 0;
    int background_id = 0;
};

/// Every scene of the dataset in a fixed order: train scenes class-major, then test scenes.
std::vector<SceneRecord> plan_dataset(const DatasetSpec& spec);

Scene render_record(const SceneRecord& record, const ClassCatalog& catalog, const SceneConfig& cfg);

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace protos
