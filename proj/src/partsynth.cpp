#include "protos/partsynth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include "protos/errors.hpp"

namespace protos {

namespace {

constexpr std::array<const char*, kCategoryCount> kCategoryNames{"eye", "beak", "wing", "leg", "tail"};

// Slot geometry on the 96 x 96 reference canvas: (center x, center y, glyph width, glyph height).
struct Slot {
    int cx, cy, w, h;
};
constexpr std::array<Slot, kCategoryCount> kSlots{{
    {62, 22, 13, 13},  // eye, upper left of the head
    {89, 30, 13, 13},  // beak, right of the head
    {44, 56, 20, 14},  // wing, on the body
    {46, 85, 16, 13},  // leg, below the body
    {11, 50, 18, 18},  // tail, left of the body
}};
constexpr std::array<float, 3> kBodyColor{0.95f, 0.85f, 0.40f};
constexpr int kReference = 96;

const std::vector<std::array<float, 3>>& part_palette() {
    static const std::vector<std::array<float, 3>> palette = [] {
        std::vector<std::array<float, 3>> grid;
        for (int r = 0; r < 5; ++r)
            for (int g = 0; g < 5; ++g)
                for (int b = 0; b < 5; ++b) {
                    std::array<float, 3> c{r * 0.25f, g * 0.25f, b * 0.25f};
                    const bool muted = std::all_of(c.begin(), c.end(), [](float v) { return v >= 0.5f && v <= 0.75f; });
                    if (!muted) grid.push_back(c);
                }
        // Stride through the grid so consecutive indices are far apart in color space.
        std::vector<std::array<float, 3>> ordered;
        const std::size_t n = grid.size();
        for (std::size_t i = 0; i < n; ++i) ordered.push_back(grid[(i * 37) % n]);
        return ordered;
    }();
    return palette;
}

constexpr std::array<std::array<float, 3>, 8> kBackgroundBase{{
    {0.55f, 0.70f, 0.85f},
    {0.60f, 0.75f, 0.55f},
    {0.80f, 0.75f, 0.65f},
    {0.70f, 0.70f, 0.70f},
    {0.75f, 0.60f, 0.65f},
    {0.55f, 0.65f, 0.60f},
    {0.85f, 0.80f, 0.60f},
    {0.65f, 0.60f, 0.80f},
}};

int scale_x(const SceneConfig& cfg, int x) { return x * cfg.width / kReference; }
int scale_y(const SceneConfig& cfg, int y) { return y * cfg.height / kReference; }

void paint_background(Scene& s) {
    const SceneConfig& cfg = s.config;
    const auto& base = kBackgroundBase[static_cast<std::size_t>(s.background_id) % kBackgroundBase.size()];
    const double angle = s.background_id * std::numbers::pi / 4.0;
    const double dir_x = std::cos(angle), dir_y = std::sin(angle);
    const double freq = 0.15 + 0.05 * (s.background_id % 3);
    std::mt19937_64 rng(s.background_seed);
    std::uniform_real_distribution<float> noise(-0.02f, 0.02f);
    for (int y = 0; y < cfg.height; ++y) {
        for (int x = 0; x < cfg.width; ++x) {
            const double t = (dir_x * x / cfg.width + dir_y * y / cfg.height);
            const double stripes = 0.04 * std::sin(freq * (dir_y * x - dir_x * y));
            for (int c = 0; c < 3; ++c) {
                const double v = base[c] + 0.08 * (t - 0.5) + stripes + noise(rng);
                s.image.at(y, x, c) = static_cast<float>(std::clamp(v, 0.4, 0.9));
            }
        }
    }
    if (!cfg.clutter) return;
    std::uniform_int_distribution<int> pos_x(0, cfg.width - 7), pos_y(0, cfg.height - 7);
    std::uniform_int_distribution<int> shape(0, kShapeCount - 1);
    for (int n = 0; n < 3; ++n) {
        Glyph g{static_cast<GlyphShape>(shape(rng)), {0.35f, 0.35f, 0.35f}, 7, 7};
        const int x0 = pos_x(rng), y0 = pos_y(rng);
        for (int dy = 0; dy < g.height; ++dy)
            for (int dx = 0; dx < g.width; ++dx)
                if (glyph_covers(g, dx, dy))
                    for (int c = 0; c < 3; ++c) s.image.at(y0 + dy, x0 + dx, c) = g.color[c];
    }
}

bool in_body(const SceneConfig& cfg, int x, int y) {
    const double bx = (x - scale_x(cfg, 46)) / (24.0 * cfg.width / kReference);
    const double by = (y - scale_y(cfg, 56)) / (13.0 * cfg.height / kReference);
    const double hx = (x - scale_x(cfg, 72)) / (14.0 * cfg.width / kReference);
    const double hy = (y - scale_y(cfg, 28)) / (14.0 * cfg.height / kReference);
    return bx * bx + by * by <= 1.0 || hx * hx + hy * hy <= 1.0;
}

/// Rebuilds image and masks from the recipe fields of `s`.
void compose(Scene& s) {
    const SceneConfig& cfg = s.config;
    s.image = Image(cfg.height, cfg.width, 3);
    s.parts = LabelMap(cfg.height, cfg.width);
    s.foreground = LabelMap(cfg.height, cfg.width);
    paint_background(s);
    for (int y = 0; y < cfg.height; ++y)
        for (int x = 0; x < cfg.width; ++x)
            if (in_body(cfg, x, y)) {
                for (int c = 0; c < 3; ++c) s.image.at(y, x, c) = kBodyColor[c];
                s.foreground.at(y, x) = 1;
            }
    for (PartCategory cat : kAllCategories) {
        const int ci = index(cat);
        if (!s.present[ci]) continue;
        const PartSpec spec = part_spec(cat, s.types[ci]);
        const int x0 = scale_x(cfg, spec.anchor_x) - spec.glyph.width / 2 + s.offset[ci][0];
        const int y0 = scale_y(cfg, spec.anchor_y) - spec.glyph.height / 2 + s.offset[ci][1];
        for (int dy = 0; dy < spec.glyph.height; ++dy) {
            for (int dx = 0; dx < spec.glyph.width; ++dx) {
                const int x = x0 + dx, y = y0 + dy;
                if (x < 0 || y < 0 || x >= cfg.width || y >= cfg.height || !glyph_covers(spec.glyph, dx, dy)) continue;
                for (int c = 0; c < 3; ++c) s.image.at(y, x, c) = spec.glyph.color[c];
                s.parts.at(y, x) = static_cast<std::uint8_t>(ci + 1);
                s.foreground.at(y, x) = 1;
            }
        }
    }
    quantize_8bit(s.image);
}

void require_present(const Scene& s, PartCategory c) {
    if (!s.has_part(c)) throw RejectedInput("scene has no " + to_string(c) + " part");
}

}  // namespace

std::string to_string(PartCategory c) { return kCategoryNames[static_cast<std::size_t>(index(c))]; }

PartCategory category_from_string(const std::string& name) {
    for (PartCategory c : kAllCategories)
        if (name == to_string(c)) return c;
    throw RejectedInput("unknown part category: " + name);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    // splitmix64 finalizer over the combined value
    std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

PartSpec part_spec(PartCategory category, int type) {
    if (type < 0) throw RejectedInput("part type must be nonnegative");
    const int ci = index(category);
    const Slot& slot = kSlots[static_cast<std::size_t>(ci)];
    const auto& palette = part_palette();
    PartSpec spec;
    spec.category = category;
    spec.type = type;
    spec.anchor_x = slot.cx;
    spec.anchor_y = slot.cy;
    spec.glyph.shape = static_cast<GlyphShape>((type + ci) % kShapeCount);
    spec.glyph.color = palette[static_cast<std::size_t>(ci * 20 + type) % palette.size()];
    spec.glyph.width = slot.w;
    spec.glyph.height = slot.h;
    return spec;
}

bool glyph_covers(const Glyph& g, int dx, int dy) {
    if (dx < 0 || dy < 0 || dx >= g.width || dy >= g.height) return false;
    const double u = (dx + 0.5) / g.width * 2.0 - 1.0;
    const double v = (dy + 0.5) / g.height * 2.0 - 1.0;
    switch (g.shape) {
        case GlyphShape::Ellipse: return u * u + v * v <= 1.0;
        case GlyphShape::Rectangle: return true;
        case GlyphShape::TriangleRight: return std::abs(v) <= (1.0 - u) / 2.0 + 0.05;
        case GlyphShape::Diamond: return std::abs(u) + std::abs(v) <= 1.05;
        case GlyphShape::Ring: {
            const double r = u * u + v * v;
            return r <= 1.0 && r >= 0.3;
        }
        case GlyphShape::Cross: return std::abs(u) <= 0.35 || std::abs(v) <= 0.35;
        case GlyphShape::TriangleDown: return std::abs(u) <= (1.0 - v) / 2.0 + 0.05;
        case GlyphShape::Hourglass: return std::abs(u) <= std::abs(v) + 0.15;
        case GlyphShape::Frame: return std::max(std::abs(u), std::abs(v)) >= 0.5;
    }
    return false;
}

ClassCatalog build_catalog(int num_classes, const TypeCounts& type_counts, std::uint64_t seed) {
    std::uint64_t product = 1;
    for (int n : type_counts) {
        if (n < 1) throw RejectedInput("every category needs at least one type");
        product *= static_cast<std::uint64_t>(n);
    }
    if (num_classes < 1 || static_cast<std::uint64_t>(num_classes) > product)
        throw RejectedInput("num_classes must be in [1, product of type counts]");

    auto decode = [&](std::uint64_t code) {
        PartAssignment a{};
        for (int c = kCategoryCount - 1; c >= 0; --c) {
            a[c] = static_cast<int>(code % static_cast<std::uint64_t>(type_counts[c]));
            code /= static_cast<std::uint64_t>(type_counts[c]);
        }
        return a;
    };

    ClassCatalog catalog;
    catalog.type_counts = type_counts;
    catalog.seed = seed;
    if (static_cast<std::uint64_t>(num_classes) == product) {
        for (std::uint64_t code = 0; code < product; ++code) catalog.classes.push_back(decode(code));
        return catalog;
    }
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::uint64_t> pick(0, product - 1);
    std::set<std::uint64_t> taken;
    while (catalog.classes.size() < static_cast<std::size_t>(num_classes)) {
        const std::uint64_t code = pick(rng);
        if (taken.insert(code).second) catalog.classes.push_back(decode(code));
    }
    return catalog;
}

std::size_t Scene::mask_area(PartCategory c) const {
    return static_cast<std::size_t>(std::count(parts.data.begin(), parts.data.end(), index(c) + 1));
}

Scene render_scene(const ClassCatalog& catalog, int class_id, std::uint64_t placement_seed, int background_id,
                   const SceneConfig& cfg) {
    if (class_id < 0 || class_id >= catalog.num_classes()) throw RejectedInput("class id out of range");
    if (cfg.height < 1 || cfg.width < 1 || cfg.num_backgrounds < 1) throw RejectedInput("invalid scene config");
    Scene s;
    s.config = cfg;
    s.type_counts = catalog.type_counts;
    s.class_id = class_id;
    s.types = catalog.classes[static_cast<std::size_t>(class_id)];
    s.present.fill(true);
    s.placement_seed = placement_seed;
    s.background_id = ((background_id % cfg.num_backgrounds) + cfg.num_backgrounds) % cfg.num_backgrounds;
    s.background_seed = mix_seed(placement_seed, 0xBB);
    for (PartCategory c : kAllCategories) {
        std::mt19937_64 rng(mix_seed(placement_seed, static_cast<std::uint64_t>(index(c) + 1)));
        std::uniform_int_distribution<int> jitter(-cfg.jitter, cfg.jitter);
        s.offset[index(c)] = {jitter(rng), jitter(rng)};
    }
    compose(s);
    return s;
}

Intervention Intervention::delete_parts(std::vector<PartCategory> parts) {
    Intervention a;
    a.kind = Kind::DeleteParts;
    a.parts = std::move(parts);
    return a;
}

Intervention Intervention::keep_only(std::vector<PartCategory> parts) {
    Intervention a;
    a.kind = Kind::KeepOnly;
    a.parts = std::move(parts);
    return a;
}

Intervention Intervention::swap_part(PartCategory category, int new_type) {
    Intervention a;
    a.kind = Kind::SwapPart;
    a.category = category;
    a.new_type = new_type;
    return a;
}

Intervention Intervention::randomize_background(std::uint64_t seed) {
    Intervention a;
    a.kind = Kind::RandomizeBackground;
    a.seed = seed;
    return a;
}

Scene intervene(const Scene& scene, const Intervention& action) {
    Scene s = scene;
    switch (action.kind) {
        case Intervention::Kind::DeleteParts:
            for (PartCategory c : action.parts) require_present(scene, c);
            for (PartCategory c : action.parts) s.present[index(c)] = false;
            break;
        case Intervention::Kind::KeepOnly: {
            for (PartCategory c : action.parts) require_present(scene, c);
            s.present.fill(false);
            for (PartCategory c : action.parts) s.present[index(c)] = true;
            break;
        }
        case Intervention::Kind::SwapPart: {
            require_present(scene, action.category);
            const int ci = index(action.category);
            if (action.new_type < 0 || action.new_type >= scene.type_counts[ci])
                throw RejectedInput("swap type out of range for " + to_string(action.category));
            s.types[ci] = action.new_type;
            break;
        }
        case Intervention::Kind::RandomizeBackground:
            s.background_seed = action.seed;
            s.background_id = static_cast<int>(action.seed % static_cast<std::uint64_t>(s.config.num_backgrounds));
            break;
    }
    compose(s);
    return s;
}

std::vector<SceneRecord> plan_dataset(const DatasetSpec& spec) {
    if (spec.train_per_class < 0 || spec.test_per_class < 0) throw RejectedInput("scene counts must be nonnegative");
    std::vector<SceneRecord> out;
    const std::array<std::pair<const char*, int>, 2> splits{{{"train", spec.train_per_class}, {"test", spec.test_per_class}}};
    for (std::size_t si = 0; si < splits.size(); ++si) {
        int position = 0;
        for (int k = 0; k < spec.num_classes; ++k) {
            for (int i = 0; i < splits[si].second; ++i) {
                SceneRecord r;
                r.split = splits[si].first;
                r.index = position++;
                r.class_id = k;
                r.placement_seed = mix_seed(mix_seed(spec.seed, si), static_cast<std::uint64_t>(k) * 1000003ULL + i);
                r.background_id = static_cast<int>(mix_seed(r.placement_seed, 0xB6) %
                                                   static_cast<std::uint64_t>(std::max(1, spec.scene.num_backgrounds)));
                out.push_back(std::move(r));
            }
        }
    }
    return out;
}

Scene render_record(const SceneRecord& record, const ClassCatalog& catalog, const SceneConfig& cfg) {
    return render_scene(catalog, record.class_id, record.placement_seed, record.background_id, cfg);
}

}  // namespace protos
