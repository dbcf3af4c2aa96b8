#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "protos/partsynth.hpp"
#include "protos/xmetrics.hpp"

namespace protos {

/// Hand-built, perfectly aligned model: one prototype per (category, type) whose similarity map is
/// the share of each patch's pixels matching that part type's color, relative to the best patch.
/// A class weights exactly the prototypes of its five part types with 1.
class TemplateOracleModel final : public ExplainableModel {
public:
    explicit TemplateOracleModel(const ClassCatalog& catalog, int patch_size = 12, float tolerance = 0.04f,
                                 int min_pixels = 4);
    int num_classes() const override { return catalog_.num_classes(); }
    int num_prototypes() const override { return static_cast<int>(templates_.size()); }
    using ExplainableModel::analyze;
    std::vector<Analysis> analyze(std::span<const Image* const> images) const override;

    /// Prototype index of a part type.
    int prototype_of(PartCategory category, int type) const;
    const MatrixRM& weights() const { return weights_; }

private:
    Analysis analyze_one(const Image& image) const;

    ClassCatalog catalog_;
    int patch_size_;
    float tolerance_;
    int min_pixels_;
    std::vector<PartSpec> templates_;
    std::array<int, kCategoryCount> offset_{};
    MatrixRM weights_;  // K x J
};

/// Wraps a model and moves every prototype's similarity map to the wrong place: each prototype gets
/// its own fixed, seeded permutation of patch positions, the same for every image. Logits and
/// importances are untouched, so only the spatial explanation breaks.
class ShuffledMapsModel final : public ExplainableModel {
public:
    ShuffledMapsModel(std::shared_ptr<const ExplainableModel> base, std::uint64_t seed);
    int num_classes() const override { return base_->num_classes(); }
    int num_prototypes() const override { return base_->num_prototypes(); }
    using ExplainableModel::analyze;
    std::vector<Analysis> analyze(std::span<const Image* const> images) const override;

private:
    std::shared_ptr<const ExplainableModel> base_;
    std::uint64_t seed_;
};

}  // namespace protos
