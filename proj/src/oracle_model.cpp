#include "protos/oracle_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "protos/errors.hpp"

namespace protos {

TemplateOracleModel::TemplateOracleModel(const ClassCatalog& catalog, int patch_size, float tolerance, int min_pixels)
    : catalog_(catalog), patch_size_(patch_size), tolerance_(tolerance), min_pixels_(min_pixels) {
    if (catalog.num_classes() < 1) throw RejectedInput("catalog has no classes");
    if (patch_size < 1) throw RejectedInput("patch size must be positive");
    for (PartCategory c : kAllCategories) {
        offset_[index(c)] = static_cast<int>(templates_.size());
        for (int t = 0; t < catalog.type_counts[index(c)]; ++t) templates_.push_back(part_spec(c, t));
    }
    weights_ = MatrixRM::Zero(catalog.num_classes(), static_cast<Eigen::Index>(templates_.size()));
    for (int k = 0; k < catalog.num_classes(); ++k)
        for (PartCategory c : kAllCategories) weights_(k, prototype_of(c, catalog.classes[k][index(c)])) = 1.0f;
}

int TemplateOracleModel::prototype_of(PartCategory category, int type) const {
    if (type < 0 || type >= catalog_.type_counts[index(category)]) throw RejectedInput("part type out of range");
    return offset_[index(category)] + type;
}

Analysis TemplateOracleModel::analyze_one(const Image& image) const {
    if (image.height % patch_size_ != 0 || image.width % patch_size_ != 0)
        throw RejectedInput("image extent is not a multiple of the patch size");
    Analysis a;
    a.rows = image.height / patch_size_;
    a.cols = image.width / patch_size_;
    const Eigen::Index j_count = static_cast<Eigen::Index>(templates_.size());
    MatrixRM counts = MatrixRM::Zero(a.rows * a.cols, j_count);
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x) {
            const Eigen::Index cell = (y / patch_size_) * a.cols + x / patch_size_;
            for (Eigen::Index j = 0; j < j_count; ++j) {
                const auto& color = templates_[static_cast<std::size_t>(j)].glyph.color;
                bool match = true;
                for (int c = 0; c < 3 && match; ++c) match = std::abs(image.at(y, x, c) - color[c]) <= tolerance_;
                if (match) counts(cell, j) += 1.0f;
            }
        }
    a.maps = MatrixRM::Zero(counts.rows(), j_count);
    VectorF h = VectorF::Zero(j_count);
    for (Eigen::Index j = 0; j < j_count; ++j) {
        const float best = counts.col(j).maxCoeff();
        const float total = counts.col(j).sum();
        if (total < static_cast<float>(min_pixels_)) continue;
        a.maps.col(j) = counts.col(j) / best;
        h[j] = 1.0f;
    }
    a.logits = weights_ * h;
    a.importance = weights_.array().rowwise() * h.transpose().array();
    return a;
}

std::vector<Analysis> TemplateOracleModel::analyze(std::span<const Image* const> images) const {
    std::vector<Analysis> out;
    out.reserve(images.size());
    for (const Image* img : images) out.push_back(analyze_one(*img));
    return out;
}

ShuffledMapsModel::ShuffledMapsModel(std::shared_ptr<const ExplainableModel> base, std::uint64_t seed)
    : base_(std::move(base)), seed_(seed) {
    if (!base_) throw RejectedInput("shuffled model needs a base model");
}

std::vector<Analysis> ShuffledMapsModel::analyze(std::span<const Image* const> images) const {
    std::vector<Analysis> out = base_->analyze(images);
    for (Analysis& a : out) {
        MatrixRM shuffled(a.maps.rows(), a.maps.cols());
        std::vector<Eigen::Index> perm(static_cast<std::size_t>(a.maps.rows()));
        for (Eigen::Index j = 0; j < a.maps.cols(); ++j) {
            std::iota(perm.begin(), perm.end(), 0);
            std::mt19937_64 rng(mix_seed(seed_, static_cast<std::uint64_t>(j)));
            std::shuffle(perm.begin(), perm.end(), rng);
            for (std::size_t i = 0; i < perm.size(); ++i) shuffled(static_cast<Eigen::Index>(i), j) = a.maps(perm[i], j);
        }
        a.maps = std::move(shuffled);
    }
    return out;
}

}  // namespace protos
