#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "protos/image.hpp"
#include "protos/tensor.hpp"

namespace protos {

/// Backbone output for one image: a rows x cols grid of dim-dimensional patch embeddings,
/// stored row-major in (row, col, dim) order.
struct PatchGrid {
    int rows = 0;
    int cols = 0;
    int dim = 0;
    std::vector<float> values;

    PatchGrid() = default;
    PatchGrid(int r, int c, int d) : rows(r), cols(c), dim(d), values(static_cast<std::size_t>(r) * c * d, 0.0f) {}

    int patch_count() const { return rows * cols; }
    float* cell(int index) { return values.data() + static_cast<std::size_t>(index) * dim; }
    const float* cell(int index) const { return values.data() + static_cast<std::size_t>(index) * dim; }

    /// (rows*cols) x dim view; one row per patch.
    Eigen::Map<const MatrixRM> as_matrix() const { return {values.data(), patch_count(), dim}; }

    /// Throws RejectedInput on non-positive extents, size mismatch or non-finite values.
    void validate() const;

    bool operator==(const PatchGrid&) const = default;
};

struct ToyBackboneConfig {
    int patch_size = 12;
    int out_dim = 128;
    std::uint64_t seed = 0;
    bool normalize = false;  // per-patch mean/variance normalization of the projected vector
    int channels = 3;
};

/// Strictly patch-local stand-in for a frozen ViT: each s x s patch is flattened and multiplied by a
/// fixed seed-derived matrix with orthonormal rows. No state changes after construction.
class ToyBackbone {
public:
    explicit ToyBackbone(const ToyBackboneConfig& cfg);

    PatchGrid embed(const Image& image) const;

    const ToyBackboneConfig& config() const { return cfg_; }
    /// out_dim x (s*s*channels); rows are orthonormal.
    const MatrixRM& projection() const { return projection_; }

private:
    ToyBackboneConfig cfg_;
    MatrixRM projection_;
};

PatchGrid toy_embed(const Image& image, const ToyBackboneConfig& cfg);

void save_patch_grid(const PatchGrid& grid, const std::filesystem::path& path);
PatchGrid load_patch_grid(const std::filesystem::path& path);

}  // namespace protos
