#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "protos/embeddings.hpp"
#include "protos/image.hpp"
#include "protos/tensor.hpp"

namespace protos {

enum class Mode { Training, Inference };

/// Ablation switch for the prototypical head.
enum class HeadMode {
    Full,          // LN(Conv1x1 + Conv3x3) then spatial max
    MaxPool,       // plain spatial max over the normalized similarity
    SingleKernel,  // LN(Conv1x1) then spatial max
};

std::string to_string(HeadMode mode);
HeadMode head_mode_from_string(const std::string& name);

struct HeadConfig {
    HeadMode mode = HeadMode::Full;
    float tau = 0.1f;
    float threshold = 0.1f;  // inference-time cut-off on prototype scores
    bool layer_norm = true;  // only meaningful for Full / SingleKernel
    float norm_eps = 1e-5f;
};

struct ModelShape {
    int embed_dim = 128;
    int proto_dim = 512;
    int num_prototypes = 300;
    int num_classes = 2;
};

inline constexpr int kProjectionLayers = 3;

/// Three residual 1x1 layers of width D, preceded by a 1x1 adapter when C_e != D.
struct ProjectionParams {
    bool has_adapter = false;
    MatrixRM adapter_weight;  // D x C_e
    VectorF adapter_bias;     // D
    std::array<MatrixRM, kProjectionLayers> weight;  // D x D
    std::array<VectorF, kProjectionLayers> bias;     // D
};

struct PrototypeBank {
    MatrixRM vectors;  // J x D
    int size() const { return static_cast<int>(vectors.rows()); }
};

/// Depthwise kernels: one independent 1x1 and 3x3 kernel per prototype, plus the norm affine.
struct PrototypicalHeadParams {
    VectorF conv1_weight;  // J
    VectorF conv1_bias;    // J
    MatrixRM conv3_weight;  // J x 9, offsets in (dy, dx) row-major order
    VectorF conv3_bias;     // J
    VectorF norm_scale;     // J
    VectorF norm_shift;     // J
};

/// Nonnegative K x J classifier, no bias.
struct ClassifierWeights {
    MatrixRM weight;
};

struct ModelParams {
    ProjectionParams projection;
    PrototypeBank prototypes;
    PrototypicalHeadParams head;
    ClassifierWeights classifier;

    ModelShape shape() const;

    /// Deterministic initialization from a seed. Class weights start as U(0, classifier_scale).
    static ModelParams initialize(const ModelShape& shape, std::uint64_t seed, float classifier_scale = 1.0f);
    /// Same shapes, every value zero (used as a gradient accumulator).
    static ModelParams zeros_like(const ModelParams& other);

    using Visitor = std::function<void(const std::string& name, std::span<float> values, std::vector<int> shape)>;
    using ConstVisitor =
        std::function<void(const std::string& name, std::span<const float> values, std::vector<int> shape)>;
    /// Visit every named tensor in lexicographic name order.
    void for_each(const Visitor& visit);
    void for_each(const ConstVisitor& visit) const;

    bool all_finite() const;
};

struct SimilarityTensor {
    MatrixRM raw;         // I x J, cosine similarity
    MatrixRM normalized;  // I x J, softmax over prototypes per patch
    float tau = 0.1f;
};

struct PrototypeScores {
    VectorF values;  // J
    Mode mode = Mode::Inference;
};

using ImportanceMatrix = MatrixRM;  // K x J

// --- single-image operations -------------------------------------------------

MatrixRM project(const PatchGrid& grid, const ProjectionParams& params);
MatrixRM cosine_similarity(const MatrixRM& projected, const PrototypeBank& bank);
MatrixRM normalize_similarity(const MatrixRM& raw, float tau);
/// `normalized` is (rows*cols) x J in row-major spatial order.
PrototypeScores prototype_scores(const MatrixRM& normalized, int rows, int cols, const PrototypicalHeadParams& params,
                                 const HeadConfig& cfg, Mode mode);
VectorF classify(const PrototypeScores& scores, const ClassifierWeights& weights);
ImportanceMatrix importance_matrix(const ClassifierWeights& weights, const PrototypeScores& scores);

struct ForwardResult {
    VectorF logits;
    SimilarityTensor similarity;
    PrototypeScores scores;
    ImportanceMatrix importance;
    int rows = 0;
    int cols = 0;
};

ForwardResult forward(const PatchGrid& grid, const ModelParams& params, const HeadConfig& cfg, Mode mode);

/// Argmax with ties resolved toward the lowest index.
int argmax(const VectorF& v);

struct ExplanationItem {
    int prototype = 0;
    float importance = 0.0f;
    std::vector<float> map;  // height x width, bilinearly upsampled normalized similarity
};

struct Explanation {
    int predicted_class = 0;
    float class_score = 0.0f;
    int local_size = 0;
    float coverage = 1.0f;  // share of the summed importances covered by `items`
    int height = 0;
    int width = 0;
    std::vector<ExplanationItem> items;  // sorted by importance, descending
};

Explanation explain(const Image& image, const PatchGrid& grid, const ModelParams& params, const HeadConfig& cfg,
                    int top_k);

/// Half-pixel-centered bilinear resize of a rows x cols map to height x width.
std::vector<float> upsample_bilinear(std::span<const float> grid_map, int rows, int cols, int height, int width);

/// Pearson correlation between classifier rows; rows with zero variance correlate 0 with every other row.
Eigen::MatrixXd class_weight_correlation(const MatrixRM& weight);

// --- batched training path ---------------------------------------------------

/// Activations of one training batch, kept for the backward pass.
struct BatchActivations {
    int batch = 0;
    int rows = 0;
    int cols = 0;
    Mode mode = Mode::Training;

    MatrixRM input;                                  // N x C_e, N = batch * rows * cols
    std::array<MatrixRM, kProjectionLayers + 1> act; // act[0] = adapted input, act[l+1] = layer l output
    std::array<MatrixRM, kProjectionLayers> pre;     // pre-activations
    MatrixRM unit_projected;                         // rows of act.back() scaled to unit norm
    VectorF projected_norm;
    MatrixRM unit_prototypes;
    VectorF prototype_norm;
    MatrixRM raw;         // N x J
    MatrixRM normalized;  // N x J
    MatrixRM normed_hat;  // N x J, LN output before the affine
    VectorF inv_std;      // N
    MatrixRM head_out;    // N x J, input to the spatial max
    MatrixRM pooled;      // B x J, spatial max (before clamping)
    Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> pooled_at;  // B x J, location of the max
    MatrixRM scores;      // B x J, h
    MatrixRM logits;      // B x K
};

BatchActivations forward_batch(std::span<const PatchGrid* const> grids, const ModelParams& params,
                               const HeadConfig& cfg, Mode mode);

/// Upstream gradients flowing into a batch.
struct BatchGradients {
    MatrixRM d_logits;    // B x K
    MatrixRM d_scores;    // B x J, extra gradient on h (e.g. from the importance regularizer)
    VectorF d_presence;   // J, gradient on every entry of the normalized similarity column
};

/// Accumulates parameter gradients into `grads` (same shapes as `params`).
void backward_batch(const BatchActivations& acts, const BatchGradients& upstream, const ModelParams& params,
                    const HeadConfig& cfg, ModelParams& grads);

}  // namespace protos
