#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "protos/embeddings.hpp"
#include "protos/losses.hpp"
#include "protos/model.hpp"

namespace protos {

struct OptimizerConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

struct TrainConfig {
    int num_prototypes = 300;
    int proto_dim = 512;
    int epochs = 80;
    int warmup_epochs = 10;
    int sparsity_warmup_epochs = 0;  // phi ramps linearly from 0 over these epochs (0: full weight at once)
    double base_lr = 0.01;
    float classifier_init_scale = 1.0f;  // class weights start as U(0, scale)
    int batch_size = 64;
    std::uint64_t seed = 0;
    float tau = 0.1f;
    float threshold = 0.1f;
    LossConfig loss;
    HeadMode head_mode = HeadMode::Full;
    bool backbone_frozen = true;
    ToyBackboneConfig backbone;
    OptimizerConfig optimizer;

    void validate() const;
    HeadConfig head() const;
    /// Applies a named ablation: no_prototypical_head, single_kernel or l1_sparsity.
    void apply_ablation(const std::string& name);
    std::vector<std::string> ablations() const;
};

void to_json(nlohmann::json& j, const TrainConfig& cfg);
void from_json(const nlohmann::json& j, TrainConfig& cfg);

/// Linear warm-up from 0 to base_lr over `warmup_steps`, then cosine decay to 0 at `total_steps`.
double lr_schedule(long step, long total_steps, long warmup_steps, double base_lr);

/// Backbone outputs and labels; the backbone itself is never touched by training.
struct TrainingSet {
    std::vector<PatchGrid> grids;
    std::vector<int> labels;
    int num_classes = 0;
};

struct StepRecord {
    long step = 0;
    int epoch = 0;
    double lr = 0.0;
    LossBreakdown loss;
};

nlohmann::json to_json(const StepRecord& r);

struct TrainState {
    ModelParams params;
    ModelParams adam_m;
    ModelParams adam_v;
    int epochs_completed = 0;
    long step = 0;
};

struct TrainOptions {
    std::function<void(const StepRecord&, const ModelParams&)> on_step;
    std::function<void(const TrainState&)> on_epoch_end;
    const TrainState* resume = nullptr;
};

/// Thrown when the loss becomes non-finite; `diagnostic` holds the offending batch.
class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(const std::string& what, nlohmann::json diagnostic)
        : std::runtime_error(what), diagnostic(std::move(diagnostic)) {}
    nlohmann::json diagnostic;
};

TrainState train(const TrainingSet& data, const TrainConfig& cfg, const TrainOptions& options = {});

// --- checkpoints -------------------------------------------------------------

struct Checkpoint {
    ModelParams params;
    TrainConfig config;
    int num_classes = 0;
    int epoch = 0;
    nlohmann::json metrics = nlohmann::json::object();
    std::string content_hash;
    std::optional<TrainState> resume;  // optimizer state, present in per-epoch checkpoints
};

/// SHA-256 over the model parameters (lexicographic tensor order, little-endian float32).
std::string parameter_hash(const ModelParams& params);

void save_checkpoint(Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// --- compactness accounting --------------------------------------------------

struct EffectivePrototypes {
    std::vector<int> predictions;
    std::vector<std::vector<int>> per_image;  // prototypes with i(pred, j) > 0
    std::vector<int> global;                  // union over images, sorted
};

/// Inference-mode active sets: {j : W(pred, j) * h_j > 0} per image and their union.
EffectivePrototypes effective_prototypes(const ModelParams& params, const HeadConfig& head,
                                         std::span<const PatchGrid> grids);

/// Same accounting from already computed importance rows (predicted class) per image.
EffectivePrototypes effective_prototypes_from(std::span<const VectorF> logits, std::span<const MatrixRM> importance);

}  // namespace protos
