#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "protos/embeddings.hpp"
#include "protos/model.hpp"
#include "protos/partsynth.hpp"

namespace protos {

/// What the metric suite needs from a model for one image.
struct Analysis {
    VectorF logits;       // K
    MatrixRM importance;  // K x J
    MatrixRM maps;        // (rows*cols) x J, similarity maps in row-major spatial order
    int rows = 0;
    int cols = 0;
    int predicted() const { return argmax(logits); }
};

class ExplainableModel {
public:
    virtual ~ExplainableModel() = default;
    virtual int num_classes() const = 0;
    virtual int num_prototypes() const = 0;
    virtual std::vector<Analysis> analyze(std::span<const Image* const> images) const = 0;
    Analysis analyze(const Image& image) const;
};

/// A trained prototypical-part model behind the frozen toy backbone, evaluated in inference mode.
class PrototypeModel final : public ExplainableModel {
public:
    PrototypeModel(ModelParams params, HeadConfig head, const ToyBackboneConfig& backbone);
    int num_classes() const override { return static_cast<int>(params_.classifier.weight.rows()); }
    int num_prototypes() const override { return params_.prototypes.size(); }
    using ExplainableModel::analyze;
    std::vector<Analysis> analyze(std::span<const Image* const> images) const override;
    const ModelParams& params() const { return params_; }
    const ToyBackbone& backbone() const { return backbone_; }

private:
    ModelParams params_;
    HeadConfig head_;
    ToyBackbone backbone_;
};

/// Prediction with a strict winner; -1 when the top score is tied.
int decisive_argmax(const VectorF& logits);

// --- part importance ---------------------------------------------------------

struct PartImportance {
    std::array<double, kCategoryCount> per_category{};
    double outside = 0.0;  // mass on pixels outside every part mask
    double total = 0.0;    // summed importance of the contributing prototypes
    int zero_maps = 0;     // prototypes skipped because their map sums to 0
    double mass() const;
    double max_part() const;
};

/// One importance-weighted map at image resolution.
struct WeightedMap {
    int prototype = 0;
    double importance = 0.0;
    std::span<const float> map;  // height x width
};

PartImportance part_importance(std::span<const WeightedMap> maps, const LabelMap& parts);
PartImportance part_importance(const Explanation& explanation, const LabelMap& parts);
/// Uses every prototype with positive importance toward `class_id`. When `per_prototype` is given it
/// receives (prototype id, contribution) for each of them.
PartImportance part_importance(const Analysis& analysis, int class_id, const LabelMap& parts,
                               std::vector<std::pair<int, PartImportance>>* per_prototype = nullptr);

std::vector<float> upsampled_map(const Analysis& analysis, int prototype, int height, int width);

// --- rank statistics ---------------------------------------------------------

/// Spearman rho with average ranks; nullopt when either side is constant.
std::optional<double> spearman(std::span<const double> a, std::span<const double> b);
/// Kendall tau-b; nullopt when either side is constant.
std::optional<double> kendall_tau(std::span<const double> a, std::span<const double> b);

// --- metric configuration ----------------------------------------------------

enum class CompletenessMode { MeanOfThree, DeletionOnly };
std::string to_string(CompletenessMode mode);
CompletenessMode completeness_mode_from_string(const std::string& name);

struct MetricsConfig {
    double keep_threshold = 0.2;        // part selection for preservation / deletion
    double presence_threshold = 0.1;    // o_p threshold
    double noise_amplitude = 2.0 / 255.0;
    int swap_trials_per_scene = 1;
    std::uint64_t seed = 0;
    CompletenessMode completeness = CompletenessMode::MeanOfThree;
    bool per_sample = false;
    int workers = 0;  // 0: use PROTOS_NUM_WORKERS or the hardware
};

// --- compactness -------------------------------------------------------------

struct CompactnessResult {
    double accuracy = 0.0;
    int global_size = 0;
    double local_size = 0.0;
    std::vector<int> predictions;
    std::vector<int> local_sizes;
};

CompactnessResult compactness(const ExplainableModel& model, std::span<const Image* const> images,
                              std::span<const int> labels, int workers = 0);

// --- FunnyBirds-style checks -------------------------------------------------

struct GroundTruthImportance {
    int predicted_class = 0;
    double score = 0.0;
    std::array<std::optional<double>, kCategoryCount> drop{};  // empty for absent categories
};

GroundTruthImportance ground_truth_importance(const ExplainableModel& model, const Scene& scene);

struct FunnyBirdsScores {
    double csdc = 0.0, pc = 0.0, dc = 0.0, d = 0.0, bi = 0.0, sd = 0.0, ts = 0.0, mx = 0.0;
    int scenes = 0;
    int ts_trials = 0;
    int degenerate_rankings = 0;
    int zero_maps = 0;
    nlohmann::json per_sample = nlohmann::json::array();
};

FunnyBirdsScores funnybirds_checks(const ExplainableModel& model, std::span<const Scene> scenes,
                                   const MetricsConfig& cfg = {});

struct RadarScores {
    double completeness = 0.0;
    double correctness = 0.0;
    double contrastivity = 0.0;
};

RadarScores radar_scores(const FunnyBirdsScores& checks, CompletenessMode mode = CompletenessMode::MeanOfThree);

// --- consistency / stability -------------------------------------------------

using PartPresence = std::array<bool, kCategoryCount>;

/// o_p: whether the importance-weighted map of `prototype` exceeds `threshold` inside each part mask.
PartPresence presence_vector(const Analysis& analysis, int class_id, int prototype, const LabelMap& parts,
                             double threshold);

struct PresenceRecord {
    int class_id = 0;
    int prototype = 0;
    PartPresence presence{};
};

struct StabilityRecord {
    int class_id = 0;
    int prototype = 0;
    bool unchanged = true;
};

struct AggregateScore {
    double score = 0.0;
    int classes = 0;
    int prototypes = 0;  // (class, prototype) groups that entered the average
};

/// Modal-fraction per (class, prototype), averaged over prototypes, then over classes.
AggregateScore consistency_from_records(std::span<const PresenceRecord> records);
/// Unchanged-fraction per (class, prototype), averaged the same way.
AggregateScore stability_from_records(std::span<const StabilityRecord> records);

AggregateScore consistency(const ExplainableModel& model, std::span<const Scene> scenes, const MetricsConfig& cfg = {});
AggregateScore stability(const ExplainableModel& model, std::span<const Scene> scenes, const MetricsConfig& cfg = {});

// --- reports -----------------------------------------------------------------

inline constexpr int kMetricReportSchemaVersion = 1;

struct MetricReport {
    std::vector<std::string> requested;
    int num_scenes = 0;
    int num_prototypes = 0;
    std::optional<CompactnessResult> compactness;
    std::optional<FunnyBirdsScores> checks;
    std::optional<RadarScores> radar;
    CompletenessMode completeness_mode = CompletenessMode::MeanOfThree;
    std::optional<AggregateScore> consistency;
    std::optional<AggregateScore> stability;
    std::vector<std::string> warnings;
    nlohmann::json per_sample;  // null unless requested
    double wall_clock_seconds = 0.0;
};

/// Metric names accepted by `evaluate`; "all" expands to every one of them.
const std::vector<std::string>& metric_names();
std::vector<std::string> parse_metric_selection(const std::string& list);

/// Runs the selected metrics. Scenes without masks (`have_masks == false`) only support compactness;
/// other requested metrics are skipped with a warning.
MetricReport evaluate(const ExplainableModel& model, std::span<const Scene> scenes,
                      const std::vector<std::string>& selection, const MetricsConfig& cfg, bool have_masks = true);

nlohmann::json to_json(const MetricReport& report);
/// Structural and range checks; returns a list of problems (empty when valid).
std::vector<std::string> validate_report(const nlohmann::json& report);

}  // namespace protos
