#include "protos/xmetrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "protos/errors.hpp"
#include "protos/parallel.hpp"

namespace protos {

using nlohmann::json;

Analysis ExplainableModel::analyze(const Image& image) const {
    const Image* one[] = {&image};
    return std::move(analyze(one).front());
}

PrototypeModel::PrototypeModel(ModelParams params, HeadConfig head, const ToyBackboneConfig& backbone)
    : params_(std::move(params)), head_(head), backbone_(backbone) {
    if (params_.classifier.weight.minCoeff() < 0.0f) throw InvalidParameter("classifier weights must be nonnegative");
}

std::vector<Analysis> PrototypeModel::analyze(std::span<const Image* const> images) const {
    std::vector<PatchGrid> grids;
    grids.reserve(images.size());
    for (const Image* img : images) grids.push_back(backbone_.embed(*img));
    std::vector<const PatchGrid*> ptrs;
    for (const auto& g : grids) ptrs.push_back(&g);
    const BatchActivations acts = forward_batch(ptrs, params_, head_, Mode::Inference);
    const int patches = acts.rows * acts.cols;
    std::vector<Analysis> out(images.size());
    for (int b = 0; b < acts.batch; ++b) {
        Analysis& a = out[static_cast<std::size_t>(b)];
        a.logits = acts.logits.row(b).transpose();
        a.importance = params_.classifier.weight.array().rowwise() * acts.scores.row(b).array();
        a.maps = acts.normalized.middleRows(static_cast<Eigen::Index>(b) * patches, patches);
        a.rows = acts.rows;
        a.cols = acts.cols;
    }
    return out;
}

int decisive_argmax(const VectorF& logits) {
    if (logits.size() == 0) return -1;
    const int best = argmax(logits);
    for (Eigen::Index k = 0; k < logits.size(); ++k)
        if (k != best && logits[k] == logits[best]) return -1;
    return best;
}

// --- part importance ---------------------------------------------------------

double PartImportance::mass() const {
    return std::accumulate(per_category.begin(), per_category.end(), 0.0) + outside;
}

double PartImportance::max_part() const { return *std::max_element(per_category.begin(), per_category.end()); }

namespace {

void add_map(PartImportance& pi, double importance, std::span<const float> map, const LabelMap& parts) {
    pi.total += importance;
    double sum = 0.0;
    for (float v : map) sum += v;
    if (!(sum > 0.0)) {
        ++pi.zero_maps;
        return;
    }
    const double scale = importance / sum;
    std::array<double, kCategoryCount + 1> acc{};
    for (std::size_t p = 0; p < map.size(); ++p) acc[parts.data[p]] += map[p];
    pi.outside += acc[0] * scale;
    for (int q = 0; q < kCategoryCount; ++q) pi.per_category[q] += acc[q + 1] * scale;
}

void check_parts(const LabelMap& parts, std::size_t pixels) {
    if (parts.data.size() != pixels) throw RejectedInput("part masks must match the explanation resolution");
    for (std::uint8_t v : parts.data)
        if (v > kCategoryCount) throw RejectedInput("part mask label out of range");
}

}  // namespace

PartImportance part_importance(std::span<const WeightedMap> maps, const LabelMap& parts) {
    PartImportance pi;
    const std::size_t pixels = static_cast<std::size_t>(parts.height) * parts.width;
    check_parts(parts, pixels);
    for (const WeightedMap& m : maps) {
        if (m.importance < 0.0) throw RejectedInput("prototype importance must be nonnegative");
        if (m.map.size() != pixels) throw RejectedInput("map resolution differs from the masks");
        add_map(pi, m.importance, m.map, parts);
    }
    return pi;
}

PartImportance part_importance(const Explanation& explanation, const LabelMap& parts) {
    std::vector<WeightedMap> maps;
    for (const auto& item : explanation.items) maps.push_back({item.prototype, item.importance, item.map});
    return part_importance(maps, parts);
}

std::vector<float> upsampled_map(const Analysis& analysis, int prototype, int height, int width) {
    std::vector<float> cells(static_cast<std::size_t>(analysis.rows) * analysis.cols);
    for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = analysis.maps(static_cast<Eigen::Index>(i), prototype);
    return upsample_bilinear(cells, analysis.rows, analysis.cols, height, width);
}

PartImportance part_importance(const Analysis& analysis, int class_id, const LabelMap& parts,
                               std::vector<std::pair<int, PartImportance>>* per_prototype) {
    if (class_id < 0 || class_id >= analysis.importance.rows()) throw RejectedInput("class id out of range");
    check_parts(parts, static_cast<std::size_t>(parts.height) * parts.width);
    PartImportance pi;
    for (Eigen::Index j = 0; j < analysis.importance.cols(); ++j) {
        const double i = analysis.importance(class_id, j);
        if (!(i > 0.0)) continue;
        const std::vector<float> map = upsampled_map(analysis, static_cast<int>(j), parts.height, parts.width);
        if (per_prototype) {
            PartImportance single;
            add_map(single, i, map, parts);
            per_prototype->emplace_back(static_cast<int>(j), single);
        }
        add_map(pi, i, map, parts);
    }
    return pi;
}

// --- rank statistics ---------------------------------------------------------

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j);
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

std::optional<double> spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw RejectedInput("rank inputs differ in length");
    if (a.size() < 2) return std::nullopt;
    const std::vector<double> ra = average_ranks(a), rb = average_ranks(b);
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return std::nullopt;
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

std::optional<double> kendall_tau(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw RejectedInput("rank inputs differ in length");
    double concordant = 0.0, discordant = 0.0, ties_a = 0.0, ties_b = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = i + 1; j < a.size(); ++j) {
            const double da = a[i] - a[j], db = b[i] - b[j];
            if (da == 0.0 && db == 0.0) continue;
            if (da == 0.0) {
                ties_a += 1.0;
            } else if (db == 0.0) {
                ties_b += 1.0;
            } else if ((da > 0.0) == (db > 0.0)) {
                concordant += 1.0;
            } else {
                discordant += 1.0;
            }
        }
    const double n0 = concordant + discordant;
    const double denom = std::sqrt((n0 + ties_a) * (n0 + ties_b));
    if (n0 == 0.0 || denom == 0.0) return std::nullopt;
    return std::clamp((concordant - discordant) / denom, -1.0, 1.0);
}

// --- configuration -----------------------------------------------------------

std::string to_string(CompletenessMode mode) {
    return mode == CompletenessMode::MeanOfThree ? "mean_csdc_pc_dc" : "dc";
}

CompletenessMode completeness_mode_from_string(const std::string& name) {
    if (name == "mean_csdc_pc_dc") return CompletenessMode::MeanOfThree;
    if (name == "dc") return CompletenessMode::DeletionOnly;
    throw RejectedInput("unknown completeness mode: " + name);
}

// --- compactness -------------------------------------------------------------

CompactnessResult compactness(const ExplainableModel& model, std::span<const Image* const> images,
                              std::span<const int> labels, int workers) {
    if (images.size() != labels.size()) throw RejectedInput("labels do not match images");
    constexpr std::size_t kChunk = 32;
    const std::size_t chunks = (images.size() + kChunk - 1) / kChunk;
    std::vector<std::vector<Analysis>> parts(chunks);
    parallel_for(
        chunks,
        [&](std::size_t c) {
            const std::size_t lo = c * kChunk, hi = std::min(images.size(), lo + kChunk);
            parts[c] = model.analyze(images.subspan(lo, hi - lo));
        },
        workers);
    std::vector<VectorF> logits;
    std::vector<MatrixRM> importance;
    for (auto& chunk : parts)
        for (auto& a : chunk) {
            logits.push_back(std::move(a.logits));
            importance.push_back(std::move(a.importance));
        }
    CompactnessResult r;
    if (images.empty()) return r;
    std::vector<bool> used(static_cast<std::size_t>(model.num_prototypes()), false);
    std::size_t correct = 0, local_total = 0;
    for (std::size_t n = 0; n < logits.size(); ++n) {
        const int pred = argmax(logits[n]);
        r.predictions.push_back(pred);
        if (pred == labels[n]) ++correct;
        int local = 0;
        for (Eigen::Index j = 0; j < importance[n].cols(); ++j)
            if (importance[n](pred, j) > 0.0f) {
                ++local;
                used[static_cast<std::size_t>(j)] = true;
            }
        r.local_sizes.push_back(local);
        local_total += static_cast<std::size_t>(local);
    }
    r.accuracy = static_cast<double>(correct) / static_cast<double>(images.size());
    r.global_size = static_cast<int>(std::count(used.begin(), used.end(), true));
    r.local_size = static_cast<double>(local_total) / static_cast<double>(images.size());
    return r;
}

// --- FunnyBirds-style checks -------------------------------------------------

namespace {

std::vector<PartCategory> present_categories(const Scene& s) {
    std::vector<PartCategory> out;
    for (PartCategory c : kAllCategories)
        if (s.has_part(c)) out.push_back(c);
    return out;
}

/// Labels of `a`, falling back to `b` where `a` has none: the region set both scenes annotate.
LabelMap union_masks(const LabelMap& a, const LabelMap& b) {
    LabelMap out = a;
    for (std::size_t p = 0; p < out.data.size(); ++p)
        if (out.data[p] == 0) out.data[p] = b.data[p];
    return out;
}

std::vector<Analysis> analyze_scenes(const ExplainableModel& model, const std::vector<const Scene*>& scenes) {
    std::vector<const Image*> images;
    for (const Scene* s : scenes) images.push_back(&s->image);
    return model.analyze(images);
}

struct SceneChecks {
    int predicted = 0;
    PartImportance pi;
    std::array<std::optional<double>, kCategoryCount> drop{};
    double sd = 0.5, csdc = 0.5;
    bool degenerate_sd = false, degenerate_csdc = false;
    double pc = 0.0, dc = 0.0, d = 0.0, bi = 0.0;
    int ts_success = 0, ts_trials = 0;
    std::vector<std::string> selected;
};

SceneChecks check_scene(const ExplainableModel& model, const Scene& scene, const MetricsConfig& cfg,
                        std::size_t scene_index) {
    SceneChecks out;
    const std::vector<PartCategory> present = present_categories(scene);
    std::mt19937_64 rng(mix_seed(cfg.seed, mix_seed(scene.placement_seed, scene_index)));

    // first round: original, single deletions, background randomization, swaps
    std::vector<Scene> variants;
    for (PartCategory q : present) variants.push_back(intervene(scene, Intervention::delete_parts({q})));
    variants.push_back(intervene(scene, Intervention::randomize_background(rng())));
    std::vector<std::pair<PartCategory, int>> swaps;
    std::vector<PartCategory> swappable;
    for (PartCategory q : present)
        if (scene.type_counts[index(q)] > 1) swappable.push_back(q);
    for (int t = 0; t < cfg.swap_trials_per_scene && !swappable.empty(); ++t) {
        const PartCategory q = swappable[std::uniform_int_distribution<std::size_t>(0, swappable.size() - 1)(rng)];
        const int current = scene.types[index(q)];
        int other = std::uniform_int_distribution<int>(0, scene.type_counts[index(q)] - 2)(rng);
        if (other >= current) ++other;
        swaps.emplace_back(q, other);
        variants.push_back(intervene(scene, Intervention::swap_part(q, other)));
    }
    std::vector<const Scene*> batch{&scene};
    for (const auto& v : variants) batch.push_back(&v);
    const std::vector<Analysis> first = analyze_scenes(model, batch);

    const Analysis& base = first[0];
    const int k = base.predicted();
    out.predicted = k;
    out.pi = part_importance(base, k, scene.parts);

    // ground-truth drops and rank agreement
    std::vector<double> claimed, measured;
    for (std::size_t n = 0; n < present.size(); ++n) {
        const double drop = static_cast<double>(base.logits[k]) - first[1 + n].logits[k];
        out.drop[index(present[n])] = drop;
        claimed.push_back(out.pi.per_category[index(present[n])]);
        measured.push_back(drop);
    }
    if (auto rho = spearman(claimed, measured)) {
        out.sd = (*rho + 1.0) / 2.0;
    } else {
        out.degenerate_sd = true;
    }
    if (auto tau = kendall_tau(claimed, measured)) {
        out.csdc = (*tau + 1.0) / 2.0;
    } else {
        out.degenerate_csdc = true;
    }

    const double mass = out.pi.mass();
    out.d = mass > 0.0 ? std::clamp(1.0 - out.pi.outside / mass, 0.0, 1.0) : 0.0;
    out.bi = decisive_argmax(first[1 + present.size()].logits) == k ? 1.0 : 0.0;

    for (std::size_t t = 0; t < swaps.size(); ++t) {
        const Scene& swapped = variants[present.size() + 1 + t];
        const LabelMap regions = union_masks(scene.parts, swapped.parts);
        const PartImportance before = part_importance(base, k, regions);
        const PartImportance after = part_importance(first[present.size() + 2 + t], k, regions);
        std::array<double, kCategoryCount> delta{};
        for (int q = 0; q < kCategoryCount; ++q) delta[q] = std::abs(after.per_category[q] - before.per_category[q]);
        const int target = index(swaps[t].first);
        bool ok = delta[target] > 0.0;
        for (int q = 0; q < kCategoryCount && ok; ++q)
            if (q != target && delta[q] >= delta[target]) ok = false;
        out.ts_success += ok ? 1 : 0;
        ++out.ts_trials;
    }

    // second round: preservation and deletion of the parts the explanation claims
    std::vector<PartCategory> selected;
    const double top = out.pi.max_part();
    if (top > 0.0)
        for (PartCategory q : present)
            if (out.pi.per_category[index(q)] >= cfg.keep_threshold * top) selected.push_back(q);
    for (PartCategory q : selected) out.selected.push_back(to_string(q));
    if (!selected.empty()) {
        const Scene kept = intervene(scene, Intervention::keep_only(selected));
        const Scene deleted = intervene(scene, Intervention::delete_parts(selected));
        const std::vector<Analysis> second = analyze_scenes(model, {&kept, &deleted});
        out.pc = decisive_argmax(second[0].logits) == k ? 1.0 : 0.0;
        out.dc = decisive_argmax(second[1].logits) != k ? 1.0 : 0.0;
    }
    return out;
}

double mean_of(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

GroundTruthImportance ground_truth_importance(const ExplainableModel& model, const Scene& scene) {
    const std::vector<PartCategory> present = present_categories(scene);
    std::vector<Scene> deleted;
    for (PartCategory q : present) deleted.push_back(intervene(scene, Intervention::delete_parts({q})));
    std::vector<const Scene*> batch{&scene};
    for (const auto& s : deleted) batch.push_back(&s);
    const std::vector<Analysis> a = analyze_scenes(model, batch);
    GroundTruthImportance g;
    g.predicted_class = a[0].predicted();
    g.score = a[0].logits[g.predicted_class];
    for (std::size_t n = 0; n < present.size(); ++n)
        g.drop[index(present[n])] = g.score - a[1 + n].logits[g.predicted_class];
    return g;
}

FunnyBirdsScores funnybirds_checks(const ExplainableModel& model, std::span<const Scene> scenes,
                                   const MetricsConfig& cfg) {
    if (scenes.empty()) throw RejectedInput("funnybirds checks need at least one scene");
    if (!(cfg.keep_threshold >= 0.0 && cfg.keep_threshold <= 1.0)) throw InvalidParameter("keep_threshold must be in [0,1]");
    std::vector<SceneChecks> results(scenes.size());
    parallel_for(
        scenes.size(), [&](std::size_t i) { results[i] = check_scene(model, scenes[i], cfg, i); }, cfg.workers);

    FunnyBirdsScores s;
    std::vector<double> sd, csdc, pc, dc, d, bi;
    for (std::size_t i = 0; i < results.size(); ++i) {
        const SceneChecks& r = results[i];
        sd.push_back(r.sd);
        csdc.push_back(r.csdc);
        pc.push_back(r.pc);
        dc.push_back(r.dc);
        d.push_back(r.d);
        bi.push_back(r.bi);
        s.ts_trials += r.ts_trials;
        s.degenerate_rankings += (r.degenerate_sd ? 1 : 0) + (r.degenerate_csdc ? 1 : 0);
        s.zero_maps += r.pi.zero_maps;
        if (cfg.per_sample) {
            json pi = json::object(), drop = json::object();
            for (PartCategory q : kAllCategories) {
                pi[to_string(q)] = r.pi.per_category[index(q)];
                if (r.drop[index(q)]) drop[to_string(q)] = *r.drop[index(q)];
            }
            s.per_sample.push_back({{"scene", i},
                                    {"class_id", scenes[i].class_id},
                                    {"predicted", r.predicted},
                                    {"part_importance", pi},
                                    {"outside_mass", r.pi.outside},
                                    {"score_drop", drop},
                                    {"selected_parts", r.selected},
                                    {"SD", r.sd},
                                    {"CSDC", r.csdc},
                                    {"PC", r.pc},
                                    {"DC", r.dc},
                                    {"D", r.d},
                                    {"BI", r.bi},
                                    {"TS_successes", r.ts_success},
                                    {"TS_trials", r.ts_trials}});
        }
    }
    int ts_success = 0;
    for (const auto& r : results) ts_success += r.ts_success;
    s.scenes = static_cast<int>(scenes.size());
    s.sd = mean_of(sd);
    s.csdc = mean_of(csdc);
    s.pc = mean_of(pc);
    s.dc = mean_of(dc);
    s.d = mean_of(d);
    s.bi = mean_of(bi);
    s.ts = s.ts_trials > 0 ? static_cast<double>(ts_success) / s.ts_trials : 0.0;
    s.mx = (s.csdc + s.pc + s.dc + s.d + s.bi + s.sd + s.ts) / 7.0;
    return s;
}

RadarScores radar_scores(const FunnyBirdsScores& checks, CompletenessMode mode) {
    RadarScores r;
    r.correctness = checks.sd;
    r.contrastivity = checks.ts;
    r.completeness = mode == CompletenessMode::MeanOfThree ? (checks.csdc + checks.pc + checks.dc) / 3.0 : checks.dc;
    return r;
}

// --- consistency / stability -------------------------------------------------

PartPresence presence_vector(const Analysis& analysis, int class_id, int prototype, const LabelMap& parts,
                             double threshold) {
    PartPresence o{};
    const double i = analysis.importance(class_id, prototype);
    if (!(i > 0.0)) return o;
    const std::vector<float> map = upsampled_map(analysis, prototype, parts.height, parts.width);
    std::array<double, kCategoryCount + 1> peak{};
    for (std::size_t p = 0; p < map.size(); ++p) peak[parts.data[p]] = std::max<double>(peak[parts.data[p]], map[p]);
    for (int q = 0; q < kCategoryCount; ++q) o[q] = i * peak[q + 1] > threshold;
    return o;
}

namespace {

template <typename Record, typename GroupScore>
AggregateScore class_looped(std::span<const Record> records, GroupScore group_score) {
    std::map<int, std::map<int, std::vector<const Record*>>> groups;  // class -> prototype -> records
    for (const Record& r : records) groups[r.class_id][r.prototype].push_back(&r);
    AggregateScore out;
    double class_sum = 0.0;
    for (const auto& [cls, protos] : groups) {
        double proto_sum = 0.0;
        for (const auto& [proto, recs] : protos) proto_sum += group_score(recs);
        class_sum += proto_sum / static_cast<double>(protos.size());
        out.prototypes += static_cast<int>(protos.size());
    }
    out.classes = static_cast<int>(groups.size());
    out.score = out.classes > 0 ? class_sum / out.classes : 0.0;
    return out;
}

unsigned presence_bits(const PartPresence& o) {
    unsigned bits = 0;
    for (int q = 0; q < kCategoryCount; ++q) bits |= (o[q] ? 1u : 0u) << q;
    return bits;
}

}  // namespace

AggregateScore consistency_from_records(std::span<const PresenceRecord> records) {
    return class_looped(records, [](const std::vector<const PresenceRecord*>& recs) {
        std::map<unsigned, int> counts;
        for (const auto* r : recs) ++counts[presence_bits(r->presence)];
        int modal = 0;
        for (const auto& [bits, n] : counts) modal = std::max(modal, n);
        return static_cast<double>(modal) / static_cast<double>(recs.size());
    });
}

AggregateScore stability_from_records(std::span<const StabilityRecord> records) {
    return class_looped(records, [](const std::vector<const StabilityRecord*>& recs) {
        const auto same = std::count_if(recs.begin(), recs.end(), [](const StabilityRecord* r) { return r->unchanged; });
        return static_cast<double>(same) / static_cast<double>(recs.size());
    });
}

AggregateScore consistency(const ExplainableModel& model, std::span<const Scene> scenes, const MetricsConfig& cfg) {
    std::vector<std::vector<PresenceRecord>> per_scene(scenes.size());
    parallel_for(
        scenes.size(),
        [&](std::size_t i) {
            const Analysis a = model.analyze(scenes[i].image);
            const int k = a.predicted();
            for (Eigen::Index j = 0; j < a.importance.cols(); ++j)
                if (a.importance(k, j) > 0.0f)
                    per_scene[i].push_back({k, static_cast<int>(j),
                                            presence_vector(a, k, static_cast<int>(j), scenes[i].parts,
                                                            cfg.presence_threshold)});
        },
        cfg.workers);
    std::vector<PresenceRecord> all;
    for (auto& v : per_scene) all.insert(all.end(), v.begin(), v.end());
    return consistency_from_records(all);
}

AggregateScore stability(const ExplainableModel& model, std::span<const Scene> scenes, const MetricsConfig& cfg) {
    if (cfg.noise_amplitude < 0.0) throw InvalidParameter("noise amplitude must be nonnegative");
    std::vector<std::vector<StabilityRecord>> per_scene(scenes.size());
    parallel_for(
        scenes.size(),
        [&](std::size_t i) {
            const Scene& s = scenes[i];
            Image noisy = s.image;
            if (cfg.noise_amplitude > 0.0) {
                std::mt19937_64 rng(mix_seed(cfg.seed ^ 0x5EEDULL, mix_seed(s.placement_seed, i)));
                std::uniform_real_distribution<double> noise(-cfg.noise_amplitude, cfg.noise_amplitude);
                for (float& v : noisy.data) v = static_cast<float>(std::clamp(v + noise(rng), 0.0, 1.0));
            }
            const Image* images[] = {&s.image, &noisy};
            const std::vector<Analysis> a = model.analyze(images);
            const int k = a[0].predicted();
            for (Eigen::Index j = 0; j < a[0].importance.cols(); ++j) {
                if (!(a[0].importance(k, j) > 0.0f)) continue;
                const int p = static_cast<int>(j);
                const PartPresence before = presence_vector(a[0], k, p, s.parts, cfg.presence_threshold);
                const PartPresence after = presence_vector(a[1], k, p, s.parts, cfg.presence_threshold);
                per_scene[i].push_back({k, p, before == after});
            }
        },
        cfg.workers);
    std::vector<StabilityRecord> all;
    for (auto& v : per_scene) all.insert(all.end(), v.begin(), v.end());
    return stability_from_records(all);
}

// --- reports -----------------------------------------------------------------

const std::vector<std::string>& metric_names() {
    static const std::vector<std::string> names{"compactness", "funnybirds", "consistency", "stability"};
    return names;
}

std::vector<std::string> parse_metric_selection(const std::string& list) {
    std::vector<std::string> out;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item.erase(0, item.find_first_not_of(" \t"));
        item.erase(item.find_last_not_of(" \t") + 1);
        if (item.empty()) continue;
        if (item == "all") {
            for (const auto& n : metric_names())
                if (std::find(out.begin(), out.end(), n) == out.end()) out.push_back(n);
            continue;
        }
        if (std::find(metric_names().begin(), metric_names().end(), item) == metric_names().end())
            throw RejectedInput("unknown metric: " + item);
        if (std::find(out.begin(), out.end(), item) == out.end()) out.push_back(item);
    }
    if (out.empty()) throw RejectedInput("empty metric selection");
    return out;
}

MetricReport evaluate(const ExplainableModel& model, std::span<const Scene> scenes,
                      const std::vector<std::string>& selection, const MetricsConfig& cfg, bool have_masks) {
    const auto start = std::chrono::steady_clock::now();
    MetricReport r;
    r.requested = selection;
    r.num_scenes = static_cast<int>(scenes.size());
    r.num_prototypes = model.num_prototypes();
    r.completeness_mode = cfg.completeness;
    auto wants = [&](const char* name) { return std::find(selection.begin(), selection.end(), name) != selection.end(); };

    if (wants("compactness")) {
        std::vector<const Image*> images;
        std::vector<int> labels;
        for (const Scene& s : scenes) {
            images.push_back(&s.image);
            labels.push_back(s.class_id);
        }
        r.compactness = compactness(model, images, labels, cfg.workers);
    }
    for (const char* name : {"funnybirds", "consistency", "stability"}) {
        if (!wants(name) || have_masks) continue;
        r.warnings.push_back(std::string(name) + " skipped: dataset has no part masks");
    }
    if (have_masks && wants("funnybirds")) {
        r.checks = funnybirds_checks(model, scenes, cfg);
        r.radar = radar_scores(*r.checks, cfg.completeness);
        if (r.checks->degenerate_rankings > 0)
            r.warnings.push_back(std::to_string(r.checks->degenerate_rankings) +
                                 " degenerate rankings scored 0.5");
        if (r.checks->zero_maps > 0)
            r.warnings.push_back(std::to_string(r.checks->zero_maps) + " zero-sum similarity maps contributed 0");
        if (cfg.per_sample) r.per_sample = r.checks->per_sample;
    }
    if (have_masks && wants("consistency")) r.consistency = consistency(model, scenes, cfg);
    if (have_masks && wants("stability")) r.stability = stability(model, scenes, cfg);
    if (r.consistency && r.consistency->prototypes == 0) r.warnings.push_back("no active prototypes for consistency");
    r.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

json to_json(const MetricReport& r) {
    json j{{"schema_version", kMetricReportSchemaVersion},
           {"kind", "metric_report"},
           {"metrics", r.requested},
           {"num_scenes", r.num_scenes},
           {"num_prototypes", r.num_prototypes},
           {"warnings", r.warnings},
           {"wall_clock_seconds", r.wall_clock_seconds}};
    if (r.compactness) {
        j["accuracy"] = r.compactness->accuracy;
        j["global_size"] = r.compactness->global_size;
        j["local_size"] = r.compactness->local_size;
    }
    if (r.checks) {
        const auto& c = *r.checks;
        j["funnybirds"] = {{"CSDC", c.csdc}, {"PC", c.pc},   {"DC", c.dc},
                           {"D", c.d},       {"BI", c.bi},   {"SD", c.sd},
                           {"TS", c.ts},     {"mX", c.mx},   {"scenes", c.scenes},
                           {"ts_trials", c.ts_trials},       {"degenerate_rankings", c.degenerate_rankings}};
    }
    if (r.radar)
        j["radar"] = {{"completeness", r.radar->completeness},
                      {"correctness", r.radar->correctness},
                      {"contrastivity", r.radar->contrastivity},
                      {"completeness_mode", to_string(r.completeness_mode)}};
    if (r.consistency) j["consistency"] = r.consistency->score;
    if (r.stability) j["stability"] = r.stability->score;
    if (!r.per_sample.is_null()) j["per_sample"] = r.per_sample;
    return j;
}

std::vector<std::string> validate_report(const json& j) {
    std::vector<std::string> problems;
    if (!j.is_object()) return {"report is not an object"};
    if (!j.contains("schema_version") || !j["schema_version"].is_number_integer())
        problems.push_back("schema_version missing");
    else if (j["schema_version"].get<int>() != kMetricReportSchemaVersion)
        problems.push_back("unsupported schema_version");
    if (!j.contains("metrics") || !j["metrics"].is_array()) problems.push_back("metrics list missing");
    auto unit = [&](const json& obj, const std::string& key, const std::string& where) {
        if (!obj.contains(key)) {
            problems.push_back(where + key + " missing");
            return;
        }
        if (!obj[key].is_number()) {
            problems.push_back(where + key + " is not a number");
            return;
        }
        const double v = obj[key].get<double>();
        if (!(v >= 0.0 && v <= 1.0)) problems.push_back(where + key + " outside [0,1]");
    };
    auto nonneg = [&](const json& obj, const std::string& key) {
        if (!obj.contains(key) || !obj[key].is_number() || obj[key].get<double>() < 0.0)
            problems.push_back(key + " must be a nonnegative number");
    };
    if (j.contains("accuracy")) {
        unit(j, "accuracy", "");
        nonneg(j, "global_size");
        nonneg(j, "local_size");
        if (j.contains("global_size") && !j["global_size"].is_number_integer())
            problems.push_back("global_size must be an integer");
    }
    if (j.contains("funnybirds")) {
        const json& f = j["funnybirds"];
        const std::vector<std::string> keys{"CSDC", "PC", "DC", "D", "BI", "SD", "TS"};
        double sum = 0.0;
        bool complete = true;
        for (const auto& k : keys) {
            unit(f, k, "funnybirds.");
            if (f.contains(k) && f[k].is_number())
                sum += f[k].get<double>();
            else
                complete = false;
        }
        unit(f, "mX", "funnybirds.");
        if (complete && f.contains("mX") && f["mX"].is_number() && std::abs(f["mX"].get<double>() - sum / 7.0) > 1e-9)
            problems.push_back("funnybirds.mX is not the mean of its seven components");
    }
    if (j.contains("radar")) {
        for (const char* k : {"completeness", "correctness", "contrastivity"}) unit(j["radar"], k, "radar.");
        if (j.contains("funnybirds") && j["radar"].contains("correctness") && j["funnybirds"].contains("SD") &&
            j["radar"]["correctness"] != j["funnybirds"]["SD"])
            problems.push_back("radar.correctness differs from SD");
        if (j.contains("funnybirds") && j["radar"].contains("contrastivity") && j["funnybirds"].contains("TS") &&
            j["radar"]["contrastivity"] != j["funnybirds"]["TS"])
            problems.push_back("radar.contrastivity differs from TS");
    }
    if (j.contains("consistency")) unit(j, "consistency", "");
    if (j.contains("stability")) unit(j, "stability", "");
    if (j.contains("warnings") && !j["warnings"].is_array()) problems.push_back("warnings must be an array");
    return problems;
}

}  // namespace protos
