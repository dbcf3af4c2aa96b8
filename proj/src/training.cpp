#include "protos/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "protos/checkpoint.hpp"
#include "protos/errors.hpp"

namespace protos {

using nlohmann::json;

// --- config ------------------------------------------------------------------

void TrainConfig::validate() const {
    if (num_prototypes < 1 || proto_dim < 1) throw RejectedInput("prototype count and dimension must be positive");
    if (epochs < 1) throw RejectedInput("epochs must be positive");
    if (warmup_epochs < 0 || warmup_epochs >= epochs) throw RejectedInput("warmup_epochs must be in [0, epochs)");
    if (sparsity_warmup_epochs < 0) throw RejectedInput("sparsity_warmup_epochs must be nonnegative");
    if (!(base_lr > 0.0)) throw RejectedInput("base_lr must be positive");
    if (!(classifier_init_scale >= 0.0f)) throw RejectedInput("classifier_init_scale must be nonnegative");
    if (batch_size < 1) throw RejectedInput("batch_size must be positive");
    if (!(tau > 0.0f)) throw InvalidParameter("tau must be positive");
    loss.validate();
}

HeadConfig TrainConfig::head() const {
    HeadConfig h;
    h.mode = head_mode;
    h.tau = tau;
    h.threshold = threshold;
    return h;
}

void TrainConfig::apply_ablation(const std::string& name) {
    if (name == "no_prototypical_head")
        head_mode = HeadMode::MaxPool;
    else if (name == "single_kernel")
        head_mode = HeadMode::SingleKernel;
    else if (name == "l1_sparsity" || name == "sparsity=L1")
        loss.sparsity = SparsityLoss::L1;
    else if (name != "none" && !name.empty())
        throw RejectedInput("unknown ablation: " + name);
}

std::vector<std::string> TrainConfig::ablations() const {
    std::vector<std::string> out;
    if (head_mode == HeadMode::MaxPool) out.push_back("no_prototypical_head");
    if (head_mode == HeadMode::SingleKernel) out.push_back("single_kernel");
    if (loss.sparsity == SparsityLoss::L1) out.push_back("l1_sparsity");
    return out;
}

void to_json(json& j, const TrainConfig& c) {
    j = json{{"num_prototypes", c.num_prototypes},
             {"proto_dim", c.proto_dim},
             {"epochs", c.epochs},
             {"warmup_epochs", c.warmup_epochs},
             {"sparsity_warmup_epochs", c.sparsity_warmup_epochs},
             {"base_lr", c.base_lr},
             {"classifier_init_scale", c.classifier_init_scale},
             {"batch_size", c.batch_size},
             {"seed", c.seed},
             {"tau", c.tau},
             {"threshold", c.threshold},
             {"loss",
              {{"alpha", c.loss.alpha},
               {"gamma", c.loss.gamma},
               {"phi", c.loss.phi},
               {"eps", c.loss.eps},
               {"sparsity", to_string(c.loss.sparsity)}}},
             {"head_mode", to_string(c.head_mode)},
             {"ablations", c.ablations()},
             {"backbone_frozen", c.backbone_frozen},
             {"backbone",
              {{"patch_size", c.backbone.patch_size},
               {"out_dim", c.backbone.out_dim},
               {"seed", c.backbone.seed},
               {"normalize", c.backbone.normalize}}},
             {"optimizer",
              {{"name", "adamw"},
               {"beta1", c.optimizer.beta1},
               {"beta2", c.optimizer.beta2},
               {"eps", c.optimizer.eps},
               {"weight_decay", c.optimizer.weight_decay}}}};
}

void from_json(const json& j, TrainConfig& c) {
    const TrainConfig d;
    c.num_prototypes = j.value("num_prototypes", d.num_prototypes);
    c.proto_dim = j.value("proto_dim", d.proto_dim);
    c.epochs = j.value("epochs", d.epochs);
    c.warmup_epochs = j.value("warmup_epochs", d.warmup_epochs);
    c.sparsity_warmup_epochs = j.value("sparsity_warmup_epochs", d.sparsity_warmup_epochs);
    c.base_lr = j.value("base_lr", d.base_lr);
    c.classifier_init_scale = j.value("classifier_init_scale", d.classifier_init_scale);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.seed = j.value("seed", d.seed);
    c.tau = j.value("tau", d.tau);
    c.threshold = j.value("threshold", d.threshold);
    if (j.contains("loss")) {
        const json& l = j.at("loss");
        c.loss.alpha = l.value("alpha", d.loss.alpha);
        c.loss.gamma = l.value("gamma", d.loss.gamma);
        c.loss.phi = l.value("phi", d.loss.phi);
        c.loss.eps = l.value("eps", d.loss.eps);
        c.loss.sparsity = sparsity_loss_from_string(l.value("sparsity", to_string(d.loss.sparsity)));
    }
    c.head_mode = head_mode_from_string(j.value("head_mode", to_string(d.head_mode)));
    c.backbone_frozen = j.value("backbone_frozen", d.backbone_frozen);
    if (j.contains("backbone")) {
        const json& b = j.at("backbone");
        c.backbone.patch_size = b.value("patch_size", d.backbone.patch_size);
        c.backbone.out_dim = b.value("out_dim", d.backbone.out_dim);
        c.backbone.seed = b.value("seed", d.backbone.seed);
        c.backbone.normalize = b.value("normalize", d.backbone.normalize);
    }
    if (j.contains("optimizer")) {
        const json& o = j.at("optimizer");
        c.optimizer.beta1 = o.value("beta1", d.optimizer.beta1);
        c.optimizer.beta2 = o.value("beta2", d.optimizer.beta2);
        c.optimizer.eps = o.value("eps", d.optimizer.eps);
        c.optimizer.weight_decay = o.value("weight_decay", d.optimizer.weight_decay);
    }
    if (j.contains("ablations"))
        for (const auto& name : j.at("ablations")) c.apply_ablation(name.get<std::string>());
}

json to_json(const StepRecord& r) {
    return json{{"step", r.step},
                {"epoch", r.epoch},
                {"lr", r.lr},
                {"CE", r.loss.ce},
                {"HS", r.loss.sparsity},
                {"T", r.loss.presence},
                {"total", r.loss.total},
                {"zero_importance_samples", r.loss.zero_importance_samples}};
}

double lr_schedule(long step, long total_steps, long warmup_steps, double base_lr) {
    step = std::clamp(step, 0L, total_steps);
    if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    if (total_steps <= warmup_steps) return base_lr;
    const double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
    return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

// --- optimizer ---------------------------------------------------------------

namespace {

struct TensorRefs {
    std::vector<std::string> names;
    std::vector<std::span<float>> spans;
};

TensorRefs collect(ModelParams& p) {
    TensorRefs r;
    p.for_each([&](const std::string& name, std::span<float> values, std::vector<int>) {
        r.names.push_back(name);
        r.spans.push_back(values);
    });
    return r;
}

bool decayed(const std::string& name) {
    return name.starts_with("projection.") && name.ends_with(".weight");
}

void adamw_step(TrainState& st, ModelParams& grads, double lr, const OptimizerConfig& opt) {
    TensorRefs p = collect(st.params), g = collect(grads), m = collect(st.adam_m), v = collect(st.adam_v);
    const double t = static_cast<double>(st.step);
    const double c1 = 1.0 - std::pow(opt.beta1, t);
    const double c2 = 1.0 - std::pow(opt.beta2, t);
    const float b1 = static_cast<float>(opt.beta1), b2 = static_cast<float>(opt.beta2);
    for (std::size_t k = 0; k < p.spans.size(); ++k) {
        const float decay = decayed(p.names[k]) ? static_cast<float>(lr * opt.weight_decay) : 0.0f;
        auto pv = p.spans[k];
        auto gv = g.spans[k];
        auto mv = m.spans[k];
        auto vv = v.spans[k];
        for (std::size_t i = 0; i < pv.size(); ++i) {
            mv[i] = b1 * mv[i] + (1.0f - b1) * gv[i];
            vv[i] = b2 * vv[i] + (1.0f - b2) * gv[i] * gv[i];
            const double mhat = mv[i] / c1;
            const double vhat = vv[i] / c2;
            pv[i] -= decay * pv[i];
            pv[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + opt.eps));
        }
    }
}

}  // namespace

TrainState train(const TrainingSet& data, const TrainConfig& cfg, const TrainOptions& options) {
    cfg.validate();
    if (data.grids.empty()) throw RejectedInput("training set is empty");
    if (data.labels.size() != data.grids.size()) throw RejectedInput("labels do not match grids");
    if (data.num_classes < 1) throw RejectedInput("num_classes must be positive");
    for (int label : data.labels)
        if (label < 0 || label >= data.num_classes) throw RejectedInput("label out of range");
    const HeadConfig head = cfg.head();

    TrainState st;
    if (options.resume) {
        st = *options.resume;
    } else {
        ModelShape shape{data.grids[0].dim, cfg.proto_dim, cfg.num_prototypes, data.num_classes};
        st.params = ModelParams::initialize(shape, cfg.seed, cfg.classifier_init_scale);
        st.adam_m = ModelParams::zeros_like(st.params);
        st.adam_v = ModelParams::zeros_like(st.params);
    }

    const long n = static_cast<long>(data.grids.size());
    const long steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const long total_steps = steps_per_epoch * cfg.epochs;
    const long warmup_steps = steps_per_epoch * cfg.warmup_epochs;
    const long sparsity_steps = steps_per_epoch * cfg.sparsity_warmup_epochs;

    std::vector<int> order(static_cast<std::size_t>(n));
    std::vector<const PatchGrid*> batch;
    std::vector<int> targets;
    ModelParams grads = ModelParams::zeros_like(st.params);

    for (int epoch = st.epochs_completed; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 rng(cfg.seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(epoch + 1)));
        std::shuffle(order.begin(), order.end(), rng);

        for (long start = 0; start < n; start += cfg.batch_size) {
            const long stop = std::min(n, start + cfg.batch_size);
            batch.clear();
            targets.clear();
            for (long i = start; i < stop; ++i) {
                batch.push_back(&data.grids[order[i]]);
                targets.push_back(data.labels[order[i]]);
            }
            const BatchActivations acts = forward_batch(batch, st.params, head, Mode::Training);
            LossGradients lg;
            LossInputs in{&acts.logits, targets, &acts.scores, &st.params.classifier.weight, &acts.normalized};
            StepRecord rec;
            rec.epoch = epoch;
            LossConfig loss_cfg = cfg.loss;
            if (st.step < sparsity_steps)
                loss_cfg.phi *= static_cast<double>(st.step + 1) / static_cast<double>(sparsity_steps);
            rec.loss = total_loss(in, loss_cfg, &lg);
            if (!std::isfinite(rec.loss.total)) {
                json diag = {{"step", st.step + 1},
                             {"epoch", epoch},
                             {"batch_indices", std::vector<int>(order.begin() + start, order.begin() + stop)},
                             {"CE", rec.loss.ce},
                             {"HS", rec.loss.sparsity},
                             {"T", rec.loss.presence}};
                throw TrainingDiverged("non-finite loss at step " + std::to_string(st.step + 1), diag);
            }

            grads.for_each([](const std::string&, std::span<float> values, std::vector<int>) {
                std::fill(values.begin(), values.end(), 0.0f);
            });
            BatchGradients up{lg.d_logits, lg.d_scores, lg.d_presence};
            backward_batch(acts, up, st.params, head, grads);
            grads.classifier.weight += lg.d_classifier;

            ++st.step;
            rec.step = st.step;
            rec.lr = lr_schedule(st.step, total_steps, warmup_steps, cfg.base_lr);
            adamw_step(st, grads, rec.lr, cfg.optimizer);
            st.params.classifier.weight = st.params.classifier.weight.cwiseMax(0.0f);
            if (options.on_step) options.on_step(rec, st.params);
        }
        st.epochs_completed = epoch + 1;
        if (options.on_epoch_end) options.on_epoch_end(st);
    }
    return st;
}

// --- checkpoints -------------------------------------------------------------

std::string parameter_hash(const ModelParams& params) {
    std::vector<float> all;
    params.for_each([&](const std::string&, std::span<const float> values, std::vector<int>) {
        all.insert(all.end(), values.begin(), values.end());
    });
    return sha256_hex(std::span<const float>(all));
}

void save_checkpoint(Checkpoint& ckpt, const std::filesystem::path& dir) {
    ckpt.content_hash = parameter_hash(ckpt.params);
    std::vector<NamedTensor> tensors;
    auto add_all = [&](const ModelParams& p, const std::string& prefix) {
        p.for_each([&](const std::string& name, std::span<const float> values, std::vector<int> shape) {
            tensors.push_back({prefix + name, std::move(shape), std::vector<float>(values.begin(), values.end())});
        });
    };
    add_all(ckpt.params, "");
    json meta = {{"format", "protos-checkpoint"},
                 {"config", ckpt.config},
                 {"num_classes", ckpt.num_classes},
                 {"epoch", ckpt.epoch},
                 {"metrics", ckpt.metrics},
                 {"content_hash", ckpt.content_hash}};
    if (ckpt.resume) {
        add_all(ckpt.resume->adam_m, "optimizer.m.");
        add_all(ckpt.resume->adam_v, "optimizer.v.");
        meta["optimizer_step"] = ckpt.resume->step;
        meta["epochs_completed"] = ckpt.resume->epochs_completed;
    }
    write_tensor_archive(dir, std::move(tensors), meta);
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    const TensorArchive archive = read_tensor_archive(dir);
    const json& meta = archive.metadata;
    if (meta.value("format", "") != "protos-checkpoint") throw FormatError("not a model checkpoint: " + dir.string());

    Checkpoint ckpt;
    ckpt.config = meta.at("config").get<TrainConfig>();
    ckpt.num_classes = meta.at("num_classes").get<int>();
    ckpt.epoch = meta.value("epoch", 0);
    ckpt.metrics = meta.value("metrics", json::object());

    const NamedTensor* protos = archive.find("prototypes");
    const NamedTensor* adapter = archive.find("projection.adapter.weight");
    if (!protos || protos->shape.size() != 2) throw FormatError("checkpoint lacks a prototype tensor");
    ModelShape shape{adapter ? adapter->shape.at(1) : protos->shape[1], protos->shape[1], protos->shape[0],
                     ckpt.num_classes};

    auto fill = [&](ModelParams& p, const std::string& prefix) {
        p.for_each([&](const std::string& name, std::span<float> values, std::vector<int> expected) {
            const NamedTensor* t = archive.find(prefix + name);
            if (!t) throw FormatError("checkpoint lacks tensor " + prefix + name);
            if (t->shape != expected) throw FormatError("shape mismatch for tensor " + prefix + name);
            std::copy(t->values.begin(), t->values.end(), values.begin());
        });
    };
    ckpt.params = ModelParams::initialize(shape, 0);
    fill(ckpt.params, "");
    ckpt.content_hash = parameter_hash(ckpt.params);
    if (meta.contains("content_hash") && meta.at("content_hash") != ckpt.content_hash)
        throw FormatError("checkpoint content hash mismatch");

    if (meta.contains("optimizer_step")) {
        TrainState st;
        st.params = ckpt.params;
        st.adam_m = ModelParams::zeros_like(ckpt.params);
        st.adam_v = ModelParams::zeros_like(ckpt.params);
        fill(st.adam_m, "optimizer.m.");
        fill(st.adam_v, "optimizer.v.");
        st.step = meta.at("optimizer_step").get<long>();
        st.epochs_completed = meta.at("epochs_completed").get<int>();
        ckpt.resume = std::move(st);
    }
    return ckpt;
}

// --- compactness -------------------------------------------------------------

EffectivePrototypes effective_prototypes_from(std::span<const VectorF> logits, std::span<const MatrixRM> importance) {
    EffectivePrototypes out;
    std::vector<bool> used;
    for (std::size_t n = 0; n < logits.size(); ++n) {
        const int pred = argmax(logits[n]);
        out.predictions.push_back(pred);
        const auto row = importance[n].row(pred);
        if (used.empty()) used.assign(static_cast<std::size_t>(row.size()), false);
        std::vector<int> active;
        for (Eigen::Index j = 0; j < row.size(); ++j) {
            if (row[j] > 0.0f) {
                active.push_back(static_cast<int>(j));
                used[static_cast<std::size_t>(j)] = true;
            }
        }
        out.per_image.push_back(std::move(active));
    }
    for (std::size_t j = 0; j < used.size(); ++j)
        if (used[j]) out.global.push_back(static_cast<int>(j));
    return out;
}

EffectivePrototypes effective_prototypes(const ModelParams& params, const HeadConfig& head,
                                         std::span<const PatchGrid> grids) {
    std::vector<VectorF> logits;
    std::vector<MatrixRM> importance;
    constexpr std::size_t kChunk = 64;
    std::vector<const PatchGrid*> batch;
    for (std::size_t start = 0; start < grids.size(); start += kChunk) {
        batch.clear();
        for (std::size_t i = start; i < std::min(grids.size(), start + kChunk); ++i) batch.push_back(&grids[i]);
        const BatchActivations acts = forward_batch(batch, params, head, Mode::Inference);
        for (int b = 0; b < acts.batch; ++b) {
            logits.emplace_back(acts.logits.row(b).transpose());
            importance.emplace_back(params.classifier.weight.array().rowwise() * acts.scores.row(b).array());
        }
    }
    return effective_prototypes_from(logits, importance);
}

}  // namespace protos
