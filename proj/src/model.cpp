#include "protos/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "model_kernels.hpp"
#include "protos/errors.hpp"

namespace protos {

std::string to_string(HeadMode mode) {
    switch (mode) {
        case HeadMode::Full: return "full";
        case HeadMode::MaxPool: return "no_prototypical_head";
        case HeadMode::SingleKernel: return "single_kernel";
    }
    return "full";
}

HeadMode head_mode_from_string(const std::string& name) {
    if (name == "full" || name.empty()) return HeadMode::Full;
    if (name == "no_prototypical_head" || name == "max_pool") return HeadMode::MaxPool;
    if (name == "single_kernel") return HeadMode::SingleKernel;
    throw RejectedInput("unknown head mode: " + name);
}

// --- parameters --------------------------------------------------------------

ModelShape ModelParams::shape() const {
    ModelShape s;
    s.proto_dim = static_cast<int>(prototypes.vectors.cols());
    s.num_prototypes = static_cast<int>(prototypes.vectors.rows());
    s.num_classes = static_cast<int>(classifier.weight.rows());
    s.embed_dim = projection.has_adapter ? static_cast<int>(projection.adapter_weight.cols()) : s.proto_dim;
    return s;
}

ModelParams ModelParams::initialize(const ModelShape& shape, std::uint64_t seed, float classifier_scale) {
    if (shape.embed_dim < 1 || shape.proto_dim < 1 || shape.num_prototypes < 1 || shape.num_classes < 1)
        throw RejectedInput("model shape extents must be positive");
    if (!(classifier_scale >= 0.0f)) throw RejectedInput("classifier init scale must be nonnegative");
    const int ce = shape.embed_dim;
    const int d = shape.proto_dim;
    const int j = shape.num_prototypes;
    const int k = shape.num_classes;

    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    std::uniform_real_distribution<float> uniform(0.0f, 1.0f);
    auto gaussian = [&](int rows, int cols, float stddev) {
        MatrixRM m(rows, cols);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * normal(rng);
        return m;
    };

    ModelParams p;
    p.projection.has_adapter = ce != d;
    if (p.projection.has_adapter) {
        p.projection.adapter_weight = gaussian(d, ce, 1.0f / std::sqrt(static_cast<float>(ce)));
        p.projection.adapter_bias = VectorF::Zero(d);
    }
    for (int l = 0; l < kProjectionLayers; ++l) {
        p.projection.weight[l] = gaussian(d, d, 0.5f / std::sqrt(static_cast<float>(d)));
        p.projection.bias[l] = VectorF::Zero(d);
    }

    p.prototypes.vectors = gaussian(j, d, 1.0f);
    p.prototypes.vectors.rowwise().normalize();

    p.head.conv1_weight = VectorF::Ones(j);
    p.head.conv1_bias = VectorF::Zero(j);
    p.head.conv3_weight = MatrixRM::Zero(j, 9);
    p.head.conv3_bias = VectorF::Zero(j);
    p.head.norm_scale = VectorF::Ones(j);
    p.head.norm_shift = VectorF::Zero(j);

    p.classifier.weight.resize(k, j);
    for (Eigen::Index i = 0; i < p.classifier.weight.size(); ++i)
        p.classifier.weight.data()[i] = classifier_scale * uniform(rng);
    return p;
}

ModelParams ModelParams::zeros_like(const ModelParams& other) {
    ModelParams z = other;
    z.for_each([](const std::string&, std::span<float> values, std::vector<int>) {
        std::fill(values.begin(), values.end(), 0.0f);
    });
    return z;
}

namespace {

template <typename Params, typename Fn>
void visit_params(Params& p, Fn&& visit) {
    struct Entry {
        std::string name;
        decltype(p.classifier.weight.data()) data;
        std::size_t size;
        std::vector<int> shape;
    };
    const int d = static_cast<int>(p.prototypes.vectors.cols());
    const int j = static_cast<int>(p.prototypes.vectors.rows());
    std::vector<Entry> entries;
    auto add = [&](std::string name, auto& tensor, std::vector<int> shape) {
        entries.push_back({std::move(name), tensor.data(), static_cast<std::size_t>(tensor.size()), std::move(shape)});
    };
    add("classifier.weight", p.classifier.weight,
        {static_cast<int>(p.classifier.weight.rows()), static_cast<int>(p.classifier.weight.cols())});
    add("head.conv1.bias", p.head.conv1_bias, {j});
    add("head.conv1.weight", p.head.conv1_weight, {j});
    add("head.conv3.bias", p.head.conv3_bias, {j});
    add("head.conv3.weight", p.head.conv3_weight, {j, 3, 3});
    add("head.norm.bias", p.head.norm_shift, {j});
    add("head.norm.weight", p.head.norm_scale, {j});
    if (p.projection.has_adapter) {
        add("projection.adapter.bias", p.projection.adapter_bias, {d});
        add("projection.adapter.weight", p.projection.adapter_weight,
            {d, static_cast<int>(p.projection.adapter_weight.cols())});
    }
    for (int l = 0; l < kProjectionLayers; ++l) {
        add("projection.layer" + std::to_string(l) + ".bias", p.projection.bias[l], {d});
        add("projection.layer" + std::to_string(l) + ".weight", p.projection.weight[l], {d, d});
    }
    add("prototypes", p.prototypes.vectors, {j, d});
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.name < b.name; });
    for (auto& e : entries) visit(e.name, std::span(e.data, e.size), e.shape);
}

}  // namespace

void ModelParams::for_each(const Visitor& visit) { visit_params(*this, visit); }

void ModelParams::for_each(const ConstVisitor& visit) const {
    visit_params(*this, [&](const std::string& name, std::span<const float> values, std::vector<int> shape) {
        visit(name, values, std::move(shape));
    });
}

bool ModelParams::all_finite() const {
    bool ok = true;
    for_each([&](const std::string&, std::span<const float> values, std::vector<int>) {
        for (float v : values) ok = ok && std::isfinite(v);
    });
    return ok;
}

// --- kernels shared by the single-image and batched paths --------------------

namespace detail {

void gelu(const MatrixRM& x, MatrixRM& out) {
    constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
    auto a = x.array();
    out = (0.5f * a * (1.0f + (kC * (a + 0.044715f * a.cube())).tanh())).matrix();
}

void gelu_grad(const MatrixRM& x, MatrixRM& out) {
    constexpr float kC = 0.7978845608028654f;
    auto a = x.array();
    const Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> t = (kC * (a + 0.044715f * a.cube())).tanh();
    out = (0.5f * (1.0f + t) + 0.5f * a * (1.0f - t.square()) * kC * (1.0f + 3.0f * 0.044715f * a.square())).matrix();
}

void project_rows(const MatrixRM& input, const ProjectionParams& params,
                  std::array<MatrixRM, kProjectionLayers + 1>& act, std::array<MatrixRM, kProjectionLayers>& pre) {
    if (params.has_adapter) {
        if (input.cols() != params.adapter_weight.cols()) throw RejectedInput("embedding dim does not match adapter");
        act[0].noalias() = input * params.adapter_weight.transpose();
        act[0].rowwise() += params.adapter_bias.transpose();
    } else {
        if (input.cols() != params.weight[0].cols()) throw RejectedInput("embedding dim does not match projection");
        act[0] = input;
    }
    MatrixRM activated;
    for (int l = 0; l < kProjectionLayers; ++l) {
        pre[l].noalias() = act[l] * params.weight[l].transpose();
        pre[l].rowwise() += params.bias[l].transpose();
        gelu(pre[l], activated);
        act[l + 1] = act[l] + activated;
    }
}

void unit_rows(const MatrixRM& m, MatrixRM& unit, VectorF& norms) {
    norms = m.rowwise().norm();
    unit.resize(m.rows(), m.cols());
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        if (norms[r] == 0.0f)
            unit.row(r).setZero();  // blank cells; a NaN norm still propagates
        else
            unit.row(r) = m.row(r) / norms[r];
    }
}

void softmax_rows(const MatrixRM& raw, float tau, MatrixRM& out) {
    out.resize(raw.rows(), raw.cols());
    for (Eigen::Index r = 0; r < raw.rows(); ++r) {
        const float top = raw.row(r).maxCoeff();
        out.row(r) = ((raw.row(r).array() - top) / tau).exp();
        out.row(r) /= out.row(r).sum();
    }
}

void check_head(const PrototypicalHeadParams& p, Eigen::Index j) {
    if (p.conv1_weight.size() != j || p.conv1_bias.size() != j || p.conv3_weight.rows() != j ||
        p.conv3_weight.cols() != 9 || p.conv3_bias.size() != j || p.norm_scale.size() != j || p.norm_shift.size() != j)
        throw InvalidParameter("prototypical head kernels do not match the prototype count");
}

void head_forward(const Eigen::Ref<const MatrixRM>& sim, int rows, int cols, const PrototypicalHeadParams& p,
                  const HeadConfig& cfg, Eigen::Ref<MatrixRM> hat, Eigen::Ref<VectorF> inv_std,
                  Eigen::Ref<MatrixRM> out) {
    const Eigen::Index j = sim.cols();
    if (cfg.mode == HeadMode::MaxPool) {
        out = sim;
        return;
    }
    // Conv1x1 + Conv3x3 (same padding), depthwise.
    MatrixRM u = sim.array().rowwise() * p.conv1_weight.transpose().array();
    u.rowwise() += (p.conv1_bias + p.conv3_bias).transpose();
    if (cfg.mode == HeadMode::Full) {
        const MatrixRM kernel = p.conv3_weight.transpose();  // 9 x J
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c)
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int nr = r + dy;
                        const int nc = c + dx;
                        if (nr < 0 || nr >= rows || nc < 0 || nc >= cols) continue;
                        u.row(r * cols + c) +=
                            sim.row(nr * cols + nc).cwiseProduct(kernel.row((dy + 1) * 3 + (dx + 1)));
                    }
    }
    if (!cfg.layer_norm) {
        hat = u;
        inv_std.setOnes();
        out = u;
        return;
    }
    for (Eigen::Index loc = 0; loc < u.rows(); ++loc) {
        const float mean = u.row(loc).mean();
        const float var = (u.row(loc).array() - mean).square().sum() / static_cast<float>(j);
        const float inv = 1.0f / std::sqrt(var + cfg.norm_eps);
        inv_std[loc] = inv;
        hat.row(loc) = (u.row(loc).array() - mean) * inv;
        out.row(loc) = hat.row(loc).cwiseProduct(p.norm_scale.transpose()) + p.norm_shift.transpose();
    }
}

void spatial_max(const Eigen::Ref<const MatrixRM>& out, Eigen::Ref<RowVectorF> pooled,
                 Eigen::Ref<Eigen::RowVectorXi> where) {
    for (Eigen::Index col = 0; col < out.cols(); ++col) {
        Eigen::Index at = 0;
        pooled[col] = out.col(col).maxCoeff(&at);
        where[col] = static_cast<int>(at);
    }
}

float clamp_score(float pooled, const HeadConfig& cfg, Mode mode) {
    if (mode == Mode::Inference) return pooled < cfg.threshold ? 0.0f : pooled;
    return pooled;
}

}  // namespace detail

// --- single-image operations -------------------------------------------------

MatrixRM project(const PatchGrid& grid, const ProjectionParams& params) {
    grid.validate();
    std::array<MatrixRM, kProjectionLayers + 1> act;
    std::array<MatrixRM, kProjectionLayers> pre;
    detail::project_rows(grid.as_matrix(), params, act, pre);
    return act.back();
}

MatrixRM cosine_similarity(const MatrixRM& projected, const PrototypeBank& bank) {
    if (bank.size() < 1) throw InvalidParameter("prototype bank is empty");
    if (projected.cols() != bank.vectors.cols()) throw RejectedInput("projected dim does not match prototype dim");
    MatrixRM unit_g, unit_p;
    VectorF norm_g, norm_p;
    detail::unit_rows(bank.vectors, unit_p, norm_p);
    if ((norm_p.array() <= 0.0f).any()) throw InvalidParameter("prototype with zero norm");
    detail::unit_rows(projected, unit_g, norm_g);
    MatrixRM raw = unit_g * unit_p.transpose();
    return raw.unaryExpr(&detail::clamp_unit);
}

MatrixRM normalize_similarity(const MatrixRM& raw, float tau) {
    if (!(tau > 0.0f)) throw InvalidParameter("softmax temperature must be positive");
    MatrixRM out;
    detail::softmax_rows(raw, tau, out);
    return out;
}

PrototypeScores prototype_scores(const MatrixRM& normalized, int rows, int cols, const PrototypicalHeadParams& params,
                                 const HeadConfig& cfg, Mode mode) {
    if (rows < 1 || cols < 1 || normalized.rows() != static_cast<Eigen::Index>(rows) * cols)
        throw RejectedInput("similarity rows do not match the spatial grid");
    const Eigen::Index j = normalized.cols();
    if (cfg.mode != HeadMode::MaxPool) detail::check_head(params, j);
    MatrixRM hat(normalized.rows(), j), out(normalized.rows(), j);
    VectorF inv(normalized.rows());
    detail::head_forward(normalized, rows, cols, params, cfg, hat, inv, out);
    RowVectorF pooled(j);
    Eigen::RowVectorXi where(j);
    detail::spatial_max(out, pooled, where);
    PrototypeScores scores{VectorF(j), mode};
    for (Eigen::Index i = 0; i < j; ++i) scores.values[i] = detail::clamp_score(pooled[i], cfg, mode);
    return scores;
}

VectorF classify(const PrototypeScores& scores, const ClassifierWeights& weights) {
    if (weights.weight.cols() != scores.values.size()) throw RejectedInput("classifier width does not match scores");
    if ((weights.weight.array() < 0.0f).any()) throw InvariantViolation("classifier weights must be nonnegative");
    return weights.weight * scores.values;
}

ImportanceMatrix importance_matrix(const ClassifierWeights& weights, const PrototypeScores& scores) {
    if (weights.weight.cols() != scores.values.size()) throw RejectedInput("classifier width does not match scores");
    return weights.weight.array().rowwise() * scores.values.transpose().array();
}

ForwardResult forward(const PatchGrid& grid, const ModelParams& params, const HeadConfig& cfg, Mode mode) {
    ForwardResult r;
    r.rows = grid.rows;
    r.cols = grid.cols;
    const MatrixRM projected = project(grid, params.projection);
    r.similarity.raw = cosine_similarity(projected, params.prototypes);
    r.similarity.tau = cfg.tau;
    r.similarity.normalized = normalize_similarity(r.similarity.raw, cfg.tau);
    r.scores = prototype_scores(r.similarity.normalized, grid.rows, grid.cols, params.head, cfg, mode);
    r.logits = classify(r.scores, params.classifier);
    r.importance = importance_matrix(params.classifier, r.scores);
    return r;
}

int argmax(const VectorF& v) {
    Eigen::Index at = 0;
    v.maxCoeff(&at);  // first occurrence on ties
    return static_cast<int>(at);
}

std::vector<float> upsample_bilinear(std::span<const float> grid_map, int rows, int cols, int height, int width) {
    if (rows < 1 || cols < 1 || height < 1 || width < 1 || grid_map.size() != static_cast<std::size_t>(rows) * cols)
        throw RejectedInput("bad upsampling extents");
    auto axis = [](int out_index, int out_size, int in_size, int& lo, int& hi, float& frac) {
        float src = (static_cast<float>(out_index) + 0.5f) * static_cast<float>(in_size) / static_cast<float>(out_size) - 0.5f;
        src = std::clamp(src, 0.0f, static_cast<float>(in_size - 1));
        lo = static_cast<int>(std::floor(src));
        hi = std::min(lo + 1, in_size - 1);
        frac = src - static_cast<float>(lo);
    };
    std::vector<float> out(static_cast<std::size_t>(height) * width);
    for (int y = 0; y < height; ++y) {
        int y0, y1;
        float fy;
        axis(y, height, rows, y0, y1, fy);
        for (int x = 0; x < width; ++x) {
            int x0, x1;
            float fx;
            axis(x, width, cols, x0, x1, fx);
            const float top = (1 - fx) * grid_map[y0 * cols + x0] + fx * grid_map[y0 * cols + x1];
            const float bottom = (1 - fx) * grid_map[y1 * cols + x0] + fx * grid_map[y1 * cols + x1];
            out[static_cast<std::size_t>(y) * width + x] = (1 - fy) * top + fy * bottom;
        }
    }
    return out;
}

Explanation explain(const Image& image, const PatchGrid& grid, const ModelParams& params, const HeadConfig& cfg,
                    int top_k) {
    if (top_k < 1) throw RejectedInput("top_k must be at least 1");
    if (!params.all_finite()) throw InvalidParameter("model parameters contain non-finite values");
    const ForwardResult fr = forward(grid, params, cfg, Mode::Inference);

    Explanation e;
    e.height = image.height;
    e.width = image.width;
    e.predicted_class = argmax(fr.logits);
    e.class_score = fr.logits[e.predicted_class];

    const auto row = fr.importance.row(e.predicted_class);
    std::vector<int> active;
    double total = 0.0;
    for (Eigen::Index j = 0; j < row.size(); ++j) {
        if (row[j] > 0.0f) {
            active.push_back(static_cast<int>(j));
            total += row[j];
        }
    }
    std::stable_sort(active.begin(), active.end(), [&](int a, int b) { return row[a] > row[b]; });
    e.local_size = static_cast<int>(active.size());

    const int listed = std::min<int>(top_k, e.local_size);
    double covered = 0.0;
    const int patches = grid.rows * grid.cols;
    std::vector<float> cell_map(patches);
    for (int n = 0; n < listed; ++n) {
        const int j = active[n];
        ExplanationItem item;
        item.prototype = j;
        item.importance = row[j];
        for (int i = 0; i < patches; ++i) cell_map[i] = fr.similarity.normalized(i, j);
        item.map = upsample_bilinear(cell_map, grid.rows, grid.cols, image.height, image.width);
        covered += row[j];
        e.items.push_back(std::move(item));
    }
    e.coverage = total > 0.0 ? static_cast<float>(std::clamp(covered / total, 0.0, 1.0)) : 1.0f;
    return e;
}

Eigen::MatrixXd class_weight_correlation(const MatrixRM& weight) {
    const Eigen::Index k = weight.rows();
    Eigen::MatrixXd w = weight.cast<double>();
    Eigen::VectorXd mean = w.rowwise().mean();
    Eigen::MatrixXd centered = w.colwise() - mean;
    Eigen::VectorXd norm = centered.rowwise().norm();
    Eigen::MatrixXd corr = Eigen::MatrixXd::Zero(k, k);
    for (Eigen::Index a = 0; a < k; ++a) {
        corr(a, a) = 1.0;
        for (Eigen::Index b = a + 1; b < k; ++b) {
            double c = 0.0;
            if (norm[a] > 0.0 && norm[b] > 0.0)
                c = std::clamp(centered.row(a).dot(centered.row(b)) / (norm[a] * norm[b]), -1.0, 1.0);
            corr(a, b) = corr(b, a) = c;
        }
    }
    return corr;
}

// --- batched forward ---------------------------------------------------------

BatchActivations forward_batch(std::span<const PatchGrid* const> grids, const ModelParams& params,
                               const HeadConfig& cfg, Mode mode) {
    if (grids.empty()) throw RejectedInput("empty batch");
    if (!(cfg.tau > 0.0f)) throw InvalidParameter("softmax temperature must be positive");
    BatchActivations a;
    a.batch = static_cast<int>(grids.size());
    a.rows = grids[0]->rows;
    a.cols = grids[0]->cols;
    a.mode = mode;
    const int dim = grids[0]->dim;
    const int patches = a.rows * a.cols;
    for (const PatchGrid* g : grids) {
        if (g->rows != a.rows || g->cols != a.cols || g->dim != dim)
            throw RejectedInput("all grids in a batch must share one shape");
    }
    a.input.resize(static_cast<Eigen::Index>(a.batch) * patches, dim);
    for (int b = 0; b < a.batch; ++b) a.input.middleRows(b * patches, patches) = grids[b]->as_matrix();

    detail::project_rows(a.input, params.projection, a.act, a.pre);
    detail::unit_rows(a.act.back(), a.unit_projected, a.projected_norm);
    detail::unit_rows(params.prototypes.vectors, a.unit_prototypes, a.prototype_norm);
    if ((a.prototype_norm.array() <= 0.0f).any()) throw InvalidParameter("prototype with zero norm");

    a.raw.noalias() = a.unit_projected * a.unit_prototypes.transpose();
    a.raw = a.raw.unaryExpr(&detail::clamp_unit);
    detail::softmax_rows(a.raw, cfg.tau, a.normalized);

    const Eigen::Index j = params.prototypes.vectors.rows();
    if (cfg.mode != HeadMode::MaxPool) detail::check_head(params.head, j);
    a.normed_hat.resize(a.normalized.rows(), j);
    a.inv_std.resize(a.normalized.rows());
    a.head_out.resize(a.normalized.rows(), j);
    a.pooled.resize(a.batch, j);
    a.pooled_at.resize(a.batch, j);
    for (int b = 0; b < a.batch; ++b) {
        const Eigen::Index off = static_cast<Eigen::Index>(b) * patches;
        detail::head_forward(a.normalized.middleRows(off, patches), a.rows, a.cols, params.head, cfg,
                             a.normed_hat.middleRows(off, patches), a.inv_std.segment(off, patches),
                             a.head_out.middleRows(off, patches));
        detail::spatial_max(a.head_out.middleRows(off, patches), a.pooled.row(b), a.pooled_at.row(b));
    }
    a.scores = a.pooled.unaryExpr([&](float v) { return detail::clamp_score(v, cfg, mode); });
    if ((params.classifier.weight.array() < 0.0f).any())
        throw InvariantViolation("classifier weights must be nonnegative");
    a.logits.noalias() = a.scores * params.classifier.weight.transpose();
    return a;
}

}  // namespace protos
