#include <cmath>
#include <random>

#include <doctest.h>

#include "protos/errors.hpp"
#include "protos/model.hpp"
#include "protos/oracle_model.hpp"
#include "protos/training.hpp"

using namespace protos;

namespace {

PatchGrid random_grid(int rows, int cols, int dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> n(0.0f, 1.0f);
    PatchGrid g(rows, cols, dim);
    for (auto& v : g.values) v = n(rng);
    return g;
}

// Two 2-d prototypes (1,0), (0,1); projection layers zero so g_i is the input cell itself.
ModelParams two_by_two_model() {
    ModelParams p = ModelParams::initialize({2, 2, 2, 1}, 0);
    for (auto& w : p.projection.weight) w.setZero();
    p.prototypes.vectors = MatrixRM::Identity(2, 2);
    p.classifier.weight.resize(1, 2);
    p.classifier.weight << 0.5f, 0.25f;
    return p;
}

PatchGrid two_by_two_grid() {
    PatchGrid g(2, 2, 2);
    g.values = {1, 0, 0, 1, 1, 1, -1, 0};
    return g;
}

}  // namespace

TEST_CASE("projection: adapter with zero layers passes the adapted input through") {
    ProjectionParams p;
    p.has_adapter = true;
    p.adapter_weight = MatrixRM::Zero(4, 3);
    p.adapter_weight.topRows(3).setIdentity();
    p.adapter_bias = VectorF::Zero(4);
    for (int l = 0; l < kProjectionLayers; ++l) {
        p.weight[l] = MatrixRM::Zero(4, 4);
        p.bias[l] = VectorF::Zero(4);
    }
    const PatchGrid g = random_grid(2, 3, 3, 1);
    const MatrixRM out = project(g, p);
    CHECK(out.leftCols(3) == g.as_matrix());
    CHECK(out.col(3).isZero(0.0f));
    CHECK_THROWS_AS(project(random_grid(2, 3, 5, 1), p), RejectedInput);
}

TEST_CASE("projection: locality and determinism") {
    const ModelParams p = ModelParams::initialize({16, 32, 5, 2}, 3);
    const PatchGrid a = random_grid(3, 3, 16, 2);
    PatchGrid b = a;
    b.cell(4)[7] += 1.0f;
    const MatrixRM pa = project(a, p.projection), pb = project(b, p.projection);
    for (int i = 0; i < 9; ++i) CHECK((pa.row(i) == pb.row(i)) == (i != 4));
    CHECK(project(a, p.projection) == pa);
}

TEST_CASE("cosine similarity: parallel, orthogonal, antiparallel, zero cell") {
    PrototypeBank bank{MatrixRM(1, 3)};
    bank.vectors << 1.0f, 2.0f, -2.0f;
    MatrixRM g(4, 3);
    g << 2.0f, 4.0f, -4.0f, 2.0f, 1.0f, 2.0f, -1.0f, -2.0f, 2.0f, 0.0f, 0.0f, 0.0f;
    const MatrixRM s = cosine_similarity(g, bank);
    CHECK(s(0, 0) == doctest::Approx(1.0f));
    CHECK(s(1, 0) == doctest::Approx(0.0f));
    CHECK(s(2, 0) == doctest::Approx(-1.0f));
    CHECK(s(3, 0) == 0.0f);
    bank.vectors.setZero();
    CHECK_THROWS_AS(cosine_similarity(g, bank), InvalidParameter);
}

TEST_CASE("normalized similarity: simplex rows, uniform and sharp limits") {
    const MatrixRM flat = MatrixRM::Constant(2, 300, 0.3f);
    const MatrixRM u = normalize_similarity(flat, 0.1f);
    CHECK(u(0, 0) == doctest::Approx(1.0 / 300.0));
    MatrixRM peaked = MatrixRM::Constant(1, 5, -1.0f);
    peaked(0, 0) = 1.0f;
    CHECK(normalize_similarity(peaked, 1e-3f)(0, 0) == doctest::Approx(1.0f));

    std::mt19937_64 rng(4);
    std::uniform_real_distribution<float> d(-1.0f, 1.0f);
    MatrixRM raw(50, 37);
    for (Eigen::Index i = 0; i < raw.size(); ++i) raw.data()[i] = d(rng);
    const MatrixRM s = normalize_similarity(raw, 0.1f);
    for (Eigen::Index r = 0; r < s.rows(); ++r) CHECK(std::abs(s.row(r).cast<double>().sum() - 1.0) <= 1e-6);
    CHECK((s.array() >= 0.0f).all());
    CHECK_THROWS_AS(normalize_similarity(raw, 0.0f), InvalidParameter);
}

TEST_CASE("prototype scores: zero input, max-pool reduction, threshold") {
    PrototypicalHeadParams p;
    p.conv1_weight = VectorF::Ones(3);
    p.conv1_bias = VectorF::Zero(3);
    p.conv3_weight = MatrixRM::Zero(3, 9);
    p.conv3_bias = VectorF::Zero(3);
    p.norm_scale = VectorF::Ones(3);
    p.norm_shift = VectorF::Zero(3);
    HeadConfig cfg;
    CHECK(prototype_scores(MatrixRM::Zero(4, 3), 2, 2, p, cfg, Mode::Training).values.isZero(0.0f));

    MatrixRM s(4, 3);
    s << 0.1f, 0.2f, 0.7f, 0.5f, 0.3f, 0.2f, 0.05f, 0.9f, 0.05f, 0.3f, 0.3f, 0.4f;
    HeadConfig no_norm;
    no_norm.layer_norm = false;
    const PrototypeScores h = prototype_scores(s, 2, 2, p, no_norm, Mode::Training);
    CHECK(h.values[0] == 0.5f);
    CHECK(h.values[1] == 0.9f);
    CHECK(h.values[2] == 0.7f);
    HeadConfig pool;
    pool.mode = HeadMode::MaxPool;
    CHECK(prototype_scores(s, 2, 2, p, pool, Mode::Training).values == h.values);

    MatrixRM two(1, 2);
    two << 0.05f, 0.30f;
    const PrototypeScores t = prototype_scores(two, 1, 1, p, pool, Mode::Inference);
    CHECK(t.values[0] == 0.0f);
    CHECK(t.values[1] == 0.30f);

    p.conv3_weight = MatrixRM::Zero(2, 9);
    CHECK_THROWS_AS(prototype_scores(s, 2, 2, p, cfg, Mode::Training), InvalidParameter);
}

TEST_CASE("prototype scores: depthwise kernels before normalization") {
    // Without LN, column j of the head output depends only on column j of the input.
    const ModelParams mp = ModelParams::initialize({4, 4, 6, 1}, 9);
    PrototypicalHeadParams p = mp.head;
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    p.conv3_weight = MatrixRM::Random(6, 9);
    MatrixRM s(9, 6);
    for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = u(rng);
    HeadConfig cfg;
    cfg.layer_norm = false;
    const VectorF a = prototype_scores(s, 3, 3, p, cfg, Mode::Training).values;
    s.col(2).setRandom();
    const VectorF b = prototype_scores(s, 3, 3, p, cfg, Mode::Training).values;
    for (int j = 0; j < 6; ++j) CHECK((a[j] == b[j]) == (j != 2));
}

TEST_CASE("classify and importance matrix") {
    ClassifierWeights w{MatrixRM(1, 1)};
    w.weight << 0.5f;
    PrototypeScores h{VectorF::Constant(1, 0.8f), Mode::Inference};
    CHECK(classify(h, w)[0] == doctest::Approx(0.4f));
    CHECK(importance_matrix(w, h)(0, 0) == doctest::Approx(0.4f));
    h.values.setZero();
    CHECK(classify(h, w)[0] == 0.0f);

    ClassifierWeights w2{MatrixRM(2, 3)};
    w2.weight << 0.5f, 0.0f, 0.2f, 0.0f, 0.3f, 0.9f;
    PrototypeScores h2{VectorF(3), Mode::Inference};
    h2.values << 0.8f, 0.5f, 0.0f;
    const ImportanceMatrix imp = importance_matrix(w2, h2);
    CHECK(imp.col(2).isZero(0.0f));
    const VectorF logits = classify(h2, w2);
    for (int k = 0; k < 2; ++k) CHECK(imp.row(k).sum() == doctest::Approx(logits[k]).epsilon(1e-6));
    PrototypeScores doubled = h2;
    doubled.values *= 2.0f;
    CHECK(classify(doubled, w2)[0] == doctest::Approx(2.0f * logits[0]));
    CHECK(argmax(classify(doubled, w2)) == argmax(logits));

    w2.weight(1, 1) = -0.1f;
    CHECK_THROWS_AS(classify(h2, w2), InvariantViolation);
}

TEST_CASE("forward: hand-evaluated 2x2 grid in max-pool mode") {
    // Cells (1,0), (0,1), (1,1), (-1,0) against prototypes (1,0), (0,1), tau 0.5:
    //   cos rows (1,0), (0,1), (.7071,.7071), (-1,0)
    //   softmax p1 = 1 / (1 + exp((c2 - c1) / tau)) -> .880797, .119203, .5, .119203
    //   h = (max p1, max p2) = (.880797, .880797); logit = .5 * .880797 + .25 * .880797 = .660598
    HeadConfig cfg;
    cfg.mode = HeadMode::MaxPool;
    cfg.tau = 0.5f;
    const ForwardResult r = forward(two_by_two_grid(), two_by_two_model(), cfg, Mode::Inference);
    CHECK(r.similarity.raw(2, 0) == doctest::Approx(0.707107).epsilon(1e-5));
    CHECK(r.similarity.normalized(0, 0) == doctest::Approx(0.880797).epsilon(1e-5));
    CHECK(r.similarity.normalized(3, 0) == doctest::Approx(0.119203).epsilon(1e-5));
    CHECK(r.scores.values[0] == doctest::Approx(0.880797).epsilon(1e-5));
    CHECK(r.scores.values[1] == doctest::Approx(0.880797).epsilon(1e-5));
    CHECK(r.logits[0] == doctest::Approx(0.660598).epsilon(1e-5));
}

TEST_CASE("forward: full head against a direct evaluation") {
    ModelParams p = two_by_two_model();
    p.head.conv1_weight << 0.8f, 1.3f;
    p.head.conv1_bias << 0.1f, -0.2f;
    p.head.conv3_weight.row(0) << 0.1f, 0.2f, 0.3f, 0.4f, 0.5f, 0.6f, 0.7f, 0.8f, 0.9f;
    p.head.conv3_weight.row(1) << -0.3f, 0.2f, 0.0f, 0.1f, -0.1f, 0.4f, 0.0f, 0.2f, 0.1f;
    p.head.conv3_bias << 0.05f, 0.0f;
    p.head.norm_scale << 0.7f, 1.1f;
    p.head.norm_shift << 0.3f, 0.6f;
    HeadConfig cfg;
    cfg.tau = 0.5f;

    // Direct evaluation in double with explicit loops.
    const double cells[4][2] = {{1, 0}, {0, 1}, {1, 1}, {-1, 0}};
    double s[4][2];
    for (int i = 0; i < 4; ++i) {
        const double n = std::hypot(cells[i][0], cells[i][1]);
        const double c1 = cells[i][0] / n, c2 = cells[i][1] / n;
        const double e1 = std::exp(c1 / 0.5), e2 = std::exp(c2 / 0.5);
        s[i][0] = e1 / (e1 + e2);
        s[i][1] = e2 / (e1 + e2);
    }
    double h[2] = {-1e9, -1e9};
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 2; ++c) {
            double u[2];
            for (int j = 0; j < 2; ++j) {
                u[j] = p.head.conv1_weight[j] * s[r * 2 + c][j] + p.head.conv1_bias[j] + p.head.conv3_bias[j];
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int nr = r + dy, nc = c + dx;
                        if (nr < 0 || nr > 1 || nc < 0 || nc > 1) continue;
                        u[j] += p.head.conv3_weight(j, (dy + 1) * 3 + dx + 1) * s[nr * 2 + nc][j];
                    }
            }
            const double mean = 0.5 * (u[0] + u[1]);
            const double var = 0.5 * ((u[0] - mean) * (u[0] - mean) + (u[1] - mean) * (u[1] - mean));
            for (int j = 0; j < 2; ++j)
                h[j] = std::max(h[j], (u[j] - mean) / std::sqrt(var + 1e-5) * p.head.norm_scale[j] + p.head.norm_shift[j]);
        }
    const double logit = 0.5 * (h[0] < 0.1 ? 0.0 : h[0]) + 0.25 * (h[1] < 0.1 ? 0.0 : h[1]);

    const ForwardResult r = forward(two_by_two_grid(), p, cfg, Mode::Inference);
    CHECK(r.scores.values[0] == doctest::Approx(h[0] < 0.1 ? 0.0 : h[0]).epsilon(1e-5));
    CHECK(r.scores.values[1] == doctest::Approx(h[1] < 0.1 ? 0.0 : h[1]).epsilon(1e-5));
    CHECK(r.logits[0] == doctest::Approx(logit).epsilon(1e-5));
}

TEST_CASE("forward: training and inference differ only by the threshold") {
    const ModelParams p = ModelParams::initialize({16, 24, 40, 3}, 2);
    const PatchGrid g = random_grid(4, 4, 16, 8);
    const HeadConfig cfg;
    const ForwardResult tr = forward(g, p, cfg, Mode::Training);
    const ForwardResult in = forward(g, p, cfg, Mode::Inference);
    CHECK(tr.similarity.normalized == in.similarity.normalized);
    int zeroed = 0;
    for (int j = 0; j < 40; ++j) {
        if (tr.scores.values[j] >= cfg.threshold) {
            CHECK(in.scores.values[j] == tr.scores.values[j]);
        } else {
            CHECK(in.scores.values[j] == 0.0f);
            ++zeroed;
        }
        CHECK((in.scores.values[j] == 0.0f || in.scores.values[j] >= 0.1f));
    }
    CHECK(zeroed > 0);
    const ForwardResult again = forward(g, p, cfg, Mode::Inference);
    CHECK(again.logits == in.logits);
    CHECK(again.importance == in.importance);
}

TEST_CASE("forward: end-to-end locality through the toy backbone") {
    const ToyBackbone bb({});
    Image a(96, 96);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (auto& v : a.data) v = u(rng);
    Image b = a;
    b.at(50, 13, 2) = 0.0f;  // patch (4, 1)
    const ModelParams p = ModelParams::initialize({128, 64, 20, 2}, 4);
    const ForwardResult ra = forward(bb.embed(a), p, {}, Mode::Inference);
    const ForwardResult rb = forward(bb.embed(b), p, {}, Mode::Inference);
    for (int i = 0; i < 64; ++i) CHECK((ra.similarity.raw.row(i) == rb.similarity.raw.row(i)) == (i != 4 * 8 + 1));
}

TEST_CASE("batched forward matches the single-image path") {
    const ModelParams p = ModelParams::initialize({16, 24, 30, 3}, 5);
    const std::vector<PatchGrid> grids{random_grid(3, 3, 16, 1), random_grid(3, 3, 16, 2), random_grid(3, 3, 16, 3)};
    std::vector<const PatchGrid*> ptrs{&grids[0], &grids[1], &grids[2]};
    for (Mode mode : {Mode::Training, Mode::Inference}) {
        const BatchActivations a = forward_batch(ptrs, p, {}, mode);
        for (int b = 0; b < 3; ++b) {
            const ForwardResult r = forward(grids[b], p, {}, mode);
            CHECK((a.logits.row(b).transpose() - r.logits).cwiseAbs().maxCoeff() <= 1e-5f);
            CHECK((a.scores.row(b).transpose() - r.scores.values).cwiseAbs().maxCoeff() <= 1e-5f);
        }
    }
}

TEST_CASE("backward: parameter gradients match central differences") {
    std::mt19937_64 rng(1);
    std::normal_distribution<float> n(0.0f, 1.0f);
    std::vector<PatchGrid> grids{random_grid(3, 3, 6, 11), random_grid(3, 3, 6, 12), random_grid(3, 3, 6, 13)};
    std::vector<const PatchGrid*> ptrs{&grids[0], &grids[1], &grids[2]};
    for (HeadMode mode : {HeadMode::Full, HeadMode::MaxPool, HeadMode::SingleKernel}) {
        ModelParams params = ModelParams::initialize({6, 5, 7, 4}, 3);
        for (int j = 0; j < 7; ++j) {
            params.head.conv1_weight[j] = 1.0f + 0.3f * n(rng);
            for (int t = 0; t < 9; ++t) params.head.conv3_weight(j, t) = 0.3f * n(rng);
            params.head.norm_scale[j] = 1.0f + 0.2f * n(rng);
            params.head.norm_shift[j] = 0.3f * n(rng);
        }
        params.classifier.weight = params.classifier.weight.array() * 2.0f + 0.1f;
        HeadConfig head;
        head.mode = mode;
        head.tau = 0.5f;
        const std::vector<int> targets{0, 2, 3};
        LossConfig lc;
        lc.alpha = 0.1;
        lc.gamma = 0.1;
        auto loss = [&](const ModelParams& pp, ModelParams* grads) {
            const BatchActivations acts = forward_batch(ptrs, pp, head, Mode::Training);
            LossGradients lg;
            const LossInputs in{&acts.logits, targets, &acts.scores, &pp.classifier.weight, &acts.normalized};
            const LossBreakdown b = total_loss(in, lc, grads ? &lg : nullptr);
            if (grads) {
                backward_batch(acts, {lg.d_logits, lg.d_scores, lg.d_presence}, pp, head, *grads);
                grads->classifier.weight += lg.d_classifier;
            }
            return b.total;
        };
        ModelParams grads = ModelParams::zeros_like(params);
        loss(params, &grads);
        std::vector<std::vector<float>> analytic;
        grads.for_each([&](const std::string&, std::span<const float> v, std::vector<int>) { analytic.emplace_back(v.begin(), v.end()); });
        std::size_t tensor = 0;
        int checked = 0, bad = 0;
        params.for_each([&](const std::string& name, std::span<float> v, std::vector<int>) {
            for (std::size_t i = 0; i < v.size() && i < 12; ++i) {
                const float orig = v[i];
                const float e = 1e-3f;
                const double l0 = loss(params, nullptr);
                v[i] = orig + e;
                const double lp = loss(params, nullptr);
                v[i] = orig - e;
                const double lm = loss(params, nullptr);
                v[i] = orig;
                const double an = analytic[tensor][i];
                // Float32 forward: differences below ~1e-3 are rounding noise.
                auto close = [&](double fd, double tol) { return std::abs(fd - an) / std::max(5e-2, std::abs(fd) + std::abs(an)) <= tol; };
                const double central = (lp - lm) / (2.0 * e);
                // At a kink (|I| at h = 0, a switching spatial max) the analytic value is a one-sided slope or lies between them.
                const double right = (lp - l0) / e, left = (l0 - lm) / e;
                const bool between = an >= std::min(left, right) && an <= std::max(left, right) && left * right < 0.0;
                const bool ok = close(central, 2e-2) || close(right, 5e-2) || close(left, 5e-2) || between;
                ++checked;
                if (!ok) {
                    ++bad;
                    MESSAGE(to_string(mode) << " " << name << "[" << i << "] fd " << central << " (" << left << ", " << right << ") analytic " << an);
                }
            }
            ++tensor;
        });
        CHECK(checked > 50);
        CHECK(bad == 0);
    }
}

TEST_CASE("explain: coverage and ordering") {
    ModelParams p = ModelParams::initialize({128, 32, 6, 2}, 1);
    const ToyBackbone bb({});
    Image img(96, 96);
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (auto& v : img.data) v = u(rng);
    const PatchGrid g = bb.embed(img);
    HeadConfig cfg;
    cfg.mode = HeadMode::MaxPool;
    cfg.threshold = 0.0f;  // every prototype counts
    p.classifier.weight.setZero();
    p.classifier.weight.row(0) << 0.6f, 0.4f, 0.0f, 0.0f, 0.0f, 0.0f;
    // Equal scores make the importances exactly proportional to the weights.
    const ForwardResult fr = forward(g, p, cfg, Mode::Inference);
    const float h0 = fr.scores.values[0], h1 = fr.scores.values[1];

    const Explanation one = explain(img, g, p, cfg, 1);
    CHECK(one.local_size == 2);
    CHECK(one.items.size() == 1);
    const double top = std::max(0.6 * h0, 0.4 * h1);
    CHECK(one.coverage == doctest::Approx(top / (0.6 * h0 + 0.4 * h1)).epsilon(1e-5));
    const Explanation four = explain(img, g, p, cfg, 4);
    CHECK(four.items.size() == 2);
    CHECK(four.coverage == 1.0f);
    CHECK(four.items[0].importance >= four.items[1].importance);
    CHECK(four.items[0].map.size() == 96u * 96u);
    double listed = 0.0;
    for (const auto& it : four.items) listed += it.importance;
    CHECK(listed == doctest::Approx(four.coverage * four.class_score).epsilon(1e-5));

    CHECK_THROWS_AS(explain(img, g, p, cfg, 0), RejectedInput);
    p.classifier.weight(1, 3) = std::nanf("");
    CHECK_THROWS_AS(explain(img, g, p, cfg, 2), InvalidParameter);
}

TEST_CASE("upsampling: argmax stays inside the grid argmax cell") {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<float> m(64);
        for (auto& v : m) v = u(rng);
        const int peak = static_cast<int>(std::max_element(m.begin(), m.end()) - m.begin());
        m[peak] += 0.5f;  // clear winner
        const std::vector<float> up = upsample_bilinear(m, 8, 8, 96, 96);
        const int at = static_cast<int>(std::max_element(up.begin(), up.end()) - up.begin());
        CHECK(at / 96 / 12 == peak / 8);
        CHECK(at % 96 / 12 == peak % 8);
    }
    // Pixels at or outside the outermost patch centers reproduce the cell values exactly.
    const std::vector<float> m{0.0f, 1.0f, 2.0f, 3.0f};
    const std::vector<float> up = upsample_bilinear(m, 2, 2, 24, 24);
    CHECK(up[5 * 24 + 5] == 0.0f);
    CHECK(up[5 * 24 + 18] == 1.0f);
    CHECK(up[18 * 24 + 5] == 2.0f);
    CHECK(up[18 * 24 + 18] == 3.0f);
    CHECK(up[12 * 24 + 12] > 0.0f);
    CHECK(up[12 * 24 + 12] < 3.0f);
}

TEST_CASE("class weight correlation") {
    MatrixRM w(4, 2);
    w << 1, 0, 0, 1, 1, 0, 0.5f, 0.5f;
    const Eigen::MatrixXd c = class_weight_correlation(w);
    CHECK(c(0, 1) == doctest::Approx(-1.0));
    CHECK(c(0, 2) == doctest::Approx(1.0));
    CHECK(c(3, 0) == 0.0);  // zero variance row
    CHECK(c(3, 3) == 1.0);
    CHECK((c - c.transpose()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("class weight correlation: shared part types correlate more than disjoint ones") {
    ClassCatalog cat;
    cat.type_counts = kDefaultTypeCounts;
    cat.classes = {{0, 0, 0, 0, 0}, {0, 0, 0, 0, 1}, {0, 0, 1, 0, 2}, {1, 1, 2, 1, 3}, {2, 2, 3, 2, 4}, {2, 3, 4, 3, 5}};
    const TemplateOracleModel oracle(cat);
    const Eigen::MatrixXd c = class_weight_correlation(oracle.weights());
    const double shared = (c(0, 1) + c(0, 2) + c(1, 2) + c(4, 5)) / 4.0;
    const double disjoint = (c(0, 3) + c(0, 4) + c(1, 4) + c(3, 5)) / 4.0;
    CHECK(shared > disjoint);
    CHECK(c(0, 1) > c(0, 2));  // four shared parts beat three
}
