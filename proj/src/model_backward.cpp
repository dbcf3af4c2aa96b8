#include <cmath>

#include "model_kernels.hpp"
#include "protos/errors.hpp"
#include "protos/model.hpp"

namespace protos {

namespace {

/// d/d(x) of rows normalized to unit length, given the unit rows and original norms.
MatrixRM unit_rows_backward(const MatrixRM& unit, const VectorF& norms, const MatrixRM& d_unit) {
    MatrixRM d(unit.rows(), unit.cols());
    for (Eigen::Index r = 0; r < unit.rows(); ++r) {
        if (norms[r] > 0.0f) {
            const float along = unit.row(r).dot(d_unit.row(r));
            d.row(r) = (d_unit.row(r) - along * unit.row(r)) / norms[r];
        } else {
            d.row(r).setZero();
        }
    }
    return d;
}

}  // namespace

void backward_batch(const BatchActivations& a, const BatchGradients& upstream, const ModelParams& params,
                    const HeadConfig& cfg, ModelParams& grads) {
    const int patches = a.rows * a.cols;
    const Eigen::Index j = params.prototypes.vectors.rows();
    if (upstream.d_logits.rows() != a.batch || upstream.d_logits.cols() != params.classifier.weight.rows())
        throw RejectedInput("d_logits shape mismatch");

    // classifier: logits = h W^T
    grads.classifier.weight.noalias() += upstream.d_logits.transpose() * a.scores;
    MatrixRM d_scores = upstream.d_logits * params.classifier.weight;
    if (upstream.d_scores.size() > 0) d_scores += upstream.d_scores;

    // scores -> pooled (threshold) -> head_out at the argmax location
    MatrixRM d_out = MatrixRM::Zero(a.head_out.rows(), j);
    for (int b = 0; b < a.batch; ++b) {
        for (Eigen::Index col = 0; col < j; ++col) {
            if (a.mode == Mode::Inference && a.scores(b, col) == 0.0f) continue;  // thresholded
            d_out(static_cast<Eigen::Index>(b) * patches + a.pooled_at(b, col), col) += d_scores(b, col);
        }
    }

    // head -> normalized similarity
    MatrixRM d_norm(a.normalized.rows(), j);
    if (cfg.mode == HeadMode::MaxPool) {
        d_norm = d_out;
    } else {
        MatrixRM d_u(a.head_out.rows(), j);
        if (cfg.layer_norm) {
            grads.head.norm_scale += (d_out.cwiseProduct(a.normed_hat)).colwise().sum().transpose();
            grads.head.norm_shift += d_out.colwise().sum().transpose();
            const RowVectorF scale = params.head.norm_scale.transpose();
            const float inv_j = 1.0f / static_cast<float>(j);
            for (Eigen::Index loc = 0; loc < d_out.rows(); ++loc) {
                const RowVectorF d_hat = d_out.row(loc).cwiseProduct(scale);
                const float sum_d = d_hat.sum();
                const float sum_dx = d_hat.dot(a.normed_hat.row(loc));
                d_u.row(loc) = a.inv_std[loc] * (d_hat.array() - inv_j * sum_d - a.normed_hat.row(loc).array() * (inv_j * sum_dx)).matrix();
            }
        } else {
            d_u = d_out;
        }
        const RowVectorF d_bias = d_u.colwise().sum();
        grads.head.conv1_bias += d_bias.transpose();
        grads.head.conv3_bias += d_bias.transpose();
        grads.head.conv1_weight += d_u.cwiseProduct(a.normalized).colwise().sum().transpose();
        d_norm = d_u.array().rowwise() * params.head.conv1_weight.transpose().array();
        if (cfg.mode == HeadMode::Full) {
            const MatrixRM kernel = params.head.conv3_weight.transpose();  // 9 x J
            MatrixRM d_kernel = MatrixRM::Zero(9, j);
            for (int b = 0; b < a.batch; ++b) {
                const Eigen::Index off = static_cast<Eigen::Index>(b) * patches;
                for (int r = 0; r < a.rows; ++r)
                    for (int c = 0; c < a.cols; ++c)
                        for (int dy = -1; dy <= 1; ++dy)
                            for (int dx = -1; dx <= 1; ++dx) {
                                const int nr = r + dy;
                                const int nc = c + dx;
                                if (nr < 0 || nr >= a.rows || nc < 0 || nc >= a.cols) continue;
                                const int o = (dy + 1) * 3 + (dx + 1);
                                const Eigen::Index here = off + r * a.cols + c;
                                const Eigen::Index there = off + nr * a.cols + nc;
                                d_kernel.row(o) += d_u.row(here).cwiseProduct(a.normalized.row(there));
                                d_norm.row(there) += d_u.row(here).cwiseProduct(kernel.row(o));
                            }
            }
            grads.head.conv3_weight += d_kernel.transpose();
        }
    }
    if (upstream.d_presence.size() > 0) d_norm.rowwise() += upstream.d_presence.transpose();

    // softmax over prototypes, temperature tau
    MatrixRM d_raw(a.raw.rows(), j);
    for (Eigen::Index r = 0; r < a.raw.rows(); ++r) {
        const float inner = d_norm.row(r).dot(a.normalized.row(r));
        d_raw.row(r) = (a.normalized.row(r).array() * (d_norm.row(r).array() - inner) / cfg.tau).matrix();
    }

    // cosine similarity
    const MatrixRM d_unit_g = d_raw * a.unit_prototypes;
    const MatrixRM d_unit_p = d_raw.transpose() * a.unit_projected;
    grads.prototypes.vectors += unit_rows_backward(a.unit_prototypes, a.prototype_norm, d_unit_p);
    MatrixRM d_act = unit_rows_backward(a.unit_projected, a.projected_norm, d_unit_g);

    // residual projection layers
    MatrixRM slope;
    for (int l = kProjectionLayers - 1; l >= 0; --l) {
        detail::gelu_grad(a.pre[l], slope);
        const MatrixRM d_pre = d_act.cwiseProduct(slope);
        grads.projection.weight[l].noalias() += d_pre.transpose() * a.act[l];
        grads.projection.bias[l] += d_pre.colwise().sum().transpose();
        d_act.noalias() += d_pre * params.projection.weight[l];
    }
    if (params.projection.has_adapter) {
        grads.projection.adapter_weight.noalias() += d_act.transpose() * a.input;
        grads.projection.adapter_bias += d_act.colwise().sum().transpose();
    }
}

}  // namespace protos
