#include "protos/losses.hpp"

#include <cmath>

#include "protos/errors.hpp"

namespace protos {

std::string to_string(SparsityLoss s) { return s == SparsityLoss::L1 ? "l1" : "hoyer_square"; }

SparsityLoss sparsity_loss_from_string(const std::string& name) {
    if (name == "hoyer_square" || name == "hs" || name == "HS") return SparsityLoss::HoyerSquare;
    if (name == "l1" || name == "L1") return SparsityLoss::L1;
    throw RejectedInput("unknown sparsity loss: " + name);
}

void LossConfig::validate() const {
    if (alpha < 0.0 || gamma < 0.0 || phi < 0.0) throw InvalidParameter("loss weights must be nonnegative");
    if (!(eps > 0.0)) throw InvalidParameter("tanh-loss eps must be positive");
}

double hoyer_ratio(const Eigen::MatrixXd& importance) {
    const double l1 = importance.cwiseAbs().sum();
    const double l2sq = importance.squaredNorm();
    return l2sq > 0.0 ? l1 * l1 / l2sq : 0.0;
}

double hoyer_square(const Eigen::MatrixXd& importance, double alpha, double gamma, Eigen::MatrixXd* grad) {
    const double l1 = importance.cwiseAbs().sum();
    const double l2sq = importance.squaredNorm();
    if (grad) grad->setZero(importance.rows(), importance.cols());
    if (!(l2sq > 0.0)) return 0.0;
    const double l2 = std::sqrt(l2sq);
    if (grad) {
        const Eigen::MatrixXd sign = importance.unaryExpr([](double v) { return double((v > 0) - (v < 0)); });
        *grad = alpha * (2.0 * l1 / l2sq * sign - 2.0 * l1 * l1 / (l2sq * l2sq) * importance) +
                gamma / l2 * importance;
    }
    return alpha * l1 * l1 / l2sq + gamma * l2;
}

double tanh_presence_from_sums(const Eigen::VectorXd& presence, double eps, Eigen::VectorXd* grad) {
    const double j = static_cast<double>(presence.size());
    double loss = 0.0;
    if (grad) grad->resize(presence.size());
    for (Eigen::Index i = 0; i < presence.size(); ++i) {
        const double t = std::tanh(presence[i]);
        loss -= std::log(t + eps);
        if (grad) (*grad)[i] = -(1.0 - t * t) / ((t + eps) * j);
    }
    return loss / j;
}

double tanh_presence(const MatrixRM& normalized, double eps, Eigen::VectorXd* grad_per_column) {
    if ((normalized.array() < 0.0f).any()) throw InvariantViolation("normalized similarity must be nonnegative");
    const Eigen::VectorXd sums = normalized.cast<double>().colwise().sum().transpose();
    return tanh_presence_from_sums(sums, eps, grad_per_column);
}

double cross_entropy(const MatrixRM& logits, std::span<const int> targets, MatrixRM* grad) {
    const Eigen::Index b = logits.rows();
    if (static_cast<std::size_t>(b) != targets.size()) throw RejectedInput("targets do not match logits");
    double loss = 0.0;
    if (grad) grad->resize(b, logits.cols());
    for (Eigen::Index r = 0; r < b; ++r) {
        const int t = targets[r];
        if (t < 0 || t >= logits.cols()) throw RejectedInput("target class out of range");
        const Eigen::RowVectorXd z = logits.row(r).cast<double>();
        const double top = z.maxCoeff();
        const Eigen::RowVectorXd e = (z.array() - top).exp();
        const double norm = e.sum();
        loss += std::log(norm) + top - z[t];
        if (grad) {
            Eigen::RowVectorXd p = e / norm;
            p[t] -= 1.0;
            grad->row(r) = (p / static_cast<double>(b)).cast<float>();
        }
    }
    return loss / static_cast<double>(b);
}

LossBreakdown total_loss(const LossInputs& in, const LossConfig& cfg, LossGradients* grads) {
    cfg.validate();
    const MatrixRM& logits = *in.logits;
    const MatrixRM& scores = *in.scores;
    const MatrixRM& w = *in.classifier;
    const Eigen::Index b = logits.rows();
    if (scores.rows() != b || scores.cols() != w.cols() || logits.cols() != w.rows())
        throw RejectedInput("loss input shapes are inconsistent");

    LossBreakdown out;
    out.ce = cross_entropy(logits, in.targets, grads ? &grads->d_logits : nullptr);

    if (grads) {
        grads->d_scores = MatrixRM::Zero(b, w.cols());
        grads->d_classifier = MatrixRM::Zero(w.rows(), w.cols());
    }
    if (cfg.sparsity == SparsityLoss::HoyerSquare) {
        const Eigen::MatrixXd wd = w.cast<double>();
        Eigen::MatrixXd d_imp;
        Eigen::MatrixXd d_w = Eigen::MatrixXd::Zero(w.rows(), w.cols());
        for (Eigen::Index r = 0; r < b; ++r) {
            const Eigen::RowVectorXd h = scores.row(r).cast<double>();
            const Eigen::MatrixXd importance = wd.array().rowwise() * h.array();
            if (importance.squaredNorm() == 0.0) ++out.zero_importance_samples;
            out.sparsity += hoyer_square(importance, cfg.alpha, cfg.gamma, grads ? &d_imp : nullptr);
            if (grads) {
                const double scale = cfg.phi / static_cast<double>(b);
                d_w += scale * (d_imp.array().rowwise() * h.array()).matrix();
                grads->d_scores.row(r) = (scale * d_imp.cwiseProduct(wd).colwise().sum()).cast<float>();
            }
        }
        out.sparsity /= static_cast<double>(b);
        if (grads) grads->d_classifier = d_w.cast<float>();
    } else {
        out.sparsity = w.cast<double>().cwiseAbs().sum();
        if (grads)
            grads->d_classifier = w.unaryExpr([&](float v) { return static_cast<float>(cfg.phi) * float((v > 0) - (v < 0)); });
    }

    Eigen::VectorXd d_presence;
    out.presence = tanh_presence(*in.normalized, cfg.eps, grads ? &d_presence : nullptr);
    if (grads) grads->d_presence = d_presence.cast<float>();

    out.total = out.ce + cfg.phi * out.sparsity + out.presence;
    return out;
}

}  // namespace protos
