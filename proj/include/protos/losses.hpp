#pragma once

#include <span>
#include <string>

#include <Eigen/Dense>

#include "protos/tensor.hpp"

namespace protos {

enum class SparsityLoss { HoyerSquare, L1 };

std::string to_string(SparsityLoss s);
SparsityLoss sparsity_loss_from_string(const std::string& name);

struct LossConfig {
    double alpha = 0.01;  // Hoyer ratio weight
    double gamma = 0.01;  // L2 weight
    double phi = 1.0;     // sparsity loss factor
    double eps = 1e-8;    // tanh-loss stabilizer
    SparsityLoss sparsity = SparsityLoss::HoyerSquare;

    /// Throws InvalidParameter on negative weights or eps <= 0.
    void validate() const;
};

/// (sum |x|)^2 / sum x^2; 0 for an all-zero matrix.
double hoyer_ratio(const Eigen::MatrixXd& importance);

/// alpha * (|I|_1)^2 / |I|_2^2 + gamma * |I|_2. Writes dL/dI into `grad` when given.
double hoyer_square(const Eigen::MatrixXd& importance, double alpha, double gamma, Eigen::MatrixXd* grad = nullptr);

/// -(1/J) sum_j log(tanh(presence_j) + eps), with presence_j the batch-wide sum of column j.
double tanh_presence_from_sums(const Eigen::VectorXd& presence, double eps, Eigen::VectorXd* grad = nullptr);

/// `normalized` stacks every patch of every image in the batch (N x J). Entries must be >= 0.
double tanh_presence(const MatrixRM& normalized, double eps, Eigen::VectorXd* grad_per_column = nullptr);

/// Mean softmax cross-entropy over the batch.
double cross_entropy(const MatrixRM& logits, std::span<const int> targets, MatrixRM* grad = nullptr);

struct LossBreakdown {
    double ce = 0.0;
    double sparsity = 0.0;  // before the phi factor
    double presence = 0.0;
    double total = 0.0;
    int zero_importance_samples = 0;  // samples whose importance matrix was all zero
};

struct LossInputs {
    const MatrixRM* logits = nullptr;      // B x K
    std::span<const int> targets;          // B
    const MatrixRM* scores = nullptr;      // B x J, prototype scores h
    const MatrixRM* classifier = nullptr;  // K x J
    const MatrixRM* normalized = nullptr;  // N x J
};

struct LossGradients {
    MatrixRM d_logits;      // B x K
    MatrixRM d_scores;      // B x J
    MatrixRM d_classifier;  // K x J, from the sparsity term only
    VectorF d_presence;     // J
};

/// L = CE + phi * L_sparsity + L_T. The sparsity term is the batch mean of the per-sample
/// Hoyer-Square of I = W * diag(h), or phi * |W|_1 under the L1 ablation.
LossBreakdown total_loss(const LossInputs& in, const LossConfig& cfg, LossGradients* grads = nullptr);

}  // namespace protos
