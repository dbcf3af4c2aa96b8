#pragma once

#include "protos/model.hpp"

namespace protos::detail {

/// Clamp to [-1, 1] that lets NaN through (vectorized min/max would turn it into a bound).
inline float clamp_unit(float v) { return v < -1.0f ? -1.0f : (v > 1.0f ? 1.0f : v); }

void gelu(const MatrixRM& x, MatrixRM& out);
void gelu_grad(const MatrixRM& x, MatrixRM& out);
void project_rows(const MatrixRM& input, const ProjectionParams& params,
                  std::array<MatrixRM, kProjectionLayers + 1>& act, std::array<MatrixRM, kProjectionLayers>& pre);
void unit_rows(const MatrixRM& m, MatrixRM& unit, VectorF& norms);
void softmax_rows(const MatrixRM& raw, float tau, MatrixRM& out);
void check_head(const PrototypicalHeadParams& p, Eigen::Index j);
void head_forward(const Eigen::Ref<const MatrixRM>& sim, int rows, int cols, const PrototypicalHeadParams& p,
                  const HeadConfig& cfg, Eigen::Ref<MatrixRM> hat, Eigen::Ref<VectorF> inv_std,
                  Eigen::Ref<MatrixRM> out);
void spatial_max(const Eigen::Ref<const MatrixRM>& out, Eigen::Ref<RowVectorF> pooled,
                 Eigen::Ref<Eigen::RowVectorXi> where);
float clamp_score(float pooled, const HeadConfig& cfg, Mode mode);

}  // namespace protos::detail
