#pragma once

#include "avmae/core.hpp"
#include "avmae/masking.hpp"

namespace avmae {

template <typename Scalar>
struct LossValue {
    Scalar value = 0;
    Mat<Scalar> grad;  // d value / d input, same shape as the input
};

/// Reconstruction loss over the decoder targets: squared error summed over the
/// targeted patches, divided by (1 - rho_d) * N * patch_dim.
/// `targets` holds all N normalized patches; `predictions` one row per target,
/// in ascending grid order.
template <typename Scalar>
LossValue<Scalar> masked_mse(const Mat<Scalar>& targets, const Mat<Scalar>& predictions, const MaskPair& masks);

template <typename Scalar>
struct ContrastiveLoss {
    Scalar value = 0;
    Mat<Scalar> grad_audio;
    Mat<Scalar> grad_video;
};

/// Symmetric InfoNCE between L2-normalized audio and video features with
/// matched rows as positives: (CE(rows) + CE(columns)) / 2.
template <typename Scalar>
ContrastiveLoss<Scalar> info_nce(const Mat<Scalar>& audio, const Mat<Scalar>& video, double temperature);

/// Cross-entropy against (1 - smoothing) * one_hot + smoothing / classes.
template <typename Scalar>
LossValue<Scalar> cross_entropy_ls(const RowVec<Scalar>& logits, int label, double smoothing);

/// Mean squared error over all entries.
template <typename Scalar>
LossValue<Scalar> mse(const Mat<Scalar>& predictions, const Mat<Scalar>& targets);

} // namespace avmae
