#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tkmamba/tensor.hpp"
#include "tkmamba/volume.hpp"

namespace tkm {

inline constexpr double kDiceSmooth = 1e-5;

struct LossWeights {
    double bce = 1.0;
    double dice = 1.0;
    double contrast = 1.0;
};

/// Soft Dice on sigmoid(logits), one term per (sample, class), averaged.
/// logits and target are [B,K,...]; target must be binary.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& logits, const Tensor<T>& target, double smooth = kDiceSmooth);

/// Mean BCE with logits. Rejects non-binary targets.
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& logits, const Tensor<T>& target);

template <typename T>
struct LossBreakdown {
    Tensor<T> total;
    double bce = 0.0;
    double dice = 0.0;
    double contrast = 0.0;  // zero when no similarity matrix was given
};

/// Weighted sum of BCE, Dice and the contrastive BCE on S against Y. Pass an
/// empty S to skip the contrastive term.
template <typename T>
LossBreakdown<T> total_loss(const Tensor<T>& seg_logits, const Tensor<T>& target, const Tensor<T>& S,
                            const Tensor<T>& Y, const LossWeights& weights = {});

/// 2|P n G| / (|P| + |G|); empty-empty is 1, one-empty is 0.
double dice_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);

/// Foreground voxels with a 6-neighbour outside the mask (the grid border
/// counts as outside). Returned as flat indices.
std::vector<std::size_t> surface_voxels(std::span<const std::uint8_t> mask, const Extent3& shape);

/// Normalized surface Dice with brute-force nearest-surface distances in mm.
double nsd_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, const Extent3& shape,
                 const Spacing3& spacing_mm, double tolerance_mm = 2.0);

/// Per-class scores for two label volumes on the same grid.
std::vector<double> dice_metric(const LabelVolume& pred, const LabelVolume& gt);
std::vector<double> nsd_metric(const LabelVolume& pred, const LabelVolume& gt, double tolerance_mm = 2.0);

/// Binary masks from [1,K,D,H,W] or [K,D,H,W] logits (logit > 0).
template <typename T>
LabelVolume masks_from_logits(const Tensor<T>& logits, const Spacing3& spacing_mm = {1.0, 1.0, 1.0},
                              const std::string& orientation = "RAS");

}  // namespace tkm
