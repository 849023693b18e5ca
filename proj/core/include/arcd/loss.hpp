#pragma once

#include "arcd/arch.hpp"
#include "arcd/tensor.hpp"

namespace arcd {

inline constexpr double kProbabilityClamp = 1e-7;
inline constexpr double kDiceSmoothing = 1.0;

/// Mean binary cross-entropy, -[g log p + (1-g) log(1-p)], with p clamped
/// to [1e-7, 1 - 1e-7]. Differentiable in `p`; `target` is a constant.
template <typename T>
Tensor<T> bce(const Tensor<T>& p, const Tensor<T>& target);

/// 1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps), eps = 1, over the
/// whole tensor. Differentiable in `p`.
template <typename T>
Tensor<T> dice(const Tensor<T>& p, const Tensor<T>& target);

/// p (1 - g) + g (1 - p), returned detached.
template <typename T>
Tensor<T> uncertainty_target(const Tensor<T>& p_change, const Tensor<T>& g_change);

/// 1 where any in-bounds 4-neighbour differs from the centre pixel.
/// Input is [N,1,H,W] (or [H,W]) binary.
template <typename T>
Tensor<T> boundary_target(const Tensor<T>& g_change);

template <typename T>
struct LossBundle {
  Tensor<T> total;  // differentiable scalar
  double l_bce = 0;   // summed over supervised change maps
  double l_dice = 0;  // summed over supervised change maps
  double l_c = 0;
  double l_u = 0;
  double total_value = 0;
  int supervised_maps = 0;
};

/// Change loss (bce + dice) on every supervised change prediction, plus the
/// uncertainty loss when the model has an uncertainty branch.
template <typename T>
LossBundle<T> total_loss(const PredictionBundle<T>& prediction, const Tensor<T>& g_change, const AblationConfig& cfg);

}  // namespace arcd
