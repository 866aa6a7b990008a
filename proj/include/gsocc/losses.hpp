#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "gsocc/splat.hpp"

namespace gsocc {

/// A scalar objective and its gradient with respect to the prediction.
struct LossValue {
  double value = 0.0;
  Eigen::ArrayXd grad;
};

/// Binary targets are passed as 0/1 arrays of the same length as pred.
using BinaryTarget = Eigen::ArrayXd;

inline constexpr double kProbEps = 1e-7;

struct FocalParams {
  double gamma = 2.0;
  double alpha_balance = 0.25;
};

// mean_i -alpha_b (1 - p_t)^gamma log p_t, with p clamped to [eps, 1 - eps].
LossValue focal_loss(const Eigen::ArrayXd& pred, const BinaryTarget& target, FocalParams params = {});

// Lovasz extension of the foreground Jaccard loss. Returns 0 when the target
// has no foreground voxel.
LossValue lovasz_loss(const Eigen::ArrayXd& pred, const BinaryTarget& target);

// Scene-class affinity: -(log P + log R + log S) / 3 with soft precision,
// recall and specificity. Throws DegenerateTarget unless the target has both
// foreground and background voxels.
LossValue scal_loss(const Eigen::ArrayXd& pred, const BinaryTarget& target);

// Mean Huber penalty over pixels with mask > 0; zero when the mask is empty.
LossValue huber_depth_loss(const Eigen::ArrayXd& pred_depth, const Eigen::ArrayXd& target_depth,
                           const Eigen::ArrayXd& valid_mask, double delta = 1.0);

struct FeatureLossValue {
  double value = 0.0;
  RowMatrixXd grad;  // pixels x d
};

// mean over masked pixels of 1 - cos(rendered, teacher).
FeatureLossValue cosine_feature_loss(const RowMatrixXd& rendered, const RowMatrixXd& teacher,
                                     const Eigen::ArrayXd& valid_mask);

struct LossWeights {
  double focal = 1.0;
  double lovasz = 1.0;
  double scal = 1.0;
  double feat = 1.0;
  double depth = 1.0;

  void validate() const;
};

/// Parts of the composite objective. Feature and depth terms are already
/// averaged over views; their gradients are per view.
struct LossParts {
  LossValue focal, lovasz, scal;
  double feat = 0.0;
  std::vector<RowMatrixXd> feat_grads;
  double depth = 0.0;
  std::vector<Eigen::ArrayXd> depth_grads;
};

struct TotalLoss {
  double value = 0.0;
  Eigen::ArrayXd occupancy_grad;
  std::vector<RowMatrixXd> feature_grads;
  std::vector<Eigen::ArrayXd> depth_grads;
};

TotalLoss total_loss(const LossParts& parts, const LossWeights& weights);

}  // namespace gsocc
