#pragma once

// Training objectives. Every loss returns its value together with the gradient with
// respect to its prediction input, so the same routines serve evaluation, the autodiff
// graph and the finite-difference checks.

#include "camrank/grid.hpp"

#include <span>
#include <vector>

namespace camrank::losses {

inline constexpr double kProbEpsilon = 1e-12;
inline constexpr double kSmoothL1Beta = 1.0 / 9.0;
inline constexpr int kRankClasses = 4;

struct MapLoss {
  double value = 0.0;
  Grid grad;
};

struct MatrixLoss {
  double value = 0.0;
  Matrix grad;
};

// Mean pixelwise binary cross-entropy of probabilities (clamped to [eps, 1 - eps]).
MapLoss fixation_loss(const Grid& pred, const Grid& gt);

// Local-mean window for the edge weights: 31 at 352 pixels, scaled to `size` and kept odd.
int structure_window(int size);

// 1 + 5 |local_mean(gt) - gt|, the local mean taken over the in-bounds part of a
// window x window neighbourhood.
Grid edge_weights(const Grid& gt, int window);

// Edge-weighted BCE plus edge-weighted IoU of a probability map against a binary mask.
MapLoss structure_loss(const Grid& pred, const Grid& gt, int window);

inline double joint_loss(double l_f, double l_c, double lambda = 1.0) { return l_f + lambda * l_c; }

// Penalty S_p(m, n) for predicting rank n as rank m.
class SimilarityPrior {
 public:
  explicit SimilarityPrior(const Eigen::Matrix4d& weights);

  // 0.2 + 0.1 |m - n|; reproduces S_p(2, 0) = 0.4.
  static SimilarityPrior affine_default();
  static SimilarityPrior uniform();

  double operator()(int predicted, int truth) const { return weights_(predicted, truth); }
  const Eigen::Matrix4d& weights() const { return weights_; }

  // Positive entries and distance monotonicity within each truth column.
  bool is_valid() const;

 private:
  Eigen::Matrix4d weights_;
};

// Per-ROI cross-entropy weighted by S_p(argmax logits, truth), then averaged.
// logits: n x 4.
MatrixLoss weighted_rank_loss(const Matrix& logits, std::span<const int> truth, const SimilarityPrior& prior);

// Summed binary cross-entropy on logits divided by `normalizer` (the entry count when 0).
MatrixLoss bce_with_logits(const Matrix& logits, const Matrix& targets, double normalizer = 0.0);

// Sum of smooth-L1 over the rows flagged in `active`, divided by `normalizer`.
MatrixLoss smooth_l1(const Matrix& pred, const Matrix& target, std::span<const char> active,
                     double normalizer, double beta = kSmoothL1Beta);

struct LossReport {
  double l_f = 0.0;
  double l_c = 0.0;
  double lambda = 1.0;
  double l_fc = 0.0;
  double l_rpn = 0.0;
  double l_rank = 0.0;
  double l_mask = 0.0;
  double l_total = 0.0;  // l_rpn + l_rank + l_mask

  double objective() const { return l_fc + l_total; }
};

LossReport make_report(double l_f, double l_c, double lambda, double l_rpn, double l_rank, double l_mask);

// --- ranking branch targets ---------------------------------------------------------------

struct RpnTargets {
  Matrix objectness;           // k x 1 logits of the sampled anchors
  std::vector<int> labels;     // 1 positive / 0 negative
  Matrix deltas;               // k x 4 predicted
  Matrix target_deltas;        // k x 4
};

struct RankTargets {
  Matrix logits;               // n x 4 over ranks {0,1,2,3}
  std::vector<int> ranks;      // ground-truth rank per ROI, 0 = background
  Matrix deltas;               // n x 4 predicted
  Matrix target_deltas;        // n x 4, used on non-background rows only
};

struct MaskTargets {
  std::vector<Matrix> logits;   // one m x m grid per positive ROI
  std::vector<Matrix> targets;  // binary
};

struct RpnLoss {
  double value = 0.0;
  Matrix grad_objectness;
  Matrix grad_deltas;
};

struct RankHeadLoss {
  double value = 0.0;
  Matrix grad_logits;
  Matrix grad_deltas;
};

struct MaskLoss {
  double value = 0.0;
  std::vector<Matrix> grads;
};

RpnLoss rpn_loss(const RpnTargets& t);
RankHeadLoss rank_head_loss(const RankTargets& t, const SimilarityPrior& prior);
MaskLoss mask_loss(const MaskTargets& t);

// The three-part ranking objective; l_f / l_c are left at zero.
LossReport ranking_total_loss(const RpnTargets& rpn, const RankTargets& rank, const MaskTargets& mask,
                              const SimilarityPrior& prior);

}  // namespace camrank::losses
