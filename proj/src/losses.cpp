#include "camrank/losses.hpp"

#include <algorithm>
#include <cmath>

namespace camrank::losses {

MapLoss fixation_loss(const Grid& pred, const Grid& gt) {
  require_same_shape(pred, gt, "fixation_loss");
  const double n = static_cast<double>(pred.size());
  const Grid p = pred.cwiseMax(kProbEpsilon).cwiseMin(1.0 - kProbEpsilon);
  MapLoss out;
  out.value = -(gt * p.log() + (1.0 - gt) * (1.0 - p).log()).sum() / n;
  const auto inside = (pred >= kProbEpsilon) && (pred <= 1.0 - kProbEpsilon);
  out.grad = inside.select((-gt / p + (1.0 - gt) / (1.0 - p)) / n, 0.0);
  return out;
}

int structure_window(int size) {
  const double scaled = 31.0 * size / 352.0;
  const int k = 2 * static_cast<int>(std::lround((scaled - 1.0) / 2.0)) + 1;
  return std::max(3, k);
}

Grid edge_weights(const Grid& gt, int window) {
  const auto rows = gt.rows();
  const auto cols = gt.cols();
  // Summed-area table with a zero border row/column.
  Grid sat = Grid::Zero(rows + 1, cols + 1);
  for (Eigen::Index y = 0; y < rows; ++y) {
    for (Eigen::Index x = 0; x < cols; ++x) {
      sat(y + 1, x + 1) = gt(y, x) + sat(y, x + 1) + sat(y + 1, x) - sat(y, x);
    }
  }
  const Eigen::Index r = window / 2;
  Grid w(rows, cols);
  for (Eigen::Index y = 0; y < rows; ++y) {
    const Eigen::Index y0 = std::max<Eigen::Index>(0, y - r), y1 = std::min(rows, y + r + 1);
    for (Eigen::Index x = 0; x < cols; ++x) {
      const Eigen::Index x0 = std::max<Eigen::Index>(0, x - r), x1 = std::min(cols, x + r + 1);
      const double total = sat(y1, x1) - sat(y0, x1) - sat(y1, x0) + sat(y0, x0);
      const double mean = total / static_cast<double>((y1 - y0) * (x1 - x0));
      w(y, x) = 1.0 + 5.0 * std::abs(mean - gt(y, x));
    }
  }
  return w;
}

MapLoss structure_loss(const Grid& pred, const Grid& gt, int window) {
  require_same_shape(pred, gt, "structure_loss");
  if (((gt != 0.0) && (gt != 1.0)).any()) throw ValidationError("structure_loss: ground truth must be binary");
  const Grid w = edge_weights(gt, window);
  const double wsum = w.sum();
  const Grid p = pred.cwiseMax(kProbEpsilon).cwiseMin(1.0 - kProbEpsilon);
  const Grid bce = -(gt * p.log() + (1.0 - gt) * (1.0 - p).log());
  const double wbce = (w * bce).sum() / wsum;

  const double inter = (w * pred * gt).sum();
  const double uni = (w * (pred + gt)).sum();
  const double denom = uni - inter + 1.0;
  const double wiou = 1.0 - (inter + 1.0) / denom;

  MapLoss out;
  out.value = wbce + wiou;
  const auto inside = (pred >= kProbEpsilon) && (pred <= 1.0 - kProbEpsilon);
  const Grid g_bce = inside.select(w * (-gt / p + (1.0 - gt) / (1.0 - p)) / wsum, 0.0);
  const Grid d_inter = w * gt;
  const Grid g_iou = -(d_inter * denom - (inter + 1.0) * (w - d_inter)) / (denom * denom);
  out.grad = g_bce + g_iou;
  return out;
}

SimilarityPrior::SimilarityPrior(const Eigen::Matrix4d& weights) : weights_(weights) {
  if (!is_valid()) throw ValidationError("similarity prior must be positive and monotone in rank distance");
}

SimilarityPrior SimilarityPrior::affine_default() {
  Eigen::Matrix4d w;
  for (int m = 0; m < 4; ++m) {
    for (int n = 0; n < 4; ++n) w(m, n) = 0.2 + 0.1 * std::abs(m - n);
  }
  return SimilarityPrior(w);
}

SimilarityPrior SimilarityPrior::uniform() { return SimilarityPrior(Eigen::Matrix4d::Ones()); }

bool SimilarityPrior::is_valid() const {
  if (!(weights_.array() > 0.0).all() || !weights_.allFinite()) return false;
  for (int n = 0; n < 4; ++n) {
    for (int m = 0; m < 4; ++m) {
      for (int m2 = 0; m2 < 4; ++m2) {
        if (std::abs(m - n) > std::abs(m2 - n) && weights_(m, n) < weights_(m2, n)) return false;
      }
    }
  }
  return true;
}

MatrixLoss weighted_rank_loss(const Matrix& logits, std::span<const int> truth, const SimilarityPrior& prior) {
  if (logits.cols() != kRankClasses) throw ValidationError("weighted_rank_loss: expected 4 logits per ROI");
  if (static_cast<std::size_t>(logits.rows()) != truth.size()) {
    throw ValidationError("weighted_rank_loss: one ground-truth rank per ROI required");
  }
  MatrixLoss out;
  out.grad = Matrix::Zero(logits.rows(), logits.cols());
  const auto n = logits.rows();
  if (n == 0) return out;
  for (Eigen::Index r = 0; r < n; ++r) {
    const int y = truth[static_cast<std::size_t>(r)];
    if (y < 0 || y >= kRankClasses) throw ValidationError("weighted_rank_loss: rank outside {0,1,2,3}");
    Eigen::Index predicted = 0;
    const double top = logits.row(r).maxCoeff(&predicted);
    const Eigen::RowVectorXd e = (logits.row(r).array() - top).exp().matrix();
    const double z = e.sum();
    const double ce = std::log(z) + top - logits(r, y);
    const double weight = prior(static_cast<int>(predicted), y);
    out.value += weight * ce;
    Eigen::RowVectorXd g = e / z;
    g(y) -= 1.0;
    out.grad.row(r) = weight * g / static_cast<double>(n);
  }
  out.value /= static_cast<double>(n);
  return out;
}

MatrixLoss bce_with_logits(const Matrix& logits, const Matrix& targets, double normalizer) {
  require_same_shape(logits, targets, "bce_with_logits");
  const double norm = normalizer > 0.0 ? normalizer : static_cast<double>(logits.size());
  MatrixLoss out;
  const auto z = logits.array();
  const auto y = targets.array();
  out.value = (z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).log()).sum() / norm;
  out.grad = ((1.0 / (1.0 + (-z).exp()) - y) / norm).matrix();
  return out;
}

MatrixLoss smooth_l1(const Matrix& pred, const Matrix& target, std::span<const char> active, double normalizer,
                     double beta) {
  require_same_shape(pred, target, "smooth_l1");
  MatrixLoss out;
  out.grad = Matrix::Zero(pred.rows(), pred.cols());
  if (normalizer <= 0.0) return out;
  for (Eigen::Index r = 0; r < pred.rows(); ++r) {
    if (!active[static_cast<std::size_t>(r)]) continue;
    for (Eigen::Index c = 0; c < pred.cols(); ++c) {
      const double d = pred(r, c) - target(r, c);
      const double a = std::abs(d);
      if (a < beta) {
        out.value += 0.5 * d * d / beta;
        out.grad(r, c) = d / beta / normalizer;
      } else {
        out.value += a - 0.5 * beta;
        out.grad(r, c) = (d > 0 ? 1.0 : -1.0) / normalizer;
      }
    }
  }
  out.value /= normalizer;
  return out;
}

LossReport make_report(double l_f, double l_c, double lambda, double l_rpn, double l_rank, double l_mask) {
  LossReport r;
  r.l_f = l_f;
  r.l_c = l_c;
  r.lambda = lambda;
  r.l_fc = joint_loss(l_f, l_c, lambda);
  r.l_rpn = l_rpn;
  r.l_rank = l_rank;
  r.l_mask = l_mask;
  r.l_total = l_rpn + l_rank + l_mask;
  return r;
}

RpnLoss rpn_loss(const RpnTargets& t) {
  const auto k = t.objectness.rows();
  RpnLoss out;
  out.grad_objectness = Matrix::Zero(k, 1);
  out.grad_deltas = Matrix::Zero(k, 4);
  if (k == 0) return out;
  Matrix labels(k, 1);
  std::vector<char> positive(static_cast<std::size_t>(k));
  for (Eigen::Index i = 0; i < k; ++i) {
    labels(i, 0) = t.labels[static_cast<std::size_t>(i)] > 0 ? 1.0 : 0.0;
    positive[static_cast<std::size_t>(i)] = t.labels[static_cast<std::size_t>(i)] > 0;
  }
  const auto cls = bce_with_logits(t.objectness, labels);
  const auto reg = smooth_l1(t.deltas, t.target_deltas, positive, static_cast<double>(k));
  out.value = cls.value + reg.value;
  out.grad_objectness = cls.grad;
  out.grad_deltas = reg.grad;
  return out;
}

RankHeadLoss rank_head_loss(const RankTargets& t, const SimilarityPrior& prior) {
  const auto n = t.logits.rows();
  RankHeadLoss out;
  out.grad_logits = Matrix::Zero(n, kRankClasses);
  out.grad_deltas = Matrix::Zero(n, 4);
  if (n == 0) return out;
  const auto cls = weighted_rank_loss(t.logits, t.ranks, prior);
  std::vector<char> positive(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) positive[static_cast<std::size_t>(i)] = t.ranks[static_cast<std::size_t>(i)] != 0;
  const auto reg = smooth_l1(t.deltas, t.target_deltas, positive, static_cast<double>(n));
  out.value = cls.value + reg.value;
  out.grad_logits = cls.grad;
  out.grad_deltas = reg.grad;
  return out;
}

MaskLoss mask_loss(const MaskTargets& t) {
  MaskLoss out;
  double pixels = 0.0;
  for (const auto& m : t.logits) pixels += static_cast<double>(m.size());
  for (std::size_t i = 0; i < t.logits.size(); ++i) {
    const auto term = bce_with_logits(t.logits[i], t.targets[i], pixels);
    out.value += term.value;
    out.grads.push_back(term.grad);
  }
  return out;
}

LossReport ranking_total_loss(const RpnTargets& rpn, const RankTargets& rank, const MaskTargets& mask,
                              const SimilarityPrior& prior) {
  return make_report(0.0, 0.0, 1.0, rpn_loss(rpn).value, rank_head_loss(rank, prior).value,
                     mask_loss(mask).value);
}

}  // namespace camrank::losses
