#pragma once

// Evaluation metrics: segmentation (MAE, mean F, mean E, S-measure), rank maps (r_MAE)
// and fixation prediction (SIM, CC, EMD, KLD, NSS, AUC-Judd, AUC-Borji, shuffled AUC).
//
// All functions take Eigen arrays of any scalar type; ground-truth masks must be exactly
// {0, 1}.

#include "camrank/emd.hpp"
#include "camrank/grid.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <vector>

namespace camrank::metrics {

// Binarization ladder for the mean-F / mean-E scores: thresholds k / 256, k = 1..255.
inline constexpr int kThresholdCount = 255;
inline constexpr int kThresholdBins = kThresholdCount + 1;

inline constexpr double threshold_at(int k) { return static_cast<double>(k) / kThresholdBins; }

inline constexpr double kDefaultBetaSq = 0.3;
inline constexpr double kDefaultAlpha = 0.5;
inline constexpr double kKldEpsilon = 1e-12;

namespace detail {

template <typename Derived>
void require_binary(const Eigen::ArrayBase<Derived>& gt, const char* what) {
  using S = typename Derived::Scalar;
  if (((gt != S(0)) && (gt != S(1))).any()) {
    throw ValidationError(std::string(what) + ": ground truth must be binary");
  }
}

template <typename Derived>
void require_probability(const Eigen::ArrayBase<Derived>& p, const char* what) {
  using S = typename Derived::Scalar;
  if ((p < S(0)).any() || (p > S(1)).any() || !p.allFinite()) {
    throw ValidationError(std::string(what) + ": values must lie in [0, 1]");
  }
}

// Per-bin foreground / background counts of the prediction; bin b holds p with
// floor(p * 256) == b, clamped to the last bin. "p >= k/256" is then "bin >= k".
struct LadderCounts {
  std::array<long, kThresholdBins> fg{};
  std::array<long, kThresholdBins> bg{};
  long positives = 0;
  long total = 0;

  // Pixels predicted foreground at threshold k, split by ground truth.
  std::array<long, kThresholdBins + 1> fg_above{};
  std::array<long, kThresholdBins + 1> bg_above{};
};

template <typename DP, typename DG>
LadderCounts ladder_counts(const Eigen::ArrayBase<DP>& pred, const Eigen::ArrayBase<DG>& gt) {
  LadderCounts c;
  c.total = static_cast<long>(pred.size());
  for (Eigen::Index r = 0; r < pred.rows(); ++r) {
    for (Eigen::Index col = 0; col < pred.cols(); ++col) {
      const double p = static_cast<double>(pred(r, col));
      const int bin = std::min(kThresholdBins - 1, static_cast<int>(std::floor(p * kThresholdBins)));
      if (gt(r, col) != 0) {
        ++c.fg[bin];
        ++c.positives;
      } else {
        ++c.bg[bin];
      }
    }
  }
  for (int k = kThresholdBins - 1; k >= 0; --k) {
    c.fg_above[k] = c.fg_above[k + 1] + c.fg[k];
    c.bg_above[k] = c.bg_above[k + 1] + c.bg[k];
  }
  return c;
}

template <typename Derived>
double sample_std(const Eigen::ArrayBase<Derived>& x) {
  const auto n = x.size();
  if (n < 2) return 0.0;
  const double mean = static_cast<double>(x.mean());
  return std::sqrt((x.template cast<double>() - mean).square().sum() / static_cast<double>(n - 1));
}

}  // namespace detail

// ---------------------------------------------------------------------------------------
// Segmentation

template <typename DP, typename DG>
typename DP::Scalar mae(const Eigen::ArrayBase<DP>& pred, const Eigen::ArrayBase<DG>& gt) {
  require_same_shape(pred, gt, "mae");
  return (pred - gt.template cast<typename DP::Scalar>()).abs().mean();
}

template <typename DP, typename DG>
double r_mae(const Eigen::ArrayBase<DP>& pred, const Eigen::ArrayBase<DG>& gt) {
  require_same_shape(pred, gt, "r_mae");
  auto in_range = [](const auto& g) { return (g >= 0).all() && (g <= 3).all(); };
  if (!in_range(pred) || !in_range(gt)) throw ValidationError("r_mae: ranks must lie in {0,1,2,3}");
  const auto diff = (pred.template cast<long>() - gt.template cast<long>()).abs().sum();
  return static_cast<double>(diff) / static_cast<double>(pred.size());
}

template <typename DP, typename DG>
double mean_f_measure(const Eigen::ArrayBase<DP>& pred, const Eigen::ArrayBase<DG>& gt,
                      double beta_sq = kDefaultBetaSq) {
  require_same_shape(pred, gt, "mean_f_measure");
  detail::require_binary(gt, "mean_f_measure");
  detail::require_probability(pred, "mean_f_measure");
  const auto c = detail::ladder_counts(pred, gt);
  double sum = 0.0;
  for (int k = 1; k <= kThresholdCount; ++k) {
    const double tp = static_cast<double>(c.fg_above[k]);
    if (tp == 0.0) continue;
    const double precision = tp / static_cast<double>(c.fg_above[k] + c.bg_above[k]);
    const double recall = tp / static_cast<double>(c.positives);
    sum += (1.0 + beta_sq) * precision * recall / (beta_sq * precision + recall);
  }
  return sum / kThresholdCount;
}

template <typename DP, typename DG>
double mean_e_measure(const Eigen::ArrayBase<DP>& pred, const Eigen::ArrayBase<DG>& gt) {
  require_same_shape(pred, gt, "mean_e_measure");
  detail::require_binary(gt, "mean_e_measure");
  detail::require_probability(pred, "mean_e_measure");
  const auto c = detail::ladder_counts(pred, gt);
  const double n = static_cast<double>(c.total);
  const double gt_mean = static_cast<double>(c.positives) / n;
  double sum = 0.0;
  for (int k = 1; k <= kThresholdCount; ++k) {
    const double tp = static_cast<double>(c.fg_above[k]);
    const double fp = static_cast<double>(c.bg_above[k]);
    const double on = tp + fp;
    if (c.positives == 0) {
      sum += (n - on) / n;
      continue;
    }
    if (c.positives == c.total) {
      sum += on / n;
      continue;
    }
    const double fm_mean = on / n;
    // Enhanced alignment of one (prediction, truth) value pair.
    auto enhanced = [&](double fm, double g) {
      const double af = fm - fm_mean;
      const double ag = g - gt_mean;
      const double align = 2.0 * af * ag / (af * af + ag * ag);
      return (align + 1.0) * (align + 1.0) / 4.0;
    };
    const double fn = static_cast<double>(c.positives) - tp;
    const double tn = n - static_cast<double>(c.positives) - fp;
    sum += (tp * enhanced(1, 1) + fp * enhanced(1, 0) + fn * enhanced(0, 1) + tn * enhanced(0, 0)) / n;
  }
  return sum / kThresholdCount;
}

namespace detail {

// Object-level similarity of the prediction values inside one region.
inline double object_score(const std::vector<double>& values) {
  if (values.empty()) return 0.0;
  Eigen::Map<const Eigen::ArrayXd> v(values.data(), static_cast<Eigen::Index>(values.size()));
  const double mean = v.mean();
  const double sigma = sample_std(v);
  return 2.0 * mean / (mean * mean + 1.0 + sigma + std::numeric_limits<double>::epsilon());
}

template <typename DP, typename DG>
double region_ssim(const Eigen::ArrayBase<DP>& pred, const Eigen::ArrayBase<DG>& gt) {
  const double n = static_cast<double>(pred.size());
  if (n == 0.0) return 0.0;
  const Eigen::ArrayXXd p = pred.template cast<double>();
  const Eigen::ArrayXXd g = gt.template cast<double>();
  const double x = p.mean();
  const double y = g.mean();
  const double denom = n - 1.0 + std::numeric_limits<double>::epsilon();
  const double sx2 = (p - x).square().sum() / denom;
  const double sy2 = (g - y).square().sum() / denom;
  const double sxy = ((p - x) * (g - y)).sum() / denom;
  const double alpha = 4.0 * x * y * sxy;
  const double beta = (x * x + y * y) * (sx2 + sy2);
  if (alpha != 0.0) return alpha / (beta + std::numeric_limits<double>::epsilon());
  if (beta == 0.0) return 1.0;
  return 0.0;
}

}  // namespace detail

template <typename DP, typename DG>
double s_object(const Eigen::ArrayBase<DP>& pred, const Eigen::ArrayBase<DG>& gt) {
  require_same_shape(pred, gt, "s_object");
  detail::require_binary(gt, "s_object");
  std::vector<double> fg, bg;
  for (Eigen::Index r = 0; r < pred.rows(); ++r) {
    for (Eigen::Index c = 0; c < pred.cols(); ++c) {
      const double p = static_cast<double>(pred(r, c));
      if (gt(r, c) != 0) {
        fg.push_back(p);
      } else {
        bg.push_back(1.0 - p);
      }
    }
  }
  const double u = static_cast<double>(fg.size()) / static_cast<double>(pred.size());
  return u * detail::object_score(fg) + (1.0 - u) * detail::object_score(bg);
}

template <typename DP, typename DG>
double s_region(const Eigen::ArrayBase<DP>& pred, const Eigen::ArrayBase<DG>& gt) {
  require_same_shape(pred, gt, "s_region");
  detail::require_binary(gt, "s_region");
  const Eigen::Index rows = gt.rows();
  const Eigen::Index cols = gt.cols();
  // Centroid split point: rounded mean foreground coordinate, plus one (the split keeps
  // rows [0, cy) and columns [0, cx) in the top-left quadrant).
  double sum_x = 0.0, sum_y = 0.0, count = 0.0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      if (gt(r, c) != 0) {
        sum_x += static_cast<double>(c);
        sum_y += static_cast<double>(r);
        count += 1.0;
      }
    }
  }
  Eigen::Index cx, cy;
  if (count == 0.0) {
    cx = static_cast<Eigen::Index>(std::round(cols / 2.0)) + 1;
    cy = static_cast<Eigen::Index>(std::round(rows / 2.0)) + 1;
  } else {
    cx = static_cast<Eigen::Index>(std::round(sum_x / count)) + 1;
    cy = static_cast<Eigen::Index>(std::round(sum_y / count)) + 1;
  }
  cx = std::min(cx, cols);
  cy = std::min(cy, rows);
  const double area = static_cast<double>(rows * cols);
  const double w1 = static_cast<double>(cx * cy) / area;
  const double w2 = static_cast<double>((cols - cx) * cy) / area;
  const double w3 = static_cast<double>(cx * (rows - cy)) / area;
  const double w4 = 1.0 - w1 - w2 - w3;
  return w1 * detail::region_ssim(pred.topLeftCorner(cy, cx), gt.topLeftCorner(cy, cx)) +
         w2 * detail::region_ssim(pred.topRightCorner(cy, cols - cx), gt.topRightCorner(cy, cols - cx)) +
         w3 * detail::region_ssim(pred.bottomLeftCorner(rows - cy, cx), gt.bottomLeftCorner(rows - cy, cx)) +
         w4 * detail::region_ssim(pred.bottomRightCorner(rows - cy, cols - cx),
                                  gt.bottomRightCorner(rows - cy, cols - cx));
}

template <typename DP, typename DG>
double s_measure(const Eigen::ArrayBase<DP>& pred, const Eigen::ArrayBase<DG>& gt,
                 double alpha = kDefaultAlpha) {
  require_same_shape(pred, gt, "s_measure");
  detail::require_binary(gt, "s_measure");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("s_measure: alpha must lie in [0, 1]");
  const double gt_mean = static_cast<double>(gt.template cast<double>().mean());
  if (gt_mean == 0.0) return 1.0 - static_cast<double>(pred.template cast<double>().mean());
  if (gt_mean == 1.0) return static_cast<double>(pred.template cast<double>().mean());
  const double q = alpha * s_object(pred, gt) + (1.0 - alpha) * s_region(pred, gt);
  return std::max(0.0, q);
}

// ---------------------------------------------------------------------------------------
// Fixation prediction

namespace detail {

// Unit-mass copy of a nonnegative map; an all-zero map becomes uniform.
template <typename Derived>
Grid as_distribution(const Eigen::ArrayBase<Derived>& m, const char* what) {
  Grid g = m.template cast<double>();
  if ((g < 0.0).any() || !g.allFinite()) throw ValidationError(std::string(what) + ": map must be nonnegative");
  const double total = g.sum();
  if (total <= 0.0) return Grid::Constant(g.rows(), g.cols(), 1.0 / static_cast<double>(g.size()));
  return g / total;
}

template <typename Derived>
Grid min_max_normalized(const Eigen::ArrayBase<Derived>& m) {
  Grid g = m.template cast<double>();
  const double lo = g.minCoeff();
  const double hi = g.maxCoeff();
  if (hi - lo <= 0.0) return Grid::Zero(g.rows(), g.cols());
  return (g - lo) / (hi - lo);
}

// Distinct fixated pixel indices, in row-major order.
inline std::vector<Eigen::Index> fixation_indices(std::span<const Point> points, Eigen::Index rows,
                                                  Eigen::Index cols) {
  std::vector<Eigen::Index> idx;
  for (const auto& p : points) {
    if (p.x < 0 || p.y < 0 || p.x >= cols || p.y >= rows) {
      throw ValidationError("fixation point outside the map");
    }
    idx.push_back(static_cast<Eigen::Index>(p.y) * cols + p.x);
  }
  std::sort(idx.begin(), idx.end());
  idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
  return idx;
}

inline std::vector<double> threshold_ladder(double max_value, double step) {
  std::vector<double> t;
  const long top = static_cast<long>(std::floor(max_value / step + 1e-9));
  for (long k = top; k >= 0; --k) t.push_back(static_cast<double>(k) * step);
  return t;
}

}  // namespace detail

template <typename DP, typename DG>
double similarity(const Eigen::ArrayBase<DP>& pred, const Eigen::ArrayBase<DG>& gt) {
  require_same_shape(pred, gt, "similarity");
  return detail::as_distribution(pred, "similarity").cwiseMin(detail::as_distribution(gt, "similarity")).sum();
}

template <typename DP, typename DG>
double correlation(const Eigen::ArrayBase<DP>& pred, const Eigen::ArrayBase<DG>& gt) {
  require_same_shape(pred, gt, "correlation");
  const Grid a = detail::as_distribution(pred, "correlation");
  const Grid b = detail::as_distribution(gt, "correlation");
  const Grid da = a - a.mean();
  const Grid db = b - b.mean();
  const double denom = std::sqrt(da.square().sum() * db.square().sum());
  if (denom <= 0.0) return 0.0;
  return std::clamp((da * db).sum() / denom, -1.0, 1.0);
}

// KL divergence of the gt distribution from the prediction, both regularized by
// kKldEpsilon per pixel and renormalized.
template <typename DP, typename DG>
double kl_divergence(const Eigen::ArrayBase<DP>& pred, const Eigen::ArrayBase<DG>& gt) {
  require_same_shape(pred, gt, "kl_divergence");
  Grid p = detail::as_distribution(pred, "kl_divergence") + kKldEpsilon;
  Grid q = detail::as_distribution(gt, "kl_divergence") + kKldEpsilon;
  p /= p.sum();
  q /= q.sum();
  return std::max(0.0, (q * (q / p).log()).sum());
}

template <typename DP, typename DG>
double emd(const Eigen::ArrayBase<DP>& pred, const Eigen::ArrayBase<DG>& gt) {
  require_same_shape(pred, gt, "emd");
  return earth_movers_distance(detail::as_distribution(pred, "emd"), detail::as_distribution(gt, "emd"));
}

template <typename DP>
double nss(const Eigen::ArrayBase<DP>& pred, std::span<const Point> points) {
  if (points.empty()) throw ValidationError("nss: no fixation points");
  const Grid p = pred.template cast<double>();
  const double sigma = detail::sample_std(p);
  if (sigma <= 0.0) return 0.0;
  const Grid z = (p - p.mean()) / sigma;
  double sum = 0.0;
  for (const auto& pt : points) {
    if (pt.x < 0 || pt.y < 0 || pt.x >= z.cols() || pt.y >= z.rows()) {
      throw ValidationError("nss: fixation point outside the map");
    }
    sum += z(pt.y, pt.x);
  }
  return sum / static_cast<double>(points.size());
}

// AUC-Judd: every fixated pixel's saliency is a threshold; the ROC runs over all pixels
// with the fixated ones as positives.
template <typename DP>
double auc_judd(const Eigen::ArrayBase<DP>& pred, std::span<const Point> points) {
  if (points.empty()) throw ValidationError("auc_judd: no fixation points");
  const Grid s = detail::min_max_normalized(pred);
  const auto fix = detail::fixation_indices(points, s.rows(), s.cols());
  const auto n_pix = static_cast<double>(s.size());
  const auto n_fix = static_cast<double>(fix.size());
  if (n_pix == n_fix) return 0.5;

  std::vector<double> all(s.data(), s.data() + s.size());
  std::sort(all.begin(), all.end());
  std::vector<double> thresholds;
  for (auto i : fix) thresholds.push_back(s.data()[i]);
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  std::vector<double> fix_values;
  for (auto i : fix) fix_values.push_back(s.data()[i]);
  std::sort(fix_values.begin(), fix_values.end());

  auto count_at_least = [](const std::vector<double>& sorted, double t) {
    return static_cast<double>(sorted.end() - std::lower_bound(sorted.begin(), sorted.end(), t));
  };
  double auc = 0.0, prev_tp = 0.0, prev_fp = 0.0;
  for (double t : thresholds) {
    const double tp_count = count_at_least(fix_values, t);
    const double above = count_at_least(all, t);
    const double tp = tp_count / n_fix;
    const double fp = (above - tp_count) / (n_pix - n_fix);
    auc += (fp - prev_fp) * (tp + prev_tp) / 2.0;
    prev_tp = tp;
    prev_fp = fp;
  }
  auc += (1.0 - prev_fp) * (1.0 + prev_tp) / 2.0;
  return auc;
}

// ROC area separating positive from negative saliency samples, thresholds stepping by
// `step` from the largest sample value down to 0.
inline double auc_from_samples(std::vector<double> positives, std::vector<double> negatives,
                               double step = 0.1) {
  if (positives.empty() || negatives.empty()) throw ValidationError("auc: empty sample set");
  std::sort(positives.begin(), positives.end());
  std::sort(negatives.begin(), negatives.end());
  const double top = std::max(positives.back(), negatives.back());
  auto frac_at_least = [](const std::vector<double>& sorted, double t) {
    return static_cast<double>(sorted.end() - std::lower_bound(sorted.begin(), sorted.end(), t)) /
           static_cast<double>(sorted.size());
  };
  double auc = 0.0, prev_tp = 0.0, prev_fp = 0.0;
  for (double t : detail::threshold_ladder(top, step)) {
    const double tp = frac_at_least(positives, t);
    const double fp = frac_at_least(negatives, t);
    auc += (fp - prev_fp) * (tp + prev_tp) / 2.0;
    prev_tp = tp;
    prev_fp = fp;
  }
  auc += (1.0 - prev_fp) * (1.0 + prev_tp) / 2.0;
  return auc;
}

// Uniform pixel draws (with replacement) used as AUC-Borji negatives: `splits` rows of
// `count` pixel indices each.
inline std::vector<std::vector<Eigen::Index>> borji_negatives(Eigen::Index pixels, std::size_t count,
                                                              int splits, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Eigen::Index> pick(0, pixels - 1);
  std::vector<std::vector<Eigen::Index>> out(static_cast<std::size_t>(splits));
  for (auto& row : out) {
    row.resize(count);
    for (auto& v : row) v = pick(rng);
  }
  return out;
}

// Shuffled-AUC negatives: per split, a random subset (without replacement) of the pool of
// other images' fixated pixels, of size min(count, pool size).
inline std::vector<std::vector<Eigen::Index>> shuffled_negatives(std::vector<Eigen::Index> pool,
                                                                 std::size_t count, int splits,
                                                                 std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t take = std::min(count, pool.size());
  std::vector<std::vector<Eigen::Index>> out(static_cast<std::size_t>(splits));
  for (auto& row : out) {
    std::shuffle(pool.begin(), pool.end(), rng);
    row.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
  }
  return out;
}

template <typename DP>
double auc_with_negatives(const Eigen::ArrayBase<DP>& pred, std::span<const Point> points,
                          const std::vector<std::vector<Eigen::Index>>& negatives, double step = 0.1) {
  const Grid s = detail::min_max_normalized(pred);
  std::vector<double> pos;
  for (const auto& p : points) {
    if (p.x < 0 || p.y < 0 || p.x >= s.cols() || p.y >= s.rows()) {
      throw ValidationError("auc: fixation point outside the map");
    }
  }
  for (auto i : detail::fixation_indices(points, s.rows(), s.cols())) pos.push_back(s.data()[i]);
  if (negatives.empty()) throw ValidationError("auc: no splits");
  double total = 0.0;
  for (const auto& split : negatives) {
    std::vector<double> neg;
    neg.reserve(split.size());
    for (auto i : split) neg.push_back(s.data()[i]);
    total += auc_from_samples(pos, neg, step);
  }
  return total / static_cast<double>(negatives.size());
}

template <typename DP>
double auc_borji(const Eigen::ArrayBase<DP>& pred, std::span<const Point> points, int splits = 100,
                 std::uint64_t seed = 0) {
  if (points.empty()) throw ValidationError("auc_borji: no fixation points");
  const auto n_fix = detail::fixation_indices(points, pred.rows(), pred.cols()).size();
  return auc_with_negatives(pred, points, borji_negatives(pred.size(), n_fix, splits, seed));
}

template <typename DP>
double auc_shuffled(const Eigen::ArrayBase<DP>& pred, std::span<const Point> points,
                    std::span<const Point> other_points, int splits = 100, std::uint64_t seed = 0) {
  if (points.empty()) throw ValidationError("auc_shuffled: no fixation points");
  if (other_points.empty()) throw ValidationError("auc_shuffled: empty shuffle pool");
  const auto n_fix = detail::fixation_indices(points, pred.rows(), pred.cols()).size();
  auto pool = detail::fixation_indices(other_points, pred.rows(), pred.cols());
  return auc_with_negatives(pred, points, shuffled_negatives(std::move(pool), n_fix, splits, seed));
}

struct FixationScores {
  double sim = 0.0;
  double cc = 0.0;
  double emd = 0.0;
  double kld = 0.0;
  double nss = 0.0;
  double auc_judd = 0.0;
  double auc_borji = 0.0;
  std::optional<double> sauc;  // absent without a shuffle pool
};

struct FixationOptions {
  int n_shuffles = 100;
  std::uint64_t seed = 0;
  // Fixated pixels of the other images in the evaluated batch (sAUC negatives).
  std::span<const Point> shuffle_pool{};
};

template <typename DP, typename DG>
FixationScores fixation_metrics(const Eigen::ArrayBase<DP>& pred, const Eigen::ArrayBase<DG>& gt_density,
                                std::span<const Point> gt_points, const FixationOptions& options = {}) {
  require_same_shape(pred, gt_density, "fixation_metrics");
  if (gt_points.empty()) throw ValidationError("fixation_metrics: no fixation points");
  FixationScores s;
  s.sim = similarity(pred, gt_density);
  s.cc = correlation(pred, gt_density);
  s.emd = emd(pred, gt_density);
  s.kld = kl_divergence(pred, gt_density);
  s.nss = nss(pred, gt_points);
  s.auc_judd = auc_judd(pred, gt_points);
  s.auc_borji = auc_borji(pred, gt_points, options.n_shuffles, options.seed);
  if (!options.shuffle_pool.empty()) {
    s.sauc = auc_shuffled(pred, gt_points, options.shuffle_pool, options.n_shuffles, options.seed);
  }
  return s;
}

// Fixation points recovered from a density map: strict 8-neighbourhood maxima at or
// above `min_fraction` of the global maximum.
inline std::vector<Point> density_peaks(const Grid& density, double min_fraction = 0.1) {
  std::vector<Point> out;
  const double top = density.maxCoeff();
  if (!(top > 0.0)) return out;
  const auto rows = density.rows();
  const auto cols = density.cols();
  for (Eigen::Index y = 0; y < rows; ++y) {
    for (Eigen::Index x = 0; x < cols; ++x) {
      const double v = density(y, x);
      if (v < min_fraction * top) continue;
      bool peak = true;
      for (int dy = -1; dy <= 1 && peak; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          if (dx == 0 && dy == 0) continue;
          const auto yy = y + dy, xx = x + dx;
          if (yy < 0 || xx < 0 || yy >= rows || xx >= cols) continue;
          const double u = density(yy, xx);
          // Ties broken toward the first pixel in row-major order.
          const bool earlier = (yy < y) || (yy == y && xx < x);
          if (u > v || (u == v && earlier)) {
            peak = false;
            break;
          }
        }
      }
      if (peak) out.push_back({static_cast<int>(x), static_cast<int>(y)});
    }
  }
  return out;
}

}  // namespace camrank::metrics
