#pragma once

// Box geometry for the ranking branch: anchors, IoU, NMS, delta coding and matching.

#include "camrank/geometry.hpp"
#include "camrank/grid.hpp"

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace camrank::detection {

double iou(const Box& a, const Box& b);

struct AnchorConfig {
  std::vector<double> scales{4.0, 8.0, 16.0};
  std::vector<double> ratios{0.5, 1.0, 2.0};  // height / width

  int per_location() const { return static_cast<int>(scales.size() * ratios.size()); }
};

// Anchors of one pyramid level, location-major then (scale, ratio): index
// ((y * width + x) * A + a). Side length = scale * stride, area preserved across ratios.
std::vector<Box> level_anchors(int height, int width, int stride, const AnchorConfig& config);
Box anchor_box(double cx, double cy, double side, double ratio);

// Box regression in the usual centre/log-size parameterization.
using Deltas = std::array<double, 4>;
inline constexpr Deltas kUnitDeltaWeights{1.0, 1.0, 1.0, 1.0};
inline constexpr Deltas kRoiDeltaWeights{10.0, 10.0, 5.0, 5.0};

Deltas encode(const Box& reference, const Box& target, const Deltas& weights = kUnitDeltaWeights);
Box decode(const Box& reference, const Deltas& deltas, const Deltas& weights = kUnitDeltaWeights);
Box clip(const Box& b, int height, int width);

// Greedy NMS; returns kept indices ordered by descending score.
std::vector<int> nms(std::span<const Box> boxes, std::span<const double> scores, double iou_threshold);

struct Match {
  int gt_index = -1;      // best-overlapping ground truth, -1 when there is none
  double best_iou = 0.0;
  bool rpn_positive = false;        // IoU > iou_pos
  bool detection_positive = false;  // IoU >= iou_det
};

// Labels every proposal against the ground truth at both stages.
std::vector<Match> match_proposals(std::span<const Box> proposals, std::span<const Box> gt_boxes,
                                   double iou_pos = 0.7, double iou_det = 0.5);

// RPN labels: 1 positive, 0 negative. Besides the IoU > iou_pos rule, the anchor(s) with
// the highest IoU for each ground-truth box are positive so every object has one.
std::vector<int> rpn_labels(std::span<const Match> matches, std::span<const Box> anchors,
                            std::span<const Box> gt_boxes);

// Random subset of at most `total` indices with at most `positive_fraction` positives;
// remaining indices are sampled from the negatives. Returned sorted.
std::vector<int> sample_balanced(std::span<const int> labels, int total, double positive_fraction,
                                 std::mt19937_64& rng);

Box mask_box(const GridT<std::uint8_t>& mask);

}  // namespace camrank::detection
