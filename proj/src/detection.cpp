#include "camrank/detection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace camrank::detection {

double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

Box anchor_box(double cx, double cy, double side, double ratio) {
  const double w = side / std::sqrt(ratio);
  const double h = side * std::sqrt(ratio);
  return {cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0};
}

std::vector<Box> level_anchors(int height, int width, int stride, const AnchorConfig& config) {
  std::vector<Box> out;
  out.reserve(static_cast<std::size_t>(height) * width * config.per_location());
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double cx = (x + 0.5) * stride;
      const double cy = (y + 0.5) * stride;
      for (double s : config.scales) {
        for (double r : config.ratios) out.push_back(anchor_box(cx, cy, s * stride, r));
      }
    }
  }
  return out;
}

namespace {
constexpr double kMaxLogScale = 4.135166556742356;  // log(1000 / 16)
}

Deltas encode(const Box& reference, const Box& target, const Deltas& w) {
  const double rw = reference.width(), rh = reference.height();
  const double rx = reference.x1 + 0.5 * rw, ry = reference.y1 + 0.5 * rh;
  const double tw = target.width(), th = target.height();
  const double tx = target.x1 + 0.5 * tw, ty = target.y1 + 0.5 * th;
  return {w[0] * (tx - rx) / rw, w[1] * (ty - ry) / rh, w[2] * std::log(tw / rw), w[3] * std::log(th / rh)};
}

Box decode(const Box& reference, const Deltas& d, const Deltas& w) {
  const double rw = reference.width(), rh = reference.height();
  const double rx = reference.x1 + 0.5 * rw, ry = reference.y1 + 0.5 * rh;
  const double cx = d[0] / w[0] * rw + rx;
  const double cy = d[1] / w[1] * rh + ry;
  const double bw = std::exp(std::min(d[2] / w[2], kMaxLogScale)) * rw;
  const double bh = std::exp(std::min(d[3] / w[3], kMaxLogScale)) * rh;
  return {cx - 0.5 * bw, cy - 0.5 * bh, cx + 0.5 * bw, cy + 0.5 * bh};
}

Box clip(const Box& b, int height, int width) {
  auto cl = [](double v, double hi) { return std::clamp(v, 0.0, hi); };
  return {cl(b.x1, width), cl(b.y1, height), cl(b.x2, width), cl(b.y2, height)};
}

std::vector<int> nms(std::span<const Box> boxes, std::span<const double> scores, double iou_threshold) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  std::vector<int> keep;
  std::vector<char> dead(boxes.size(), 0);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const int a = order[i];
    if (dead[a]) continue;
    keep.push_back(a);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const int b = order[j];
      if (!dead[b] && iou(boxes[a], boxes[b]) > iou_threshold) dead[b] = 1;
    }
  }
  return keep;
}

std::vector<Match> match_proposals(std::span<const Box> proposals, std::span<const Box> gt_boxes,
                                   double iou_pos, double iou_det) {
  std::vector<Match> out(proposals.size());
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    Match& m = out[i];
    for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
      const double v = iou(proposals[i], gt_boxes[g]);
      if (v > m.best_iou) {
        m.best_iou = v;
        m.gt_index = static_cast<int>(g);
      }
    }
    m.rpn_positive = m.best_iou > iou_pos;
    m.detection_positive = m.gt_index >= 0 && m.best_iou >= iou_det;
  }
  return out;
}

std::vector<int> rpn_labels(std::span<const Match> matches, std::span<const Box> anchors,
                            std::span<const Box> gt_boxes) {
  std::vector<int> labels(matches.size(), 0);
  for (std::size_t i = 0; i < matches.size(); ++i) labels[i] = matches[i].rpn_positive ? 1 : 0;
  for (const auto& g : gt_boxes) {
    double best = 0.0;
    for (const auto& a : anchors) best = std::max(best, iou(a, g));
    if (best <= 0.0) continue;
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      if (iou(anchors[i], g) == best) labels[i] = 1;
    }
  }
  return labels;
}

std::vector<int> sample_balanced(std::span<const int> labels, int total, double positive_fraction,
                                 std::mt19937_64& rng) {
  std::vector<int> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] > 0 ? pos : neg).push_back(static_cast<int>(i));
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  const auto max_pos = static_cast<std::size_t>(std::lround(total * positive_fraction));
  pos.resize(std::min(pos.size(), max_pos));
  neg.resize(std::min(neg.size(), static_cast<std::size_t>(total) - pos.size()));
  std::vector<int> out(pos);
  out.insert(out.end(), neg.begin(), neg.end());
  std::sort(out.begin(), out.end());
  return out;
}

Box mask_box(const GridT<std::uint8_t>& mask) {
  int x1 = static_cast<int>(mask.cols()), y1 = static_cast<int>(mask.rows()), x2 = -1, y2 = -1;
  for (int y = 0; y < mask.rows(); ++y) {
    for (int x = 0; x < mask.cols(); ++x) {
      if (mask(y, x) == 0) continue;
      x1 = std::min(x1, x);
      y1 = std::min(y1, y);
      x2 = std::max(x2, x);
      y2 = std::max(y2, y);
    }
  }
  if (x2 < 0) throw ValidationError("mask_box: empty mask");
  return {double(x1), double(y1), double(x2 + 1), double(y2 + 1)};
}

}  // namespace camrank::detection
